"""Matched two-layer quadratic model trained by full-batch gradient descent.

The student predicts ``y_hat = z' W2 z - Tr W2`` with ``z = W1 phi`` and
``phi = F[H_k(x)]``.  This is the unnormalised second-Hermite convention
(``v v' - I``, no ``1/sqrt(2)``), so the matching teacher labels are
``sqrt(2) * h2`` of :mod:`hierspec.target_model`.  With that bridge the
identity ``grad_W2 L = -C2(current features)`` at ``W2 = 0`` holds exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .target_model import CompositionalTarget, derive_seed, generate
from .tensor_core import hermite_features

__all__ = [
    "MatchedModel",
    "ProbeData",
    "Trajectory",
    "probe_dataset",
    "teacher_model",
    "predict",
    "loss",
    "grad",
    "moment_unnormalized",
    "top_eigenspace",
    "alignment",
    "cosine",
    "gd_train",
    "DIVERGENCE_LOSS",
]

DIVERGENCE_LOSS = 1e6
LABEL_BRIDGE = math.sqrt(2.0)  # matched-convention labels = sqrt(2) * h2


@dataclass(frozen=True, eq=False)
class MatchedModel:
    W1: np.ndarray  # (p, D), rows play the role of flattened first-layer tensors
    W2: np.ndarray  # (p, p), symmetric

    def __post_init__(self):
        W1 = np.array(self.W1, dtype=np.float64, ndmin=2)
        W2 = np.array(self.W2, dtype=np.float64, ndmin=2)
        if W2.shape != (W1.shape[0], W1.shape[0]):
            raise ValueError(f"W2 must be {W1.shape[0]}x{W1.shape[0]}, got {W2.shape}")
        if not (np.all(np.isfinite(W1)) and np.all(np.isfinite(W2))):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)

    @property
    def p(self) -> int:
        return self.W1.shape[0]


@dataclass(frozen=True, eq=False)
class ProbeData:
    """Flattened Hermite features ``(n, D)`` and matched-convention labels."""

    features: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]


def probe_dataset(target: CompositionalTarget, n: int, seed: int) -> ProbeData:
    """Features of degree ``target.k`` and teacher labels ``sqrt(2) * h2``.

    The link is not applied: the matched architecture is a teacher of the
    same quadratic form.
    """
    ds = generate(target, n, seed, store_latents=True)
    return ProbeData(np.ascontiguousarray(hermite_features(ds.inputs, target.k)), LABEL_BRIDGE * ds.h2)


def teacher_model(target: CompositionalTarget) -> MatchedModel:
    return MatchedModel(target.first_layer_flat, target.second_layer)


def _check(model: MatchedModel, data: ProbeData) -> None:
    if model.W1.shape[1] != data.features.shape[1]:
        raise ValueError(
            f"W1 has {model.W1.shape[1]} columns, features have {data.features.shape[1]}"
        )
    if data.labels.shape != (data.n,):
        raise ValueError("labels must be a vector with one entry per feature row")


def predict(model: MatchedModel, features: np.ndarray) -> np.ndarray:
    Z = features @ model.W1.T
    return np.einsum("ni,ij,nj->n", Z, model.W2, Z) - np.trace(model.W2)


def loss(model: MatchedModel, data: ProbeData) -> float:
    """``(1/2n) sum (y - y_hat)^2``."""
    _check(model, data)
    r = data.labels - predict(model, data.features)
    return float(0.5 * np.mean(r * r))


def grad(model: MatchedModel, data: ProbeData) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``(dL/dW1, dL/dW2)``.

    ``G2 = -(1/n) [ (Z*r)' Z - sum(r) I ]`` and ``G1 = -(2/n) W2 (Z*r)' Phi``
    with residuals ``r = y - y_hat``.  G2 is the derivative with respect to
    each entry of W2 taken independently, so it is symmetric.
    """
    G1, G2, _ = _grad_residual(model, data)
    return G1, G2


def _grad_residual(model: MatchedModel, data: ProbeData):
    _check(model, data)
    Phi = data.features
    n = data.n
    Z = Phi @ model.W1.T
    r = data.labels - (np.einsum("ni,ij,nj->n", Z, model.W2, Z) - np.trace(model.W2))
    Zr = Z * r[:, None]
    G2 = -(Zr.T @ Z) / n
    G2[np.diag_indices_from(G2)] += r.sum() / n
    G1 = -(2.0 / n) * (model.W2 @ (Zr.T @ Phi))
    return G1, G2, r


def moment_unnormalized(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(1/n) sum_mu y_mu (z_mu z_mu' - I)``."""
    n = Z.shape[0]
    C = (Z * y[:, None]).T @ Z / n
    C[np.diag_indices_from(C)] -= y.sum() / n
    return C


def top_eigenspace(features: np.ndarray, labels: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal ``(D, m)`` basis of the top-|lambda| eigenvectors of C1."""
    C = moment_unnormalized(features, labels)
    w, V = np.linalg.eigh(C)
    order = np.argsort(-np.abs(w), kind="stable")[:m]
    return V[:, order]


def alignment(W1: np.ndarray, basis: np.ndarray) -> float:
    """Product of principal-angle cosines between row(W1) and ``basis``."""
    q = np.linalg.qr(W1.T)[0]
    s = np.linalg.svd(q.T @ basis, compute_uv=False)
    return float(np.prod(np.clip(s, 0.0, 1.0)))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.vdot(a, b) / (na * nb))


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    align_W1: list = field(default_factory=list)
    align_G2: list = field(default_factory=list)
    grad_norm1: list = field(default_factory=list)
    grad_norm2: list = field(default_factory=list)
    diverged: bool = False
    final: MatchedModel | None = None

    COLUMNS = ("step", "loss", "align_W1", "align_G2", "grad_norm1", "grad_norm2")

    def rows(self):
        return zip(self.steps, self.loss, self.align_W1, self.align_G2, self.grad_norm1, self.grad_norm2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def gd_train(
    data: ProbeData,
    eta: float,
    steps: int,
    init_scale: float,
    seed: int,
    p: int,
    *,
    log_every: int = 1,
    basis: np.ndarray | None = None,
) -> Trajectory:
    """Full-batch gradient descent from ``N(0, init_scale^2)`` entries.

    ``p`` is the student width.  ``basis`` is the reference eigenspace for
    ``align_W1`` (defaults to the top-``p`` eigenvectors of C1).  Training
    stops early with ``diverged=True`` once the loss exceeds 1e6 or turns
    non-finite.
    """
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    if steps < 0 or p < 1:
        raise ValueError("steps must be >= 0 and p >= 1")
    D = data.features.shape[1]
    rng = np.random.default_rng(derive_seed(seed, 0x6D))
    W1 = init_scale * rng.standard_normal((p, D))
    g = init_scale * rng.standard_normal((p, p))
    W2 = np.triu(g) + np.triu(g, 1).T
    if basis is None:
        basis = top_eigenspace(data.features, data.labels, p)
    traj = Trajectory()
    for t in range(steps + 1):
        model = MatchedModel(W1, W2)
        G1, G2, r = _grad_residual(model, data)
        cur = float(0.5 * np.mean(r * r))
        if t % log_every == 0 or t == steps:
            Z = data.features @ W1.T
            traj.steps.append(t)
            traj.loss.append(cur)
            traj.align_W1.append(alignment(W1, basis))
            traj.align_G2.append(cosine(-G2, moment_unnormalized(Z, data.labels)))
            traj.grad_norm1.append(float(np.linalg.norm(G1)))
            traj.grad_norm2.append(float(np.linalg.norm(G2)))
        if not math.isfinite(cur) or cur > DIVERGENCE_LOSS:
            traj.diverged = True
            break
        if t == steps:
            break
        W1 = W1 - eta * G1
        W2 = W2 - eta * 0.5 * (G2 + G2.T)
        if not (np.all(np.isfinite(W1)) and np.all(np.isfinite(W2))):
            traj.diverged = True
            break
    if not traj.diverged:
        traj.final = MatchedModel(W1, W2)
    return traj
