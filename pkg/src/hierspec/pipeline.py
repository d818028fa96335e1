"""Two-stage spectral fit, 1-D polynomial readout, metrics and shallow baseline."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .moment_spectral import (
    DEFAULT_DEGREE_RATIO,
    DEFAULT_EDGE_C,
    DEFAULT_EDGE_METHOD,
    STAGE2_SOURCE,
    NoStructure,
    SpectralReport,
    accumulate,
    dump_moment,
    eigendecompose,
    load_moment,
    select_degree,
    MomentMatrix,
)
from .target_model import (
    BudgetExceeded,
    CompositionalTarget,
    Dataset,
    DEFAULT_BUDGET_BYTES,
)
from .tensor_core import (
    SymTensor,
    dump_tensor,
    hermite_features,
    iter_hermite_blocks,
    load_tensor,
    sym_dim,
)

log = logging.getLogger(__name__)

__all__ = [
    "Stage1Failed",
    "FitConfig",
    "PolyReadout",
    "HierModel",
    "Metrics",
    "fit_stage1",
    "transform_stage1",
    "fit_stage2",
    "transform_stage2",
    "fit_readout",
    "fit",
    "predict",
    "evaluate",
    "subspace_overlap",
    "shallow_baseline",
    "save_model",
    "load_model",
]

LAMBDA_GRID = (1e-3, 1e-4, 1e-5)
READOUT_DEGREE = 7


class Stage1Failed(RuntimeError):
    def __init__(self, message: str, reports: dict[int, SpectralReport]):
        super().__init__(message)
        self.reports = reports


@dataclass(frozen=True)
class FitConfig:
    k_max: int = 2
    edge_method: str = DEFAULT_EDGE_METHOD
    edge_c: float = DEFAULT_EDGE_C
    degree_ratio: float = DEFAULT_DEGREE_RATIO
    block_size: int = 4096
    lambdas: tuple[float, ...] = LAMBDA_GRID
    readout_degree: int = READOUT_DEGREE
    folds: int = 5
    exhaustive: bool = False  # build every degree even after one qualifies
    budget_bytes: int = DEFAULT_BUDGET_BYTES

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PolyReadout:
    """Ridge fit on monomials of the standardised scalar ``(s - center)/scale``."""

    center: float
    scale: float
    coef: np.ndarray  # intercept first
    lam: float
    degree: int

    def __call__(self, s: np.ndarray) -> np.ndarray:
        z = (np.asarray(s, dtype=np.float64) - self.center) / self.scale
        return np.polynomial.polynomial.polyval(z, self.coef)


@dataclass(frozen=True, eq=False)
class HierModel:
    k_hat: int
    A1_hat: np.ndarray
    A2_hat: np.ndarray
    readout: PolyReadout
    n: int = 0
    seed: int = 0
    config_hash: str = ""

    @property
    def d1_hat(self) -> int:
        return self.A1_hat.shape[0]


@dataclass(frozen=True)
class Metrics:
    mse_normalized: float
    overlap_A: float | None
    overlap_h: float | None
    n_spikes: int
    k_hat: int


def _moment_for_degree(X: np.ndarray, y: np.ndarray, k: int, block_size: int) -> MomentMatrix:
    return accumulate(iter_hermite_blocks(X, k, block_size), y, source=k)


def fit_stage1(
    dataset: Dataset, config: FitConfig = FitConfig()
) -> tuple[np.ndarray, int, int, dict[int, SpectralReport]]:
    """Recover the first-layer subspace.

    Returns ``(A1_hat, k_hat, d1_hat, reports)`` with ``A1_hat`` holding the
    top-|lambda| eigenvectors of the selected degree as orthonormal rows.
    Unless ``config.exhaustive`` is set, higher degrees are not built once a
    degree qualifies (the selection only needs the smallest one).
    """
    if config.k_max < 1:
        raise ValueError("k_max must be >= 1")
    X, y = dataset.inputs, dataset.labels
    n, d = X.shape
    if n < sym_dim(d, config.k_max):
        log.warning("n=%d is below B(d, K_max)=%d", n, sym_dim(d, config.k_max))
    reports: dict[int, SpectralReport] = {}
    chosen = None
    for k in range(1, config.k_max + 1):
        D = sym_dim(d, k)
        if 2 * D * D * 8 > config.budget_bytes:
            log.warning("skipping degree %d: D=%d moment matrix exceeds budget", k, D)
            break
        M = _moment_for_degree(X, y, k, config.block_size)
        reports[k] = eigendecompose(
            M, max(1, D // 10), edge_c=config.edge_c, edge_method=config.edge_method
        )
        if chosen is None:
            try:
                chosen = select_degree({k: reports[k]}, config.degree_ratio)
            except NoStructure:
                pass
        if chosen is not None and not config.exhaustive:
            break
    if chosen is None:
        raise Stage1Failed("no degree shows low-rank structure", reports)
    rep = reports[chosen]
    d1_hat = rep.selected_rank
    return rep.top_vectors[:, :d1_hat].T.copy(), chosen, d1_hat, reports


def transform_stage1(A1_hat: np.ndarray, X: np.ndarray, k: int, block_size: int = 4096) -> np.ndarray:
    """Latent estimates ``A1_hat @ F[H_k(x)]`` for each row (or single vector) of X."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    out = np.empty((X.shape[0], A1_hat.shape[0]))
    for start in range(0, X.shape[0], block_size):
        out[start : start + block_size] = hermite_features(X[start : start + block_size], k) @ A1_hat.T
    return out[0] if single else out


def fit_stage2(latents: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Second-layer estimate: the whole moment matrix of the latents."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    return accumulate(latents, labels, source=STAGE2_SOURCE).data


def transform_stage2(A2_hat: np.ndarray, h1: np.ndarray) -> np.ndarray | float:
    h1 = np.asarray(h1, dtype=np.float64)
    if h1.ndim == 1:
        return float((h1 @ A2_hat @ h1 - np.trace(A2_hat)) / math.sqrt(2.0))
    return (np.einsum("ni,ij,nj->n", h1, A2_hat, h1) - np.trace(A2_hat)) / math.sqrt(2.0)


def _ridge(G: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    return np.linalg.solve(G + lam * np.eye(G.shape[0]), b)


def fit_readout(
    s: np.ndarray,
    y: np.ndarray,
    lambdas: Sequence[float] = LAMBDA_GRID,
    degree: int = READOUT_DEGREE,
    folds: int = 5,
) -> PolyReadout:
    """Degree-``degree`` polynomial ridge with ``lambda`` chosen by k-fold CV.

    Objective is ``mean((y - p(z))^2) + lam * |a|^2`` on centred monomials
    ``z..z^degree`` (intercept unpenalised).  Ties go to the smallest lambda.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = s.size
    center, scale = float(s.mean()), float(s.std())
    if not scale > 1e-12 * max(1.0, abs(center)):
        coef = np.zeros(degree + 1)
        coef[0] = y.mean()
        return PolyReadout(center, 1.0, coef, float(min(lambdas)), degree)
    z = (s - center) / scale
    P = np.vander(z, degree + 1, increasing=True)[:, 1:]

    def solve(rows: np.ndarray, lam: float) -> np.ndarray:
        Pr, yr = P[rows], y[rows]
        mu, ym = Pr.mean(axis=0), yr.mean()
        Pc = Pr - mu
        a = _ridge(Pc.T @ Pc / rows.size, Pc.T @ (yr - ym) / rows.size, lam)
        return np.concatenate([[ym - mu @ a], a])

    lam_sorted = sorted(float(l) for l in lambdas)
    if len(lam_sorted) == 1 or n < folds:
        best = lam_sorted[0]
    else:
        bounds = np.linspace(0, n, folds + 1).astype(int)
        scores = []
        for lam in lam_sorted:
            err = 0.0
            for f in range(folds):
                test = np.arange(bounds[f], bounds[f + 1])
                train = np.concatenate([np.arange(0, bounds[f]), np.arange(bounds[f + 1], n)])
                c = solve(train, lam)
                err += np.sum((y[test] - c[0] - P[test] @ c[1:]) ** 2)
            scores.append(err / n)
        scores = np.asarray(scores)
        best = lam_sorted[int(np.flatnonzero(scores <= scores.min())[0])]
    coef = solve(np.arange(n), best)
    return PolyReadout(center, scale, coef, best, degree)


def fit(dataset: Dataset, config: FitConfig = FitConfig()) -> tuple[HierModel, dict[int, SpectralReport]]:
    """Full hierarchical fit; raises :class:`Stage1Failed` if nothing is found."""
    A1_hat, k_hat, _, reports = fit_stage1(dataset, config)
    h1_hat = transform_stage1(A1_hat, dataset.inputs, k_hat, config.block_size)
    A2_hat = fit_stage2(h1_hat, dataset.labels)
    h2_hat = transform_stage2(A2_hat, h1_hat)
    readout = fit_readout(h2_hat, dataset.labels, config.lambdas, config.readout_degree, config.folds)
    model = HierModel(k_hat, A1_hat, A2_hat, readout, dataset.n, dataset.seed, config.digest())
    return model, reports


def predict(model: HierModel, X: np.ndarray) -> np.ndarray:
    h1 = transform_stage1(model.A1_hat, X, model.k_hat)
    return model.readout(transform_stage2(model.A2_hat, h1))


def subspace_overlap(true_rows: np.ndarray, est_rows: np.ndarray) -> float:
    """``|Q_true Q_est'|_F / sqrt(max(r_true, r_est))`` after orthonormalising rows.

    Equals 1 exactly when the two row spaces coincide.
    """
    if true_rows.shape[0] == 0 or est_rows.shape[0] == 0:
        return 0.0
    qt = np.linalg.qr(true_rows.T)[0]
    qe = np.linalg.qr(est_rows.T)[0]
    r = max(qt.shape[1], qe.shape[1])
    return float(np.linalg.norm(qt.T @ qe) / math.sqrt(r))


def evaluate(
    model: HierModel | None, target: CompositionalTarget, test: Dataset, fallback_mean: float = 0.0
) -> Metrics:
    """Normalised test MSE and overlaps.

    ``model=None`` stands for a failed fit and predicts ``fallback_mean``.
    """
    y = test.labels
    var = float(np.var(y))
    if model is None:
        mse = float(np.mean((y - fallback_mean) ** 2))
        overlaps = (0.0, 0.0) if test.has_latents else (None, None)
        return Metrics(mse / var, *overlaps, 0, 0)
    h1_hat = transform_stage1(model.A1_hat, test.inputs, model.k_hat)
    pred = model.readout(transform_stage2(model.A2_hat, h1_hat))
    mse = float(np.mean((pred - y) ** 2))
    if not test.has_latents:
        return Metrics(mse / var, None, None, model.d1_hat, model.k_hat)
    if model.k_hat == target.k:
        q_a = subspace_overlap(target.first_layer_flat, model.A1_hat)
    else:
        q_a = 0.0  # different Hermite chaos, orthogonal spaces
    q_h = subspace_overlap(test.h1.T, h1_hat.T)
    return Metrics(mse / var, q_a, q_h, model.d1_hat, model.k_hat)


# -- shallow baseline ------------------------------------------------------


def _poly_features(X: np.ndarray, kappa: int) -> np.ndarray:
    return np.concatenate([hermite_features(X, k) for k in range(1, kappa + 1)], axis=1)


def _min_fitting_d(kappa: int, n: int, budget_bytes: int) -> int:
    d = 1
    while True:
        p = sum(sym_dim(d + 1, k) for k in range(1, kappa + 1))
        if 8 * min(n, p) ** 2 + 8 * n * min(p, 4096) > budget_bytes:
            return d
        d += 1


def shallow_baseline(
    train: Dataset,
    kappa: int,
    test: Dataset,
    lambdas: Sequence[float] = LAMBDA_GRID,
    folds: int = 5,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
    block_size: int = 2048,
) -> float:
    """Normalised test MSE of ridge on all Hermite features of degree 1..kappa.

    Uses the primal normal equations (accumulated in row blocks) when the
    feature count is below n, the kernel form otherwise.  Lambda by k-fold CV
    with the same objective and tie rule as :func:`fit_readout`.
    """
    X, y = train.inputs, train.labels
    n, d = X.shape
    p = sum(sym_dim(d, k) for k in range(1, kappa + 1))
    need = 8 * min(n, p) ** 2 + 8 * n * min(p, 4096)
    if need > budget_bytes:
        raise BudgetExceeded(
            f"degree-{kappa} baseline at d={d}, n={n} needs ~{need} bytes; "
            f"largest d that fits is {_min_fitting_d(kappa, n, budget_bytes)}"
        )
    lam_sorted = sorted(float(l) for l in lambdas)
    bounds = np.linspace(0, n, folds + 1).astype(int)
    if p <= n:
        coef_fn = _primal_cv(X, y, kappa, lam_sorted, bounds, block_size)
    else:
        coef_fn = _dual_cv(X, y, kappa, lam_sorted, bounds)
    pred = coef_fn(test.inputs)
    return float(np.mean((pred - test.labels) ** 2) / np.var(test.labels))


def _primal_cv(X, y, kappa, lams, bounds, block_size):
    n = X.shape[0]
    folds = len(bounds) - 1
    # per-fold sufficient statistics: Phi'Phi, Phi'y, sum Phi, sum y, count
    stats = []
    for f in range(folds):
        G = s = None
        cnt = 0
        b = None
        for start in range(bounds[f], bounds[f + 1], block_size):
            stop = min(bounds[f + 1], start + block_size)
            P = _poly_features(X[start:stop], kappa)
            if G is None:
                G = np.zeros((P.shape[1], P.shape[1]))
                b = np.zeros(P.shape[1])
                s = np.zeros(P.shape[1])
            G += P.T @ P
            b += P.T @ y[start:stop]
            s += P.sum(axis=0)
            cnt += stop - start
        stats.append((G, b, s, float(y[bounds[f] : bounds[f + 1]].sum()), cnt))

    def solve(use: list[int], lam: float):
        G = sum(stats[f][0] for f in use)
        b = sum(stats[f][1] for f in use)
        s = sum(stats[f][2] for f in use)
        sy = sum(stats[f][3] for f in use)
        m = sum(stats[f][4] for f in use)
        mu, ym = s / m, sy / m
        Gc = G / m - np.outer(mu, mu)
        bc = b / m - mu * ym
        a = _ridge(Gc, bc, lam)
        return ym - mu @ a, a

    def predictor(intercept, a):
        def f(Xq):
            out = np.empty(Xq.shape[0])
            for start in range(0, Xq.shape[0], block_size):
                out[start : start + block_size] = intercept + _poly_features(Xq[start : start + block_size], kappa) @ a
            return out
        return f

    if len(lams) > 1 and folds > 1:
        scores = []
        for lam in lams:
            err = 0.0
            for f in range(folds):
                c0, a = solve([g for g in range(folds) if g != f], lam)
                rows = slice(bounds[f], bounds[f + 1])
                err += np.sum((predictor(c0, a)(X[rows]) - y[rows]) ** 2)
            scores.append(err / n)
        scores = np.asarray(scores)
        best = lams[int(np.flatnonzero(scores <= scores.min())[0])]
    else:
        best = lams[0]
    return predictor(*solve(list(range(folds)), best))


def _dual_cv(X, y, kappa, lams, bounds):
    n = X.shape[0]
    P = _poly_features(X, kappa)
    folds = len(bounds) - 1

    def solve(rows: np.ndarray, lam: float):
        Pr = P[rows]
        mu, ym = Pr.mean(axis=0), y[rows].mean()
        Pc = Pr - mu
        K = Pc @ Pc.T
        # mean loss + lam |a|^2  <=>  (K + m lam I) alpha = y - ym
        alpha = np.linalg.solve(K + rows.size * lam * np.eye(rows.size), y[rows] - ym)
        a = Pc.T @ alpha
        return ym - mu @ a, a

    if len(lams) > 1 and folds > 1:
        scores = []
        for lam in lams:
            err = 0.0
            for f in range(folds):
                test = np.arange(bounds[f], bounds[f + 1])
                train = np.setdiff1d(np.arange(n), test)
                c0, a = solve(train, lam)
                err += np.sum((c0 + P[test] @ a - y[test]) ** 2)
            scores.append(err / n)
        scores = np.asarray(scores)
        best = lams[int(np.flatnonzero(scores <= scores.min())[0])]
    else:
        best = lams[0]
    c0, a = solve(np.arange(n), best)
    del P
    return lambda Xq: c0 + _poly_features(Xq, kappa) @ a


# -- persistence -----------------------------------------------------------


def _input_dim(D: int, k: int) -> int:
    d = 1
    while sym_dim(d, k) < D:
        d += 1
    if sym_dim(d, k) != D:
        raise ValueError(f"{D} is not B(d, {k}) for any d")
    return d


def save_model(model: HierModel, directory: str | Path) -> None:
    """Write ``a1_hat_###.hspt`` (one packed tensor per recovered row),
    ``a2_hat.hspm`` (packed symmetric matrix) and ``meta.json``.

    The metadata holds d, k_hat, d1_hat, readout coefficients, lambda and
    the config hash.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    d = _input_dim(model.A1_hat.shape[1], model.k_hat)
    for old in out.glob("a1_hat_*.hspt"):
        old.unlink()
    for i, row in enumerate(model.A1_hat):
        with open(out / f"a1_hat_{i:03d}.hspt", "wb") as fh:
            dump_tensor(SymTensor.from_flat(row, d, model.k_hat), fh)
    with open(out / "a2_hat.hspm", "wb") as fh:
        dump_moment(MomentMatrix(model.A2_hat, model.n, STAGE2_SOURCE), fh)
    r = model.readout
    meta = {
        "d": d,
        "k_hat": model.k_hat,
        "d1_hat": model.d1_hat,
        "n": model.n,
        "seed": model.seed,
        "config_hash": model.config_hash,
        "readout": {"center": r.center, "scale": r.scale, "coef": [float(c) for c in r.coef],
                    "lambda": r.lam, "degree": r.degree},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_model(directory: str | Path) -> HierModel:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    rows = []
    for i in range(meta["d1_hat"]):
        with open(src / f"a1_hat_{i:03d}.hspt", "rb") as fh:
            rows.append(load_tensor(fh).flatten().values)
    A1 = np.stack(rows)
    with open(src / "a2_hat.hspm", "rb") as fh:
        A2 = load_moment(fh).data
    r = meta["readout"]
    readout = PolyReadout(r["center"], r["scale"], np.asarray(r["coef"]), r["lambda"], r["degree"])
    return HierModel(meta["k_hat"], A1, A2, readout, meta["n"], meta["seed"], meta["config_hash"])
