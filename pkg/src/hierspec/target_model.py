"""Compositional Hermite targets and labelled Gaussian datasets.

The generative model is::

    h1_i = <A1_i, H_k(x)>                 i = 1..d1
    h2   = <A2, H_2(h1)> = (h1' A2 h1 - tr A2) / sqrt(2)
    y    = g(h2)

with ``x ~ N(0, I_d)``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
import scipy.stats

from .tensor_core import (
    SymTensor,
    dump_tensor,
    hermite_features,
    load_tensor,
    multiplicities,
    sym_dim,
)

__all__ = [
    "DegenerateLink",
    "BudgetExceeded",
    "LinkFunction",
    "CompositionalTarget",
    "Dataset",
    "sample_target",
    "random_sym_tensor",
    "forward",
    "forward_batch",
    "nu1",
    "generate",
    "derive_seed",
    "save_target",
    "load_target",
    "save_dataset",
    "load_dataset",
]

ROW_CHUNK = 4096
DEFAULT_BUDGET_BYTES = 2 * 1024**3
_RELU_MEAN = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateLink(ValueError):
    """The link has (numerically) zero first Hermite coefficient."""


class BudgetExceeded(MemoryError):
    pass


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed from a root seed and integer keys."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class LinkFunction:
    """Outer non-linearity g.

    ``kind`` is one of ``"id"``, ``"tanh"``, ``"relu"`` (centred ReLU) or
    ``"poly"``; polynomials carry monomial coefficients ``c0, c1, ...``.
    """

    kind: str
    coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("id", "tanh", "relu", "poly"):
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.kind == "poly":
            if not self.coeffs:
                raise ValueError("polynomial link needs coefficients")
            object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
            nu1(self)  # raises DegenerateLink

    @classmethod
    def parse(cls, tag: str) -> "LinkFunction":
        """Parse ``id``, ``tanh``, ``relu`` or ``poly:c0,c1,...``."""
        tag = tag.strip()
        aliases = {"identity": "id", "centered-relu": "relu", "crelu": "relu"}
        tag = aliases.get(tag, tag)
        if tag.startswith("poly:"):
            return cls("poly", tuple(float(c) for c in tag[5:].split(",")))
        return cls(tag)

    @property
    def tag(self) -> str:
        if self.kind == "poly":
            return "poly:" + ",".join(repr(float(c)) for c in self.coeffs)
        return self.kind

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "id":
            return z.copy()
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0) - _RELU_MEAN
        return np.polynomial.polynomial.polyval(z, self.coeffs)


def nu1(link: LinkFunction) -> float:
    """First Hermite coefficient E[g(Z) Z] for Z ~ N(0, 1)."""
    if link.kind == "id":
        value = 1.0
    elif link.kind == "relu":
        value = 0.5
    elif link.kind == "poly":
        # E[Z^{j+1}] = j!! for even j+1
        value = 0.0
        for j, c in enumerate(link.coeffs):
            p = j + 1
            if p % 2 == 0:
                value += c * float(np.prod(np.arange(p - 1, 0, -2)))
    else:
        z, w = np.polynomial.hermite_e.hermegauss(200)
        value = float(np.sum(w * link(z) * z) / math.sqrt(2.0 * math.pi))
    if abs(value) < 1e-8:
        raise DegenerateLink(f"link {link.tag} has nu1 = {value:.3g}")
    return value


@dataclass(frozen=True, eq=False)
class CompositionalTarget:
    d: int
    k: int
    eps: float
    first_layer: tuple[SymTensor, ...]
    second_layer: np.ndarray
    link: LinkFunction
    seed: int = 0

    def __post_init__(self):
        a2 = np.array(self.second_layer, dtype=np.float64)
        if a2.shape != (self.d1, self.d1):
            raise ValueError(f"A2 must be {self.d1}x{self.d1}, got {a2.shape}")
        if not np.allclose(a2, a2.T, rtol=0, atol=1e-12):
            raise ValueError("A2 must be symmetric")
        a2.setflags(write=False)
        object.__setattr__(self, "second_layer", a2)
        flat = np.stack(
            [t.entries * np.sqrt(multiplicities(self.d, self.k)) for t in self.first_layer]
        )
        flat.setflags(write=False)
        object.__setattr__(self, "_flat", flat)

    @property
    def d1(self) -> int:
        return len(self.first_layer)

    @property
    def first_layer_flat(self) -> np.ndarray:
        """``(d1, B(d,k))`` stack of flattened first-layer tensors."""
        return self._flat


def random_sym_tensor(d: int, k: int, rng: np.random.Generator) -> SymTensor:
    """Independent N(0, d^-k) canonical entries, so that E|T|_F^2 = 1."""
    return SymTensor(d, k, rng.standard_normal(sym_dim(d, k)) * d ** (-k / 2))


def sample_target(
    d: int,
    k: int,
    eps: float,
    link: LinkFunction | str = "id",
    seed: int = 0,
    *,
    a2_law: str = "orthogonal",
    normalize_first: bool = False,
    normalize_second: bool = False,
) -> CompositionalTarget:
    """Draw a random compositional target.

    Canonical entries of each first-layer tensor are i.i.d. N(0, d^-k) and
    replicated over permutations.  ``a2_law`` picks the second layer:

    ``"orthogonal"``
        ``Q diag(s) Q' / sqrt(d1)`` with Haar ``Q`` and random signs ``s``;
        exactly unit Frobenius norm and operator norm ``1/sqrt(d1)``.
    ``"wigner"``
        symmetric Gaussian with off-diagonal variance 1/d1^2 and diagonal
        variance 2/d1^2.
    """
    if isinstance(link, str):
        link = LinkFunction.parse(link)
    if d < 2 or k < 1:
        raise ValueError(f"need d >= 2 and k >= 1, got d={d}, k={k}")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    nu1(link)
    d1 = max(1, int(round(d**eps)))
    D = sym_dim(d, k)
    if d1 > D:
        raise ValueError(f"d1 = {d1} exceeds B({d},{k}) = {D}")
    rng = np.random.default_rng(derive_seed(seed, 0x7A))
    tensors = []
    for _ in range(d1):
        t = random_sym_tensor(d, k, rng)
        if normalize_first:
            t = SymTensor(d, k, t.entries / t.norm())
        tensors.append(t)
    if a2_law == "wigner":
        g = rng.standard_normal((d1, d1)) / d1
        a2 = (g + g.T) / math.sqrt(2.0)
    elif a2_law == "orthogonal":
        q = scipy.stats.ortho_group.rvs(d1, random_state=rng) if d1 > 1 else np.ones((1, 1))
        signs = rng.choice([-1.0, 1.0], size=d1)
        a2 = (q * signs) @ q.T / math.sqrt(d1)
        a2 = (a2 + a2.T) / 2.0
    else:
        raise ValueError(f"unknown A2 law {a2_law!r}")
    if normalize_second:
        a2 /= np.linalg.norm(a2)
    return CompositionalTarget(d, k, float(eps), tuple(tensors), a2, link, int(seed))


def _second_layer(h1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    return (np.einsum("ni,ij,nj->n", h1, a2, h1) - np.trace(a2)) / math.sqrt(2.0)


def forward_batch(target: CompositionalTarget, X: np.ndarray):
    """Latents and labels for the rows of ``X``: returns ``(h1, h2, y)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != target.d:
        raise ValueError(f"inputs have {X.shape[1]} columns, target has d={target.d}")
    h1 = hermite_features(X, target.k) @ target.first_layer_flat.T
    h2 = _second_layer(h1, target.second_layer)
    return h1, h2, target.link(h2)


def forward(target: CompositionalTarget, x: np.ndarray):
    """Single-input version of :func:`forward_batch`: ``(h1, h2, y)``."""
    h1, h2, y = forward_batch(target, np.asarray(x, dtype=np.float64)[None, :])
    return h1[0], float(h2[0]), float(y[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    h1: np.ndarray | None = None
    h2: np.ndarray | None = None
    seed: int = 0
    k: int = 0

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_latents(self) -> bool:
        return self.h1 is not None

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        """Same inputs with replaced labels; latents are dropped."""
        return Dataset(self.inputs, np.asarray(labels, dtype=np.float64), None, None, self.seed, self.k)


def generate(
    target: CompositionalTarget,
    n: int,
    seed: int,
    *,
    store_latents: bool = True,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
) -> Dataset:
    """Sample ``n`` labelled rows with ``x ~ N(0, I_d)``.

    Rows are drawn in fixed chunks of ``ROW_CHUNK`` from per-chunk seeds, so
    the result does not depend on how the work is split.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    need = n * target.d * 8
    if need > budget_bytes:
        raise BudgetExceeded(
            f"dataset needs {need} bytes for inputs, budget is {budget_bytes}"
        )
    X = np.empty((n, target.d))
    h1 = np.empty((n, target.d1))
    h2 = np.empty(n)
    y = np.empty(n)
    for chunk, start in enumerate(range(0, n, ROW_CHUNK)):
        stop = min(n, start + ROW_CHUNK)
        rng = np.random.default_rng(derive_seed(seed, 0xDA, chunk))
        X[start:stop] = rng.standard_normal((stop - start, target.d))
        h1[start:stop], h2[start:stop], y[start:stop] = forward_batch(target, X[start:stop])
    if not store_latents:
        h1 = h2 = None
    return Dataset(X, y, h1, h2, int(seed), target.k)


# -- persistence -----------------------------------------------------------

DATASET_MAGIC = b"HSPD"
_FLAG_LATENTS = 1


def save_dataset(ds: Dataset, fh: BinaryIO) -> None:
    """Header b"HSPD", u32 n, d, d1, k, flags; then inputs, labels, latents (f64 LE)."""
    d1 = ds.h1.shape[1] if ds.has_latents else 0
    flags = _FLAG_LATENTS if ds.has_latents else 0
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<5I", ds.n, ds.d, d1, ds.k, flags))
    fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(ds.labels, dtype="<f8").tobytes())
    if ds.has_latents:
        fh.write(np.ascontiguousarray(ds.h1, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.h2, dtype="<f8").tobytes())


def _read_f64(fh: BinaryIO, count: int) -> np.ndarray:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated dataset file")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_dataset(fh: BinaryIO) -> Dataset:
    if fh.read(4) != DATASET_MAGIC:
        raise ValueError("not a dataset file")
    n, d, d1, k, flags = struct.unpack("<5I", fh.read(20))
    X = _read_f64(fh, n * d).reshape(n, d)
    y = _read_f64(fh, n)
    h1 = h2 = None
    if flags & _FLAG_LATENTS:
        h1 = _read_f64(fh, n * d1).reshape(n, d1)
        h2 = _read_f64(fh, n)
    return Dataset(X, y, h1, h2, 0, k)


def save_target(target: CompositionalTarget, directory: str | Path) -> None:
    """Write one ``a1_###.hspt`` per first-layer tensor next to ``a2.hspt`` and ``meta.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(target.first_layer):
        with open(out / f"a1_{i:03d}.hspt", "wb") as fh:
            dump_tensor(t, fh)
    with open(out / "a2.hspt", "wb") as fh:
        dump_tensor(SymTensor.from_dense(target.second_layer, symmetrize=False), fh)
    meta = {"link": target.link.tag, "eps": target.eps, "seed": target.seed,
            "d": target.d, "k": target.k, "d1": target.d1}
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_target(directory: str | Path) -> CompositionalTarget:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    tensors = []
    for i in range(meta["d1"]):
        with open(src / f"a1_{i:03d}.hspt", "rb") as fh:
            tensors.append(load_tensor(fh))
    with open(src / "a2.hspt", "rb") as fh:
        a2 = load_tensor(fh).to_dense()
    return CompositionalTarget(
        meta["d"], meta["k"], meta["eps"], tuple(tensors), a2,
        LinkFunction.parse(meta["link"]), meta["seed"],
    )
