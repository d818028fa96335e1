"""Packed symmetric tensors and orthonormal Hermite feature maps.

A symmetric order-k tensor over R^d is stored by its values on the canonical
multi-indices, i.e. the non-decreasing k-tuples ``i_1 <= ... <= i_k`` listed in
lexicographic order (0-based internally).  There are ``B(d, k) = C(d+k-1, k)``
of them.

The flattening ``F[T]`` multiplies each canonical entry by ``sqrt(mult(m))`` so
that Euclidean inner products of flattened vectors equal full-space Frobenius
inner products.  ``hermite_features`` returns ``F[H_k(x)]`` for the sqrt(k!)
normalised Hermite tensor, which is the product basis
``prod_i He_{c_i}(x_i) / sqrt(c_i!)``.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Iterator, Sequence

import numpy as np

__all__ = [
    "sym_dim",
    "multiplicity",
    "index_rank",
    "canonical_indices",
    "multiplicities",
    "SymTensor",
    "FlatVector",
    "hermite_table",
    "hermite_features",
    "hermite_flat",
    "iter_hermite_blocks",
    "flatten",
    "contract",
    "dump_tensor",
    "load_tensor",
]

_INT64_MAX = np.iinfo(np.int64).max
TENSOR_MAGIC = b"HSPT"
TENSOR_VERSION = 1


def sym_dim(d: int, k: int) -> int:
    """Number of distinct entries of a symmetric order-k tensor over R^d."""
    if d < 1 or k < 1:
        raise ValueError(f"sym_dim needs d >= 1 and k >= 1, got d={d}, k={k}")
    value = math.comb(d + k - 1, k)
    if value > _INT64_MAX:
        raise OverflowError(f"B({d}, {k}) = {value} does not fit in int64")
    return value


def multiplicity(m: Sequence[int]) -> int:
    """Number of distinct permutations of the multi-index ``m``."""
    counts = np.unique(np.asarray(m), return_counts=True)[1]
    out = math.factorial(len(m))
    for c in counts:
        out //= math.factorial(int(c))
    return out


def index_rank(m: Sequence[int], d: int) -> int:
    """Lexicographic position of a canonical (0-based) multi-index."""
    k = len(m)
    if any(b < a for a, b in zip(m, m[1:])):
        raise ValueError(f"multi-index {tuple(m)} is not non-decreasing")
    if m and (m[0] < 0 or m[-1] >= d):
        raise ValueError(f"multi-index {tuple(m)} out of range for d={d}")
    rank = 0
    lo = 0
    for t, v in enumerate(m):
        rest = k - t - 1
        for u in range(lo, v):
            # tails of length `rest` drawn from values [u, d)
            rank += math.comb(d - u + rest - 1, rest)
        lo = v
    return rank


@lru_cache(maxsize=32)
def canonical_indices(d: int, k: int) -> np.ndarray:
    """All canonical multi-indices as a read-only ``(B(d,k), k)`` int array."""
    D = sym_dim(d, k)
    out = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations_with_replacement(range(d), k)),
        dtype=np.int64,
        count=D * k,
    ).reshape(D, k)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def _factor_layout(d: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per canonical index, k (variable, power) pairs; padding uses power 0."""
    idx = canonical_indices(d, k)
    D = idx.shape[0]
    var = np.zeros((D, k), dtype=np.int64)
    power = np.zeros((D, k), dtype=np.int64)
    for row in range(D):
        slot = 0
        for v, grp in itertools.groupby(idx[row]):
            var[row, slot] = v
            power[row, slot] = len(list(grp))
            slot += 1
    flat = var * (k + 1) + power
    flat.setflags(write=False)
    return flat, power


@lru_cache(maxsize=32)
def multiplicities(d: int, k: int) -> np.ndarray:
    """Multiplicity of every canonical multi-index, as float64."""
    _, power = _factor_layout(d, k)
    fact = np.array([math.factorial(j) for j in range(k + 1)], dtype=np.float64)
    out = np.rint(math.factorial(k) / np.prod(fact[power], axis=1))
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Symmetric order-k tensor over R^d in packed canonical storage."""

    d: int
    k: int
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64).reshape(-1)
        if entries.shape[0] != sym_dim(self.d, self.k):
            raise ValueError(
                f"expected {sym_dim(self.d, self.k)} entries for (d={self.d}, k={self.k}), "
                f"got {entries.shape[0]}"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def zeros(cls, d: int, k: int) -> "SymTensor":
        return cls(d, k, np.zeros(sym_dim(d, k)))

    @classmethod
    def from_flat(cls, values: np.ndarray, d: int, k: int) -> "SymTensor":
        return cls(d, k, np.asarray(values, dtype=np.float64) / np.sqrt(multiplicities(d, k)))

    @classmethod
    def from_dense(cls, arr: np.ndarray, symmetrize: bool = True) -> "SymTensor":
        """Pack a dense array of shape ``(d,)*k``.

        With ``symmetrize`` the array is first averaged over all axis
        permutations; otherwise the canonical entries are read as-is.
        """
        arr = np.asarray(arr, dtype=np.float64)
        k = arr.ndim
        d = arr.shape[0]
        idx = canonical_indices(d, k)
        if symmetrize:
            return cls(d, k, _symmetrized_at(arr, idx))
        return cls(d, k, arr[tuple(idx.T)])

    def to_dense(self) -> np.ndarray:
        out = np.empty((self.d,) * self.k)
        idx = canonical_indices(self.d, self.k)
        for perm in set(itertools.permutations(range(self.k))):
            out[tuple(idx[:, list(perm)].T)] = self.entries
        return out

    def flatten(self) -> "FlatVector":
        return flatten(self)

    def frobenius_sq(self) -> float:
        return float(np.dot(multiplicities(self.d, self.k), self.entries**2))

    def norm(self) -> float:
        return math.sqrt(self.frobenius_sq())

    def inner(self, other: "SymTensor") -> float:
        _check_same_space(self, other)
        return float(np.dot(multiplicities(self.d, self.k) * self.entries, other.entries))

    def __getitem__(self, m: Sequence[int]) -> float:
        return float(self.entries[index_rank(sorted(m), self.d)])


@dataclass(frozen=True, eq=False)
class FlatVector:
    """Multiplicity-weighted flattening of an order-k symmetric tensor."""

    d: int
    k: int
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def dot(self, other: "FlatVector") -> float:
        _check_same_space(self, other)
        return float(np.dot(self.values, other.values))

    def to_tensor(self) -> SymTensor:
        return SymTensor.from_flat(self.values, self.d, self.k)


def _check_same_space(a, b) -> None:
    if (a.d, a.k) != (b.d, b.k):
        raise ValueError(f"(d, k) mismatch: {(a.d, a.k)} vs {(b.d, b.k)}")


def flatten(T: SymTensor) -> FlatVector:
    return FlatVector(T.d, T.k, T.entries * np.sqrt(multiplicities(T.d, T.k)))


def hermite_table(X: np.ndarray, k: int) -> np.ndarray:
    """Normalised probabilists' Hermite values ``He_j(x)/sqrt(j!)``, j = 0..k.

    Returns an array of shape ``X.shape + (k+1,)``.
    """
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape + (k + 1,))
    out[..., 0] = 1.0
    if k >= 1:
        out[..., 1] = X
    for j in range(1, k):
        out[..., j + 1] = (X * out[..., j] - math.sqrt(j) * out[..., j - 1]) / math.sqrt(j + 1)
    return out


def hermite_features(X: np.ndarray, k: int) -> np.ndarray:
    """Flattened Hermite features ``F[H_k(x)]`` for each row of ``X``.

    Parameters
    ----------
    X : array of shape (n, d)
    k : tensor order, k >= 1

    Returns
    -------
    array of shape (n, B(d, k))
    """
    if k < 1:
        raise ValueError("Hermite order k must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if k == 1:
        return X.copy()
    table = hermite_table(X, k).reshape(n, d * (k + 1))
    layout, _ = _factor_layout(d, k)
    out = table[:, layout[:, 0]]
    for t in range(1, k):
        out *= table[:, layout[:, t]]
    return out


def hermite_flat(x: np.ndarray, k: int) -> FlatVector:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("hermite_flat needs a finite input vector")
    return FlatVector(x.shape[0], k, hermite_features(x[None, :], k)[0])


def iter_hermite_blocks(
    X: np.ndarray, k: int, block_size: int = 4096
) -> Iterator[np.ndarray]:
    """Yield ``hermite_features`` of consecutive row blocks of ``X``."""
    for start in range(0, X.shape[0], block_size):
        yield hermite_features(X[start : start + block_size], k)


def _symmetrized_at(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Average of ``arr`` over all axis permutations, read at ``idx`` rows."""
    k = idx.shape[1]
    if k == 0:
        return np.asarray(arr, dtype=np.float64).reshape(1)
    perms = list(itertools.permutations(range(k)))
    acc = np.zeros(idx.shape[0])
    for perm in perms:
        acc += arr[tuple(idx[:, list(perm)].T)]
    return acc / len(perms)


def contract(S: SymTensor, T: SymTensor, r: int) -> SymTensor | float:
    """Order-r contraction of S and T, symmetrised over the free indices.

    Returns a float when ``r == S.k == T.k`` (the Frobenius product).
    """
    if S.d != T.d:
        raise ValueError(f"dimension mismatch: {S.d} vs {T.d}")
    if not 1 <= r <= min(S.k, T.k):
        raise ValueError(f"contraction order r={r} outside [1, {min(S.k, T.k)}]")
    if r == S.k == T.k:
        return S.inner(T)
    d = S.d
    a = S.to_dense().reshape(d ** (S.k - r), d**r)
    b = T.to_dense().reshape(d ** (T.k - r), d**r)
    free = S.k + T.k - 2 * r
    dense = (a @ b.T).reshape((d,) * free)
    return SymTensor(d, free, _symmetrized_at(dense, canonical_indices(d, free)))


def dump_tensor(T: SymTensor, fh: BinaryIO) -> None:
    """Write ``T`` as: b"HSPT", u16 version, u32 d, u32 k, f64[B(d,k)] (all LE)."""
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<HII", TENSOR_VERSION, T.d, T.k))
    fh.write(np.ascontiguousarray(T.entries, dtype="<f8").tobytes())


def load_tensor(fh: BinaryIO) -> SymTensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, d, k = struct.unpack("<HII", fh.read(10))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor dump version {version}")
    D = sym_dim(d, k)
    raw = fh.read(8 * D)
    if len(raw) != 8 * D:
        raise ValueError("truncated tensor dump")
    return SymTensor(d, k, np.frombuffer(raw, dtype="<f8").astype(np.float64))
