"""Monte Carlo checks of the Gaussian-equivalence facts the estimator relies on.

* ``clt_distance``: how Gaussian a single projection ``<T, H_k(x)>`` looks.
* ``joint_clt_deviation``: covariance of the first-layer latents vs their Gram.
* ``contraction_scaling``: decay of ``E |A (x)_s B|_F^2`` with ``d``.
* ``norm_tail_check``: concentration of ``|F[H_k(x)]|^2`` around ``B(d, k)``.
* ``signal_formula_check``: the label-weighted second-Hermite moment of the
  true latents against ``nu1 * A2``.

Every check can be turned into a :class:`CheckRow` for the CSV battery.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.stats

from .moment_spectral import accumulate
from .target_model import (
    CompositionalTarget,
    derive_seed,
    generate,
    nu1,
    random_sym_tensor,
)
from .tensor_core import SymTensor, hermite_features, sym_dim

__all__ = [
    "ScalingFit",
    "CheckRow",
    "project",
    "clt_distance",
    "wasserstein_to_normal",
    "joint_clt_deviation",
    "contraction_sq_norm",
    "contraction_scaling",
    "norm_tail_check",
    "signal_formula_check",
    "write_rows",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("check_name", "parameters", "statistic", "reference_value", "pass")
DENSE_PROJECTION_LIMIT = 2_000_000  # max d^k for the dense path
BLOCK = 4096


@dataclass(frozen=True, eq=False)
class ScalingFit:
    """Log-log fit of mean contraction norms against ``d``."""

    x_values: np.ndarray
    y_values: np.ndarray
    slope: float
    slope_ci: tuple[float, float]
    samples: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x_values, dtype=np.float64)
        if x.size < 3 or np.any(np.diff(x) <= 0):
            raise ValueError("need >= 3 strictly increasing dimensions")
        if not math.isfinite(self.slope):
            raise ValueError("slope is not finite")


@dataclass(frozen=True)
class CheckRow:
    check_name: str
    parameters: str
    statistic: float
    reference_value: float
    passed: bool

    def as_list(self) -> list:
        return [self.check_name, self.parameters, repr(float(self.statistic)),
                repr(float(self.reference_value)), "pass" if self.passed else "fail"]


def write_rows(rows: Iterable[CheckRow], path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row.as_list())


def _params(**kw) -> str:
    return ";".join(f"{k}={v}" for k, v in kw.items())


# -- projections -----------------------------------------------------------


def project(T: SymTensor, X: np.ndarray) -> np.ndarray:
    """``<T, H_k(x)>`` for every row of ``X``.

    Uses the dense identities for k <= 3 (e.g. ``(x'Tx - tr T)/sqrt(2)`` at
    k = 2) when ``d^k`` is small enough, otherwise flattened features.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d, k = T.d, T.k
    if X.shape[1] != d:
        raise ValueError(f"inputs have {X.shape[1]} columns, tensor has d={d}")
    if k <= 3 and d**k <= DENSE_PROJECTION_LIMIT:
        A = T.to_dense()
        if k == 1:
            return X @ A
        if k == 2:
            return (np.einsum("ni,ij,nj->n", X, A, X) - np.trace(A)) / math.sqrt(2.0)
        out = np.empty(X.shape[0])
        trace_vec = np.einsum("iik->k", A)
        flat = A.reshape(d, d * d)
        for s in range(0, X.shape[0], BLOCK):
            xb = X[s : s + BLOCK]
            xx = np.einsum("ni,nj->nij", xb, xb).reshape(xb.shape[0], d * d)
            cubic = np.einsum("nk,nk->n", xx @ flat.T, xb)
            out[s : s + BLOCK] = (cubic - 3.0 * xb @ trace_vec) / math.sqrt(6.0)
        return out
    v = T.flatten().values
    return np.concatenate(
        [hermite_features(X[s : s + BLOCK], k) @ v for s in range(0, X.shape[0], BLOCK)]
    )


def _gaussian_rows(n: int, d: int, seed: int, *keys: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, *keys)).standard_normal((n, d))


def clt_distance(T: SymTensor, k: int | None = None, n_samples: int = 100_000, seed: int = 0) -> float:
    """Kolmogorov-Smirnov distance of ``<T, H_k(x)>/|T|_F`` to N(0, 1)."""
    k = T.k if k is None else k
    if k != T.k:
        raise ValueError(f"tensor order {T.k} does not match k={k}")
    norm = T.norm()
    if not norm > 0:
        raise ValueError("clt_distance needs a non-zero tensor")
    z = project(T, _gaussian_rows(n_samples, T.d, seed, 0xC1)) / norm
    return float(scipy.stats.kstest(z, "norm").statistic)


def wasserstein_to_normal(z: np.ndarray) -> float:
    """Sorted-sample L1 distance to the standard normal quantiles."""
    z = np.sort(np.asarray(z, dtype=np.float64))
    q = scipy.stats.norm.ppf((np.arange(z.size) + 0.5) / z.size)
    return float(np.mean(np.abs(z - q)))


def _stack(tensors) -> tuple[list[SymTensor], int]:
    if isinstance(tensors, CompositionalTarget):
        return list(tensors.first_layer), tensors.d
    tensors = list(tensors)
    if not tensors:
        raise ValueError("empty tensor stack")
    return tensors, tensors[0].d


def joint_clt_deviation(tensors, n_samples: int = 100_000, seed: int = 0, trials: int = 1) -> float:
    """``|Cov_emp(h1) - Gram(F[A1])|_2`` averaged over ``trials`` sample sets.

    ``tensors`` is a target or a sequence of first-layer tensors.  The
    reference scale is ``d1 / sqrt(d)`` (see :func:`joint_reference`).
    """
    stack, d = _stack(tensors)
    flat = np.stack([t.flatten().values for t in stack])
    gram = flat @ flat.T
    devs = []
    for t in range(trials):
        X = _gaussian_rows(n_samples, d, seed, 0xC2, t)
        H = np.column_stack([project(T, X) for T in stack])
        cov = H.T @ H / n_samples
        devs.append(float(np.linalg.norm(cov - gram, 2)))
    return float(np.mean(devs))


def joint_reference(d1: int, d: int) -> float:
    return d1 / math.sqrt(d)


# -- contractions ----------------------------------------------------------


def contraction_sq_norm(A: np.ndarray, B: np.ndarray, s: int) -> float:
    """``|Sym(A (x)_s B)|_F^2`` for dense symmetric arrays ``A`` and ``B``.

    Uses ``|Sym M|^2 = mean_pi <M, pi M>`` instead of materialising the
    symmetrised tensor.  Agrees with :func:`hierspec.tensor_core.contract`.
    """
    d = A.shape[0]
    ka, kb = A.ndim, B.ndim
    M = A.reshape(d ** (ka - s), d**s) @ B.reshape(d ** (kb - s), d**s).T
    f = ka + kb - 2 * s
    if f == 0:
        return float(M.reshape(()) ** 2)
    M = M.reshape((d,) * f)
    perms = list(itertools.permutations(range(f)))
    acc = math.fsum(float(np.vdot(M, M.transpose(p))) for p in perms)
    return acc / len(perms)


def _loglog(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def contraction_scaling(
    k: int,
    s: int,
    d_list: Sequence[int],
    trials: int = 50,
    seed: int = 0,
    *,
    self_contraction: bool | None = None,
    n_boot: int = 2000,
) -> ScalingFit:
    """Mean ``|A (x)_s B|_F^2`` over random tensors per ``d`` with a log-log fit.

    ``A`` and ``B`` are independent draws, except for ``s == k`` where the
    default is the self-contraction ``|A (x)_k A|^2 = |A|_F^4``.  The slope
    interval is a 90% percentile bootstrap over trials.
    """
    if not 1 <= s <= k:
        raise ValueError(f"need 1 <= s <= k, got s={s}, k={k}")
    if len(d_list) < 3:
        raise ValueError("need at least three dimensions")
    if trials < 50:
        raise ValueError("need at least 50 trials per dimension")
    if self_contraction is None:
        self_contraction = s == k
    d_arr = np.asarray(sorted(d_list), dtype=np.float64)
    samples = []
    for d in d_arr.astype(int):
        vals = np.empty(trials)
        for t in range(trials):
            rng = np.random.default_rng(derive_seed(seed, 0xC3, k, s, int(d), t))
            A = random_sym_tensor(int(d), k, rng).to_dense()
            B = A if self_contraction else random_sym_tensor(int(d), k, rng).to_dense()
            vals[t] = contraction_sq_norm(A, B, s)
        samples.append(vals)
    means = np.array([v.mean() for v in samples])
    slope = _loglog(d_arr, means)
    boot_rng = np.random.default_rng(derive_seed(seed, 0xB0))
    boots = np.empty(n_boot)
    for b in range(n_boot):
        m = [v[boot_rng.integers(0, v.size, v.size)].mean() for v in samples]
        boots[b] = _loglog(d_arr, np.asarray(m))
    lo, hi = np.quantile(boots, [0.05, 0.95])
    return ScalingFit(d_arr, means, slope, (float(lo), float(hi)), tuple(samples))


# -- norms and the signal --------------------------------------------------


def norm_tail_check(d: int, k: int, n_samples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Mean and max of ``|F[H_k(x)]|^2 / B(d, k)`` over Gaussian draws."""
    if n_samples < 1000:
        raise ValueError("norm_tail_check needs at least 1000 samples")
    X = _gaussian_rows(n_samples, d, seed, 0xC4)
    sq = np.concatenate(
        [np.einsum("ij,ij->i", f, f) for f in
         (hermite_features(X[s : s + BLOCK], k) for s in range(0, n_samples, BLOCK))]
    )
    ratio = sq / sym_dim(d, k)
    return float(ratio.mean()), float(ratio.max())


def signal_formula_check(
    target: CompositionalTarget, n_samples: int, seed: int = 0, *, latents: str = "true"
) -> float:
    """``sqrt(d1) |(1/n) sum y H_2(h1) - nu1 A2|_2``.

    ``latents="true"`` uses the first-layer latents of fresh inputs;
    ``"gaussian"`` replaces them by i.i.d. N(0, I_d1) vectors, which removes
    the finite-d Gram and non-Gaussianity bias and leaves pure sampling error.
    """
    if latents == "true":
        ds = generate(target, n_samples, seed, store_latents=True)
        h1, y = ds.h1, ds.labels
    elif latents == "gaussian":
        rng = np.random.default_rng(derive_seed(seed, 0xC5))
        h1 = rng.standard_normal((n_samples, target.d1))
        h2 = (np.einsum("ni,ij,nj->n", h1, target.second_layer, h1)
              - np.trace(target.second_layer)) / math.sqrt(2.0)
        y = target.link(h2)
    else:
        raise ValueError(f"unknown latents mode {latents!r}")
    C = accumulate(h1, y).data
    return float(math.sqrt(target.d1) * np.linalg.norm(C - nu1(target.link) * target.second_layer, 2))
