"""Experiment configuration and resumable sweeps, plus figure output.

A sweep runs ``generate -> fit -> evaluate`` for every ``(d, alpha, seed)``
of an :class:`ExperimentConfig` and appends one CSV row per run to
``<out>/runs.csv``.  Rows are keyed by ``(config_hash, d, alpha, seed)``;
keys already present are skipped, so an interrupted sweep picks up where it
stopped.  ``config_hash`` covers only the settings that change a single run,
so extending ``alpha_grid`` or ``seeds`` reuses earlier rows.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .moment_spectral import (
    DEFAULT_DEGREE_RATIO,
    DEFAULT_EDGE_C,
    DEFAULT_EDGE_METHOD,
    write_spectrum_csv,
)
from .pipeline import (
    FitConfig,
    Stage1Failed,
    evaluate,
    fit,
)
from .target_model import (
    DEFAULT_BUDGET_BYTES,
    BudgetExceeded,
    LinkFunction,
    derive_seed,
    generate,
    sample_target,
)
from .tensor_core import sym_dim

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config_text",
    "run_one",
    "run_sweep",
    "read_runs",
    "aggregate",
    "write_aggregate",
    "alpha_threshold",
    "emit_figures",
    "RUN_COLUMNS",
    "AGG_COLUMNS",
]

RUN_COLUMNS = (
    "config_hash", "d", "alpha", "n", "eps", "link", "seed", "k_hat", "d1_hat",
    "n_spikes", "mse_norm", "overlap_A", "overlap_h", "wall_s", "status",
)
AGG_COLUMNS = (
    "config_hash", "d", "alpha", "n", "runs", "mse_median", "mse_mean", "mse_std",
    "overlap_A_mean", "overlap_A_std", "overlap_h_mean", "overlap_h_std", "n_spikes_mean",
)
RUNS_FILE = "runs.csv"
AGG_FILE = "aggregate.csv"
SPECTRA_DIR = "spectra"
TEST_SEED_KEY = 0x7E57


class ConfigError(ValueError):
    """Invalid experiment configuration or config file."""


@dataclass(frozen=True)
class ExperimentConfig:
    d_list: tuple[int, ...] = (60,)
    eps: float = 0.5
    k_true: int = 2
    link: str = "id"
    alpha_grid: tuple[float, ...] = (2.0, 2.25, 2.5, 2.75, 3.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_max: int = 2
    edge_method: str = DEFAULT_EDGE_METHOD
    edge_c: float = DEFAULT_EDGE_C
    degree_ratio: float = DEFAULT_DEGREE_RATIO
    a2_law: str = "orthogonal"
    n_test: int = 10_000
    budget_bytes: int = DEFAULT_BUDGET_BYTES
    out: str = "results"
    workers: int = 1
    save_spectra: bool = True

    def __post_init__(self):
        if not self.alpha_grid:
            raise ConfigError("alpha_grid is empty")
        if not self.seeds:
            raise ConfigError("seeds is empty")
        if not self.d_list:
            raise ConfigError("d_list is empty")
        for a in self.alpha_grid:
            if not a >= 1.0:
                raise ConfigError(f"alpha must be >= 1, got {a}")
        for d in self.d_list:
            if d < 2:
                raise ConfigError(f"d must be >= 2, got {d}")
            for a in self.alpha_grid:
                if round(d**a) < 10:
                    raise ConfigError(f"n = round({d}^{a}) < 10")
        if self.k_true < 1 or self.k_max < 1:
            raise ConfigError("k_true and k_max must be >= 1")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigError("eps must lie in [0, 1]")
        if self.n_test < 10:
            raise ConfigError("n_test must be >= 10")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            LinkFunction.parse(self.link)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def config_hash(self) -> str:
        """Digest of the settings that affect an individual run."""
        keys = ("eps", "k_true", "link", "k_max", "edge_method", "edge_c", "degree_ratio",
                "a2_law", "n_test", "budget_bytes")
        payload = {k: getattr(self, k) for k in keys}
        payload["link"] = LinkFunction.parse(self.link).tag
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def fit_config(self) -> FitConfig:
        return FitConfig(
            k_max=self.k_max,
            edge_method=self.edge_method,
            edge_c=self.edge_c,
            degree_ratio=self.degree_ratio,
            budget_bytes=self.budget_bytes,
        )

    def runs(self) -> list[tuple[int, float, int]]:
        return [(d, a, s) for d in self.d_list for a in self.alpha_grid for s in self.seeds]


# -- config files ----------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind.startswith("tuple[int"):
            return tuple(_int_list(raw))
        if kind.startswith("tuple[float"):
            return tuple(_float_list(raw))
        if kind == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _split(raw: str) -> list[str]:
    return [v for v in raw.replace(",", " ").split() if v]


def _int_list(raw: str) -> list[int]:
    """Like :func:`_float_list` for integers; ``a:b`` or ``a:b:step``, inclusive."""
    out = []
    for item in _split(raw):
        if ":" in item:
            parts = [int(v) for v in item.split(":")]
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] <= 0):
                raise ValueError(item)
            out.extend(range(parts[0], parts[1] + 1, parts[2] if len(parts) == 3 else 1))
        else:
            out.append(int(item))
    return out


def _float_list(raw: str) -> list[float]:
    """Comma/space separated floats; ``a:b:step`` expands to an inclusive range."""
    out = []
    for item in _split(raw):
        if ":" in item:
            lo, hi, step = (float(v) for v in item.split(":"))
            count = int(round((hi - lo) / step)) + 1
            out.extend(round(lo + i * step, 10) for i in range(count))
        else:
            out.append(float(item))
    return out


def parse_config_text(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), **overrides)


# -- single runs -----------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def run_one(config: ExperimentConfig, d: int, alpha: float, seed: int,
            spectra_dir: str | Path | None = None) -> dict:
    """Run the full pipeline once and return a row keyed by ``RUN_COLUMNS``."""
    start = time.perf_counter()
    n = int(round(d**alpha))
    row = dict(config_hash=config.config_hash, d=d, alpha=float(alpha), n=n, eps=float(config.eps),
               link=LinkFunction.parse(config.link).tag, seed=seed, k_hat=0, d1_hat=0, n_spikes=0,
               mse_norm=None, overlap_A=None, overlap_h=None, status="ok")
    try:
        target = sample_target(d, config.k_true, config.eps, config.link, seed, a2_law=config.a2_law)
        train = generate(target, n, seed, budget_bytes=config.budget_bytes)
        test = generate(target, config.n_test, derive_seed(seed, TEST_SEED_KEY), store_latents=True)
        try:
            model, reports = fit(train, config.fit_config())
        except Stage1Failed as exc:
            model, reports = None, exc.reports
            row["status"] = "no_structure"
        metrics = evaluate(model, target, test, fallback_mean=float(train.labels.mean()))
        row.update(mse_norm=metrics.mse_normalized, overlap_A=metrics.overlap_A, overlap_h=metrics.overlap_h)
        if model is not None:
            row.update(k_hat=model.k_hat, d1_hat=model.d1_hat, n_spikes=reports[model.k_hat].selected_rank)
        elif reports:
            row["n_spikes"] = reports[max(reports)].selected_rank
        if spectra_dir is not None and reports:
            k_show = model.k_hat if model is not None else max(reports)
            rep = reports[k_show]
            Path(spectra_dir).mkdir(parents=True, exist_ok=True)
            stem = Path(spectra_dir) / _spectrum_stem(row)
            write_spectrum_csv(rep.eigenvalues, f"{stem}.csv")
            Path(f"{stem}.edge").write_text(f"{rep.bulk_edge!r} {rep.bulk_center!r} {k_show}\n")
    except (BudgetExceeded, MemoryError) as exc:
        row["status"] = "budget"
        log.warning("run d=%d alpha=%s seed=%d over budget: %s", d, alpha, seed, exc)
    except Exception as exc:  # recorded, the sweep carries on
        row["status"] = f"error:{type(exc).__name__}"
        log.exception("run d=%d alpha=%s seed=%d failed", d, alpha, seed)
    row["wall_s"] = round(time.perf_counter() - start, 3)
    return row


def _spectrum_stem(row: dict) -> str:
    return f"d{row['d']}_a{row['alpha']:g}_s{row['seed']}_{row['config_hash']}"


def _run_key(row: dict) -> tuple:
    return (row["config_hash"], int(row["d"]), float(row["alpha"]), int(row["seed"]))


def read_runs(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RUN_COLUMNS:
            raise ValueError(f"{path} does not have the run-table columns")
        rows = list(reader)
    for r in rows:
        for key in ("d", "n", "seed", "k_hat", "d1_hat", "n_spikes"):
            r[key] = int(r[key])
        for key in ("alpha", "eps", "wall_s"):
            r[key] = float(r[key])
        for key in ("mse_norm", "overlap_A", "overlap_h"):
            r[key] = float(r[key]) if r[key] != "" else None
    return rows


def _write_runs(rows: Sequence[dict], path) -> None:
    tmp = Path(f"{path}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RUN_COLUMNS])
    os.replace(tmp, path)


def _append_run(row: dict, path) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RUN_COLUMNS)
        w.writerow([_fmt(row[c]) for c in RUN_COLUMNS])
        fh.flush()


def _sort_key(row: dict):
    return (row["config_hash"], row["d"], row["alpha"], row["seed"])


def run_sweep(config: ExperimentConfig, *, progress=None) -> list[dict]:
    """Execute every missing run of ``config`` and return its rows.

    Finished rows are appended to ``runs.csv`` as they complete (only the
    parent process writes).  At the end the table is rewritten in a fixed
    order and ``aggregate.csv`` is refreshed.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / RUNS_FILE
    existing = read_runs(runs_path)
    done = {_run_key(r) for r in existing}
    h = config.config_hash
    todo = [(d, a, s) for d, a, s in config.runs() if (h, d, float(a), s) not in done]
    spectra = out / SPECTRA_DIR if config.save_spectra else None
    log.info("sweep %s: %d runs, %d already done", h, len(config.runs()), len(config.runs()) - len(todo))
    new_rows = []
    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_one, config, d, a, s, spectra) for d, a, s in todo]
            for fut in futures:
                row = fut.result()
                _append_run(row, runs_path)
                new_rows.append(row)
                if progress:
                    progress(row)
    else:
        for d, a, s in todo:
            row = run_one(config, d, a, s, spectra)
            _append_run(row, runs_path)
            new_rows.append(row)
            if progress:
                progress(row)
    all_rows = sorted(read_runs(runs_path), key=_sort_key)
    _write_runs(all_rows, runs_path)
    wanted = {(h, d, float(a), s) for d, a, s in config.runs()}
    mine = [r for r in all_rows if _run_key(r) in wanted]
    write_aggregate(aggregate(all_rows), out / AGG_FILE)
    return mine


# -- aggregation -----------------------------------------------------------


def _stats(values: list) -> tuple[float, float, float]:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan, math.nan
    return float(np.median(vals)), float(vals.mean()), float(vals.std())


def aggregate(rows: Iterable[dict]) -> list[dict]:
    """Median/mean/std (population) over seeds for each ``(config_hash, d, alpha)``.

    Runs whose status starts with ``error`` or is ``budget`` are left out.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["status"] not in ("ok", "no_structure"):
            continue
        groups.setdefault((r["config_hash"], r["d"], r["alpha"]), []).append(r)
    out = []
    for (h, d, a), rs in sorted(groups.items()):
        med, mean, std = _stats([r["mse_norm"] for r in rs])
        _, qa, qa_s = _stats([r["overlap_A"] for r in rs])
        _, qh, qh_s = _stats([r["overlap_h"] for r in rs])
        out.append(dict(config_hash=h, d=d, alpha=a, n=rs[0]["n"], runs=len(rs), mse_median=med,
                        mse_mean=mean, mse_std=std, overlap_A_mean=qa, overlap_A_std=qa_s,
                        overlap_h_mean=qh, overlap_h_std=qh_s,
                        n_spikes_mean=float(np.mean([r["n_spikes"] for r in rs]))))
    return out


def write_aggregate(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in AGG_COLUMNS])


def steepest_drop(alphas: Sequence[float], values: Sequence[float]) -> float:
    """Midpoint of the grid interval with the largest decrease of ``values``."""
    a = np.asarray(alphas, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(a)
    a, v = a[order], v[order]
    if a.size < 2:
        raise ValueError("need at least two grid points")
    drops = v[:-1] - v[1:]
    i = int(np.argmax(drops))
    return float(0.5 * (a[i] + a[i + 1]))


def transition_midpoint(alphas: Sequence[float], values: Sequence[float], level: float = 0.5) -> float:
    """First ``alpha`` where the (linearly interpolated) curve crosses ``level``.

    Returns ``nan`` if the curve never crosses from above to below.
    """
    a = np.asarray(alphas, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(a)
    a, v = a[order], v[order]
    for i in range(a.size - 1):
        if v[i] >= level > v[i + 1]:
            t = (v[i] - level) / (v[i] - v[i + 1])
            return float(a[i] + t * (a[i + 1] - a[i]))
    return math.nan


def alpha_threshold(d: int, k: int, eps: float) -> float:
    """``log_d B(d, k) + eps``, the finite-size sample-complexity exponent."""
    return math.log(sym_dim(d, k)) / math.log(d) + eps


# -- figures ---------------------------------------------------------------


def _write_dat(path, header: str, columns: Sequence[Sequence[float]]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for values in zip(*columns):
            fh.write(" ".join(repr(float(v)) for v in values) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hierspec"
    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def emit_figures(agg_rows: Sequence[dict], out_dir, *, k: int = 2, eps: float = 0.5,
                 spectrum: str | Path | None = None) -> list[Path]:
    """Write the MSE and overlap figures, plus ``spectrum.svg`` when given, with ``.dat`` files.

    ``agg_rows`` are :func:`aggregate` rows.  ``spectrum`` is an eigenvalue
    CSV written by a sweep (its ``.edge`` sidecar supplies the bulk edge).
    """
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_d: dict[int, list[dict]] = {}
    for r in agg_rows:
        by_d.setdefault(int(r["d"]), []).append(r)

    fig, ax = plt.subplots(figsize=(5, 3.6))
    for d, rs in sorted(by_d.items()):
        rs = sorted(rs, key=lambda r: r["alpha"])
        a = [r["alpha"] for r in rs]
        med = [r["mse_median"] for r in rs]
        std = [r["mse_std"] for r in rs]
        line, = ax.plot(a, med, "o-", label=f"d={d}")
        ax.axvline(alpha_threshold(d, k, eps), color=line.get_color(), ls=":", lw=1)
        _write_dat(out / f"mse_d{d}.dat", "alpha mse_median mse_std", [a, med, std])
    if by_d:
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    else:
        log.warning("emit_figures: no rows for the MSE panel")
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("alpha = log n / log d")
    ax.set_ylabel("normalised test MSE")
    fig.tight_layout()
    _save(fig, out / "mse.svg")
    plt.close(fig)
    written.append(out / "mse.svg")

    fig, ax = plt.subplots(figsize=(5, 3.6))
    for d, rs in sorted(by_d.items()):
        rs = sorted(rs, key=lambda r: r["alpha"])
        a = [r["alpha"] for r in rs]
        qa = [r["overlap_A_mean"] for r in rs]
        qh = [r["overlap_h_mean"] for r in rs]
        line, = ax.plot(a, qa, "o-", label=f"q_A d={d}")
        ax.plot(a, qh, "s--", color=line.get_color(), label=f"q_h d={d}")
        _write_dat(out / f"overlap_d{d}.dat", "alpha overlap_A overlap_h", [a, qa, qh])
    if not by_d:
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    else:
        ax.legend(fontsize=7)
    ax.set_xlabel("alpha = log n / log d")
    ax.set_ylabel("overlap")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    _save(fig, out / "overlap.svg")
    plt.close(fig)
    written.append(out / "overlap.svg")

    fig, ax = plt.subplots(figsize=(5, 3.6))
    eig = np.array([])
    if spectrum is not None and Path(spectrum).exists():
        with open(spectrum, newline="") as fh:
            eig = np.array([float(r["eigenvalue"]) for r in csv.DictReader(fh)])
    if eig.size:
        edge, center = _read_edge(spectrum)
        ax.hist(eig, bins=80, color="0.6")
        outl = eig[np.abs(eig - center) > edge] if edge is not None else np.array([])
        if edge is not None:
            for x in (center - edge, center + edge):
                ax.axvline(x, color="k", ls="--", lw=1)
            for x in outl:
                ax.axvline(x, color="C3", lw=1)
            ax.set_title(f"{outl.size} eigenvalues beyond the bulk edge", fontsize=9)
        ax.set_yscale("log")
        _write_dat(out / "spectrum.dat", "eigenvalue", [eig])
    else:
        log.warning("emit_figures: no spectrum given")
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("eigenvalue")
    ax.set_ylabel("count")
    fig.tight_layout()
    _save(fig, out / "spectrum.svg")
    plt.close(fig)
    written.append(out / "spectrum.svg")
    return written


def _read_edge(spectrum) -> tuple[float | None, float]:
    side = Path(str(spectrum)[: -len(".csv")] + ".edge") if str(spectrum).endswith(".csv") else None
    if side is None or not side.exists():
        return None, 0.0
    parts = side.read_text().split()
    return float(parts[0]), float(parts[1])
