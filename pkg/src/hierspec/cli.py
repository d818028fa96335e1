"""Command line entry point: ``hierspec <subcommand> [options]``.

Subcommands
-----------
gen        draw a target and a dataset and write them to disk
fit        one generate/fit/evaluate run; prints the run row
sweep      run (or resume) a sweep from a config file and/or flags
spectrum   dump a moment-matrix spectrum (CSV, HSPM matrix, SVG histogram)
equiv      Gaussian-equivalence checks as CSV rows
gdprobe    gradient descent on the matched quadratic model
report     figures from a sweep directory
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("hierspec")


def _add_model_flags(p: argparse.ArgumentParser, with_alpha: bool = True) -> None:
    p.add_argument("--d", type=int, default=60, help="input dimension")
    p.add_argument("--eps", type=float, default=0.5, help="d1 = round(d^eps)")
    p.add_argument("--k", type=int, default=2, dest="k_true", help="first-layer tensor order")
    p.add_argument("--link", default="id", help="id, tanh, relu (centred) or poly:c0,c1,...")
    p.add_argument("--a2-law", default="orthogonal", choices=("orthogonal", "wigner"))
    p.add_argument("--seed", type=int, default=0)
    if with_alpha:
        p.add_argument("--alpha", type=float, default=2.75, help="n = round(d^alpha)")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--edge-method", choices=("centered", "quantile"), default=None)
    p.add_argument("--edge-c", type=float, default=None)
    p.add_argument("--degree-ratio", type=float, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--budget-bytes", type=int, default=None)


def _fit_overrides(args) -> dict:
    keys = ("k_max", "edge_method", "edge_c", "degree_ratio", "n_test", "budget_bytes")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierspec", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a target and a dataset")
    _add_model_flags(p)
    p.add_argument("--n", type=int, default=None, help="sample count (overrides --alpha)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="single run, prints the run row")
    _add_model_flags(p)
    _add_fit_flags(p)
    p.add_argument("--out", default=None, help="directory for the fitted model")

    p = sub.add_parser("sweep", help="run or resume a sweep")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--d-list", default=None)
    p.add_argument("--alpha-grid", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--k", type=int, default=None, dest="k_true")
    p.add_argument("--link", default=None)
    p.add_argument("--a2-law", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="shorthand for --seeds with one value")
    p.add_argument("--out", default=None)
    _add_fit_flags(p)

    p = sub.add_parser("spectrum", help="dump and plot a moment spectrum")
    _add_model_flags(p)
    p.add_argument("--degree", type=int, default=None, help="feature degree (default: --k)")
    p.add_argument("--edge-method", choices=("centered", "quantile"), default=None)
    p.add_argument("--edge-c", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("equiv", help="Gaussian-equivalence checks")
    p.add_argument("--check", required=True,
                   choices=("clt", "joint", "contraction", "norm", "signal", "all"))
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--d-list", default="8,16,32,64")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--link", default="id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("gdprobe", help="gradient descent on the matched model")
    p.add_argument("--d", type=int, default=24)
    p.add_argument("--eps", type=float, default=0.35)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--init-scale", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=None, help="student width (default d1)")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="trajectory CSV (default: stdout)")

    p = sub.add_parser("report", help="figures from a sweep directory")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--spectrum", default=None, help="eigenvalue CSV for the spectrum panel")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--eps", type=float, default=0.5)
    return parser


# -- handlers --------------------------------------------------------------


def _experiment(args, **extra):
    from .harness import ExperimentConfig

    return ExperimentConfig(
        d_list=(args.d,), eps=args.eps, k_true=args.k_true, link=args.link,
        alpha_grid=(args.alpha,), seeds=(args.seed,), a2_law=args.a2_law,
        **_fit_overrides(args), **extra,
    )


def cmd_gen(args) -> int:
    from .target_model import generate, sample_target, save_dataset, save_target

    if args.n is None:
        _experiment(args)  # validates alpha
    n = args.n if args.n is not None else int(round(args.d**args.alpha))
    target = sample_target(args.d, args.k_true, args.eps, args.link, args.seed, a2_law=args.a2_law)
    ds = generate(target, n, args.seed, store_latents=True)
    out = Path(args.out)
    save_target(target, out / "target")
    with open(out / "dataset.hspd", "wb") as fh:
        save_dataset(ds, fh)
    print(f"wrote target (d={args.d}, k={args.k_true}, d1={target.d1}) and {n} samples to {out}")
    return 0


def cmd_fit(args) -> int:
    from .harness import RUN_COLUMNS, _fmt, run_one

    cfg = _experiment(args)
    row = run_one(cfg, args.d, args.alpha, args.seed)
    w = csv.writer(sys.stdout)
    w.writerow(RUN_COLUMNS)
    w.writerow([_fmt(row[c]) for c in RUN_COLUMNS])
    if args.out:
        from .pipeline import fit, save_model
        from .target_model import generate, sample_target

        target = sample_target(args.d, args.k_true, args.eps, args.link, args.seed, a2_law=args.a2_law)
        model, _ = fit(generate(target, row["n"], args.seed), cfg.fit_config())
        save_model(model, args.out)
    return 0 if not row["status"].startswith("error") else 1


def cmd_sweep(args) -> int:
    from .harness import _float_list, _int_list, load_config, parse_config_text, run_sweep

    over = _fit_overrides(args)
    if args.d_list is not None:
        over["d_list"] = tuple(_int_list(args.d_list))
    if args.alpha_grid is not None:
        over["alpha_grid"] = tuple(_float_list(args.alpha_grid))
    if args.seeds is not None:
        over["seeds"] = tuple(_int_list(args.seeds))
    elif args.seed is not None:
        over["seeds"] = (args.seed,)
    for key in ("eps", "k_true", "link", "a2_law", "workers", "out"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    cfg = load_config(args.config, **over) if args.config else parse_config_text("", **over)

    def progress(row):
        print(f"d={row['d']} alpha={row['alpha']:g} seed={row['seed']} mse={row['mse_norm']} "
              f"d1_hat={row['d1_hat']} status={row['status']} ({row['wall_s']:.1f}s)", flush=True)

    rows = run_sweep(cfg, progress=progress)
    print(f"{len(rows)} runs in {Path(cfg.out) / 'runs.csv'} (config {cfg.config_hash})")
    return 0


def cmd_spectrum(args) -> int:
    from .harness import _pyplot, _save
    from .moment_spectral import (DEFAULT_EDGE_C, DEFAULT_EDGE_METHOD, accumulate, dump_moment,
                                  eigendecompose, write_spectrum_csv)
    from .target_model import generate, sample_target
    from .tensor_core import iter_hermite_blocks

    _experiment(args)
    degree = args.degree or args.k_true
    target = sample_target(args.d, args.k_true, args.eps, args.link, args.seed, a2_law=args.a2_law)
    ds = generate(target, int(round(args.d**args.alpha)), args.seed)
    M = accumulate(iter_hermite_blocks(ds.inputs, degree), ds.labels, source=degree)
    rep = eigendecompose(M, edge_c=args.edge_c or DEFAULT_EDGE_C,
                         edge_method=args.edge_method or DEFAULT_EDGE_METHOD)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "moment.hspm", "wb") as fh:
        dump_moment(M, fh)
    write_spectrum_csv(rep.eigenvalues, out / "spectrum.csv")
    (out / "spectrum.edge").write_text(f"{rep.bulk_edge!r} {rep.bulk_center!r} {degree}\n")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.hist(rep.eigenvalues, bins=80, color="0.6")
    for x in (rep.bulk_center - rep.bulk_edge, rep.bulk_center + rep.bulk_edge):
        ax.axvline(x, color="k", ls="--", lw=1)
    spikes = rep.eigenvalues[np.abs(rep.eigenvalues - rep.bulk_center) > rep.bulk_edge]
    for x in spikes:
        ax.axvline(x, color="C3", lw=1)
    ax.set_yscale("log")
    ax.set_title(f"d={args.d} alpha={args.alpha:g} degree {degree}: {spikes.size} spikes", fontsize=9)
    ax.set_xlabel("eigenvalue")
    fig.tight_layout()
    _save(fig, out / "spectrum.svg")
    plt.close(fig)
    print(f"D={M.D} n={M.n_used} edge={rep.bulk_edge:.6g} center={rep.bulk_center:.6g} "
          f"spikes={rep.selected_rank} ratio={rep.spike_ratio:.4g}")
    return 0


def cmd_equiv(args) -> int:
    from . import equivalence_lab as eq
    from .target_model import derive_seed, random_sym_tensor, sample_target

    rows = []
    checks = ("clt", "joint", "contraction", "norm", "signal") if args.check == "all" else (args.check,)
    for check in checks:
        if check == "clt":
            T = random_sym_tensor(args.d, args.k, np.random.default_rng(derive_seed(args.seed, 0xE1)))
            ks = eq.clt_distance(T, args.k, args.n, args.seed)
            ref = 1.36 / math.sqrt(args.n)  # 95% KS critical value for exact normality
            tol = 1.5 * ref if args.k == 1 else 0.02
            rows.append(eq.CheckRow("clt_distance", eq._params(d=args.d, k=args.k, n=args.n), ks, ref,
                                    ks <= tol))
        elif check == "joint":
            target = sample_target(args.d, args.k, args.eps, "id", args.seed)
            dev = eq.joint_clt_deviation(target, args.n, args.seed)
            ref = eq.joint_reference(target.d1, args.d)
            rows.append(eq.CheckRow("joint_clt_deviation", eq._params(d=args.d, d1=target.d1, n=args.n),
                                    dev, ref, dev <= ref))
        elif check == "contraction":
            d_list = [int(v) for v in args.d_list.replace(",", " ").split()]
            fit = eq.contraction_scaling(args.k, args.s, d_list, args.trials, args.seed)
            expected = 0.0 if args.s == args.k else -float(args.s)
            rows.append(eq.CheckRow("contraction_scaling",
                                    eq._params(k=args.k, s=args.s, d_list="|".join(map(str, d_list)),
                                               ci=f"{fit.slope_ci[0]:.4f}|{fit.slope_ci[1]:.4f}"),
                                    fit.slope, expected, abs(fit.slope - expected) <= 0.25))
        elif check == "norm":
            mean, mx = eq.norm_tail_check(args.d, args.k, min(args.n, 10_000), args.seed)
            rows.append(eq.CheckRow("norm_tail_mean", eq._params(d=args.d, k=args.k), mean, 1.0,
                                    abs(mean - 1) <= 0.05))
            rows.append(eq.CheckRow("norm_tail_max", eq._params(d=args.d, k=args.k), mx, 3.0, mx <= 3.0))
        elif check == "signal":
            target = sample_target(args.d, 2, args.eps, args.link, args.seed)
            dist = eq.signal_formula_check(target, args.n, args.seed)
            rows.append(eq.CheckRow("signal_formula", eq._params(d=args.d, d1=target.d1, n=args.n,
                                                                 link=target.link.tag), dist, 0.5, dist <= 0.5))
    if args.out:
        eq.write_rows(rows, args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(eq.CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
    return 0


def cmd_gdprobe(args) -> int:
    from .gd_probe import gd_train, probe_dataset
    from .target_model import sample_target

    target = sample_target(args.d, args.k, args.eps, "id", args.seed)
    data = probe_dataset(target, args.n, args.seed)
    traj = gd_train(data, args.eta, args.steps, args.init_scale, args.seed, args.width or target.d1,
                    log_every=args.log_every)
    if args.out:
        traj.to_csv(args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(traj.COLUMNS)
        for row in traj.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    if traj.diverged:
        print("diverged", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    from .harness import AGG_FILE, RUNS_FILE, SPECTRA_DIR, aggregate, emit_figures, read_runs, write_aggregate

    out = Path(args.out)
    rows = read_runs(out / RUNS_FILE)
    agg = aggregate(rows)
    write_aggregate(agg, out / AGG_FILE)
    spectrum = args.spectrum
    if spectrum is None:
        candidates = sorted((out / SPECTRA_DIR).glob("*.csv"))
        spectrum = candidates[-1] if candidates else None
    paths = emit_figures(agg, out / "figures", k=args.k, eps=args.eps, spectrum=spectrum)
    for p in paths:
        print(p)
    return 0


HANDLERS = {
    "gen": cmd_gen, "fit": cmd_fit, "sweep": cmd_sweep, "spectrum": cmd_spectrum,
    "equiv": cmd_equiv, "gdprobe": cmd_gdprobe, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .harness import ConfigError

    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
