"""Command-line front end: single runs, suites, CCDF comparison, inspection.

Outputs land under --out (default: $BBVI_OUT_DIR or the working
directory).  Every report path writes delimited data plus a rendered
figure beside it unless --no-plot is given.  Exit codes: 0 success,
1 configuration error, 2 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from bbvi import bench
from bbvi.bench import PRESETS, ConfigError, MethodPreset, run_preset
from bbvi.families import load_params, save_params
from bbvi.targets import ZOO_NAMES

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _out_dir(arg: str | None) -> Path:
    root = Path(arg) if arg else Path(os.environ.get("BBVI_OUT_DIR", "."))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method on one model and evaluate it")
    run.add_argument("--model", required=True, help=f"target name ({', '.join(ZOO_NAMES)})")
    run.add_argument("--preset", help=f"method preset ({', '.join(PRESETS)})")
    run.add_argument("--family", choices=["gaussian_full", "gaussian_diag", "flow"])
    run.add_argument("--estimator", choices=["elbo_closed_form", "elbo_full", "elbo_stl", "iwelbo_naive", "iwelbo_dreg"])
    run.add_argument("--scheme", choices=["advi", "comprehensive"])
    run.add_argument("--m-train", type=int, default=1)
    run.add_argument("--m-sampling", type=int, default=1)
    run.add_argument("--li", action="store_true", help="use Laplace initialization")
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--iters", type=int, default=5000)
    run.add_argument("--budget", type=int, default=100)
    run.add_argument("--n-eval", type=int, default=10000)
    run.add_argument("--flow-layers", type=int, default=10)
    run.add_argument("--flow-hidden", type=int, default=32)
    run.add_argument("--out", help="output directory (default $BBVI_OUT_DIR or .)")
    run.add_argument("--no-plot", action="store_true")

    bch = sub.add_parser("bench", help="run a preset x model x seed suite")
    bch.add_argument("--models", nargs="+", default=list(ZOO_NAMES))
    bch.add_argument("--presets", nargs="+", required=True)
    bch.add_argument("--seeds", type=int, nargs="+", required=True)
    bch.add_argument("--iters", type=int, default=5000)
    bch.add_argument("--budget", type=int, default=100)
    bch.add_argument("--n-eval", type=int, default=10000)
    bch.add_argument("--jobs", type=int, default=1)
    bch.add_argument("--flow-layers", type=int, default=10)
    bch.add_argument("--flow-hidden", type=int, default=32)
    bch.add_argument("--timing", action="store_true", help="fill the wallclock_s column")
    bch.add_argument("--out", help="output directory")
    bch.add_argument("--no-plot", action="store_true")

    ccdf = sub.add_parser("ccdf", help="pairwise CCDF of two suite result files")
    ccdf.add_argument("file_a")
    ccdf.add_argument("file_b")
    ccdf.add_argument("--out", help="output directory")
    ccdf.add_argument("--no-plot", action="store_true")

    insp = sub.add_parser("inspect", help="describe a parameter checkpoint")
    insp.add_argument("checkpoint")
    return parser


def _positive(parser_name: str, **values) -> None:
    for key, value in values.items():
        if value is not None and value <= 0:
            raise ConfigError(f"{parser_name}: --{key.replace('_', '-')} must be positive, got {value}")


def _cmd_run(args) -> int:
    _positive("run", iters=args.iters, budget=args.budget, n_eval=args.n_eval,
              m_train=args.m_train, m_sampling=args.m_sampling,
              flow_layers=args.flow_layers, flow_hidden=args.flow_hidden)
    explicit = [args.family, args.estimator, args.scheme]
    if args.preset and any(v is not None for v in explicit):
        raise ConfigError("run: --preset conflicts with explicit --family/--estimator/--scheme overrides")
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESETS)}")
        preset = PRESETS[args.preset]
    else:
        if not all(v is not None for v in explicit):
            raise ConfigError("run: provide --preset or all of --family, --estimator, --scheme")
        preset = MethodPreset(
            f"custom_{args.family}_{args.estimator}_{args.scheme}",
            args.family,
            args.estimator,
            args.scheme,
            args.li,
            args.m_train,
            args.m_sampling,
        )
    if args.model not in ZOO_NAMES:
        raise ConfigError(f"unknown model {args.model!r}; valid models: {', '.join(ZOO_NAMES)}")

    result = run_preset(
        preset,
        args.model,
        args.seed,
        iters=args.iters,
        budget=args.budget,
        n_eval=args.n_eval,
        flow_layers=args.flow_layers,
        flow_hidden=args.flow_hidden,
    )
    out = _out_dir(args.out)
    stem = f"{args.model}_{preset.name}_seed{args.seed}"
    if result.trace is not None:
        result.trace.write_csv(out / f"{stem}_trace.csv")
        if not args.no_plot:
            from bbvi import plots

            plots.render_trace(result.trace, out / f"{stem}_trace.png")
    if result.diverged:
        print(f"model={args.model} method={preset.name} bound=nan se=nan (diverged)")
        return EXIT_DIVERGED
    report = result.report
    with open(out / f"{stem}_report.json", "w") as f:
        f.write(report.to_json(model=args.model, method=preset.name, seed=args.seed))
    save_params(out / f"{stem}_params.bin", result.params)
    print(f"model={args.model} method={preset.name} bound={report.estimate:.6f} se={report.std_error:.6f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    _positive("bench", iters=args.iters, budget=args.budget, n_eval=args.n_eval, jobs=args.jobs)
    for p in args.presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; valid presets: {', '.join(PRESETS)}")
    for m in args.models:
        if m not in ZOO_NAMES:
            raise ConfigError(f"unknown model {m!r}; valid models: {', '.join(ZOO_NAMES)}")
    rows = bench.run_suite(
        args.presets,
        args.models,
        args.seeds,
        iters=args.iters,
        budget=args.budget,
        n_eval=args.n_eval,
        jobs=args.jobs,
        flow_layers=args.flow_layers,
        flow_hidden=args.flow_hidden,
    )
    out = _out_dir(args.out)
    csv_path = out / "results.csv"
    bench.write_suite_csv(rows, csv_path, timing=args.timing)
    if not args.no_plot:
        from bbvi import plots

        plots.render_suite(rows, out / "results.png")
    n_div = sum(r.diverged for r in rows)
    print(f"wrote {csv_path} ({len(rows)} rows, {n_div} diverged)")
    return EXIT_OK


def _cmd_ccdf(args) -> int:
    for p in (args.file_a, args.file_b):
        if not Path(p).exists():
            raise ConfigError(f"no such file: {p}")
    rows_a = bench.read_suite_csv(args.file_a)
    rows_b = bench.read_suite_csv(args.file_b)
    try:
        result = bench.suite_ccdf(rows_a, rows_b)
    except KeyError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args.out)
    csv_path = out / "ccdf.csv"
    with open(csv_path, "w", newline="") as f:
        f.write("delta,fraction\n")
        for delta, frac in result.points:
            f.write(f"{delta:.17g},{frac:.17g}\n")
    if not args.no_plot:
        from bbvi import plots

        plots.render_ccdf(result, out / "ccdf.png", Path(args.file_a).stem, Path(args.file_b).stem)
    print(f"wrote {csv_path} ({result.deltas.size} models)")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"no such file: {args.checkpoint}")
    fp = load_params(args.checkpoint)
    fam = fp.family
    info = {
        "kind": fam.kind,
        "dim": fam.dim,
        "n_layers": getattr(fam, "n_layers", 0),
        "n_hidden": getattr(fam, "n_hidden", 0),
        "n_params": int(fp.phi.size),
        "phi_min": float(fp.phi.min()),
        "phi_max": float(fp.phi.max()),
        "phi_norm": float(np.linalg.norm(fp.phi)),
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "bench": _cmd_bench, "ccdf": _cmd_ccdf, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
