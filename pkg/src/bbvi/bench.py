"""Experiment runner: method presets, multi-seed suites, CCDF comparisons.

The presets reproduce the benchmark's method matrix: an ADVI baseline
(closed-form entropy gradient and the adaptive step scheme) and a path of
modifications through the comprehensive step search, the STL gradient,
Laplace initialization, importance-weighted training/sampling, and
real-NVP flows.

Methods are compared pairwise: per model, the difference of the achieved
lower bounds; a diverged pair contributes a difference of zero (counting
the model in favor of the baseline).  The empirical complementary CDF of
those differences is the benchmark's headline curve.
"""

from __future__ import annotations

import csv
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from bbvi.estimators import EstimatorConfig
from bbvi.families import FamilyParams, init_standard
from bbvi.inference import EvalReport, evaluate
from bbvi.optimize import (
    LaplaceInitError,
    OptimizationTrace,
    SearchFailure,
    advi_optimize,
    comprehensive_search,
    laplace_init,
)
from bbvi.targets import TargetModel, get_model


class ConfigError(ValueError):
    """Invalid run configuration (unknown preset, family/model mismatch, ...)."""


@dataclass(frozen=True)
class MethodPreset:
    name: str
    family: str  # gaussian_full | gaussian_diag | flow
    gradient: str  # estimator kind
    scheme: str  # advi | comprehensive
    use_laplace_init: bool
    m_train: int
    m_sampling: int


PRESETS: dict[str, MethodPreset] = {
    p.name: p
    for p in [
        MethodPreset("advi_baseline", "gaussian_full", "elbo_closed_form", "advi", False, 1, 1),
        MethodPreset("m0", "gaussian_full", "elbo_closed_form", "comprehensive", False, 1, 1),
        MethodPreset("m1", "gaussian_full", "elbo_stl", "comprehensive", False, 1, 1),
        MethodPreset("m2", "gaussian_full", "elbo_stl", "comprehensive", True, 1, 1),
        MethodPreset("m3a", "gaussian_full", "elbo_stl", "comprehensive", False, 1, 10),
        MethodPreset("m3b", "gaussian_full", "iwelbo_dreg", "comprehensive", False, 10, 10),
        MethodPreset("m4a", "flow", "elbo_full", "comprehensive", False, 1, 1),
        MethodPreset("m4b", "flow", "elbo_stl", "comprehensive", False, 1, 1),
        MethodPreset("m4c", "flow", "elbo_stl", "comprehensive", False, 1, 10),
        MethodPreset("m4d", "flow", "iwelbo_dreg", "comprehensive", False, 10, 10),
    ]
}


@dataclass
class RunResult:
    params: Optional[FamilyParams]
    report: Optional[EvalReport]
    trace: Optional[OptimizationTrace]
    diverged: bool
    li_fell_back: bool = False


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def run_preset(
    preset: MethodPreset | str,
    model: TargetModel | str,
    seed: int,
    iters: int = 5000,
    budget: int = 100,
    n_eval: int = 10000,
    flow_layers: int = 10,
    flow_hidden: int = 32,
) -> RunResult:
    """Initialize, optimize, and evaluate one (preset, model, seed) cell.

    Laplace-init failure falls back to the standard initialization (and is
    recorded); a fully diverged optimization yields a RunResult with
    ``diverged`` set rather than raising.
    """
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
        preset = PRESETS[preset]
    if isinstance(model, str):
        model = get_model(model)
    if preset.family == "flow" and model.dim < 2:
        raise ConfigError(f"preset {preset.name} uses a flow, which needs dim >= 2 ({model.name} has dim 1)")

    ss = np.random.SeedSequence([seed, _crc(model.name), _crc(preset.name)])
    init_ss, train_ss, eval_ss = ss.spawn(3)

    li_fell_back = False
    if preset.use_laplace_init and preset.family == "gaussian_full":
        try:
            fp = laplace_init(model)
        except LaplaceInitError:
            fp = init_standard(preset.family, model.dim)
            li_fell_back = True
    else:
        fp = init_standard(
            preset.family,
            model.dim,
            n_layers=flow_layers,
            n_hidden=flow_hidden,
            rng=np.random.default_rng(init_ss),
        )

    cfg = EstimatorConfig(preset.gradient, M=preset.m_train, budget=budget)
    try:
        if preset.scheme == "advi":
            fp, trace = advi_optimize(model, fp, cfg, iters, train_ss)
        else:
            fp, trace = comprehensive_search(model, fp, cfg, iters, train_ss)
    except SearchFailure:
        return RunResult(None, None, None, True, li_fell_back)

    report = evaluate(model, fp, np.random.default_rng(eval_ss), preset.m_sampling, n=n_eval)
    return RunResult(fp, report, trace, False, li_fell_back)


# ---------------------------------------------------------------------------
# CCDF comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonResult:
    """Per-model improvements and the CCDF evaluated on those values."""

    deltas: np.ndarray
    points: list[tuple[float, float]]  # (delta, fraction of deltas >= delta)

    def fraction_at(self, delta: float) -> float:
        return float(np.mean(self.deltas >= delta))


def pairwise_ccdf(
    bounds_a: Sequence[float],
    bounds_b: Sequence[float],
    diverged: Optional[Sequence[bool]] = None,
    grid: Optional[Sequence[float]] = None,
) -> ComparisonResult:
    """CCDF of per-model improvements delta_i = A_i - B_i.

    A pair where either side diverged contributes delta_i = 0.  The curve
    is evaluated at every distinct delta plus any requested grid points.
    """
    a = np.asarray(bounds_a, dtype=np.float64)
    b = np.asarray(bounds_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"bound lists must have equal length, got {a.shape} vs {b.shape}")
    deltas = a - b
    if diverged is not None:
        flags = np.asarray(diverged, dtype=bool)
        if flags.shape != a.shape:
            raise ValueError("diverged flags must match the bound lists")
        deltas = np.where(flags, 0.0, deltas)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite delta without a diverged flag")
    queries = sorted(set(deltas.tolist()) | set(float(g) for g in (grid or [])))
    points = [(q, float(np.mean(deltas >= q))) for q in queries]
    return ComparisonResult(deltas, points)


# ---------------------------------------------------------------------------
# Suite execution
# ---------------------------------------------------------------------------


@dataclass
class SuiteRow:
    model: str
    preset: str
    seed: int
    estimate: float
    se: float
    diverged: bool
    wallclock_s: float


def run_suite(
    presets: Sequence[MethodPreset | str],
    models: Sequence[str],
    seeds: Sequence[int],
    iters: int = 5000,
    budget: int = 100,
    n_eval: int = 10000,
    jobs: int = 1,
    flow_layers: int = 10,
    flow_hidden: int = 32,
) -> list[SuiteRow]:
    """Cartesian product of (preset, model, seed); failures never abort.

    Cells are independent jobs (each builds its own model instance, so the
    oracle counters never contend); results come back in deterministic
    row order regardless of the worker count.
    """
    preset_names = [p if isinstance(p, str) else p.name for p in presets]
    cells = [(m, p, s) for p in preset_names for m in models for s in seeds]

    def run_cell(cell):
        model_name, preset_name, seed = cell
        start = time.perf_counter()
        try:
            result = run_preset(
                preset_name,
                model_name,
                seed,
                iters=iters,
                budget=budget,
                n_eval=n_eval,
                flow_layers=flow_layers,
                flow_hidden=flow_hidden,
            )
            diverged = result.diverged
            est = result.report.estimate if result.report else float("nan")
            se = result.report.std_error if result.report else float("nan")
        except ConfigError:
            raise
        except Exception:
            diverged, est, se = True, float("nan"), float("nan")
        return SuiteRow(model_name, preset_name, seed, est, se, diverged, time.perf_counter() - start)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    return rows


def write_suite_csv(rows: Sequence[SuiteRow], path, timing: bool = False) -> None:
    """Write the results table; the wallclock column is left empty unless
    ``timing`` is requested, so identical seeds give byte-identical files."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "preset", "seed", "estimate", "se", "diverged", "wallclock_s"])
        for r in rows:
            writer.writerow(
                [
                    r.model,
                    r.preset,
                    r.seed,
                    "nan" if not np.isfinite(r.estimate) else f"{r.estimate:.17g}",
                    "nan" if not np.isfinite(r.se) else f"{r.se:.17g}",
                    str(r.diverged).lower(),
                    f"{r.wallclock_s:.3f}" if timing else "",
                ]
            )


def read_suite_csv(path) -> list[SuiteRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(
                SuiteRow(
                    rec["model"],
                    rec["preset"],
                    int(rec["seed"]),
                    float(rec["estimate"]),
                    float(rec["se"]),
                    rec["diverged"] == "true",
                    float(rec["wallclock_s"]) if rec["wallclock_s"] else 0.0,
                )
            )
    return rows


def suite_ccdf(rows_a: Sequence[SuiteRow], rows_b: Sequence[SuiteRow], grid=None) -> ComparisonResult:
    """Join two suites on (model, seed), average seeds per model, compare.

    A model counts as diverged if any contributing run on either side
    diverged; its delta is forced to zero.
    """
    def index(rows):
        table: dict[str, dict[int, SuiteRow]] = {}
        for r in rows:
            table.setdefault(r.model, {})[r.seed] = r
        return table

    ta, tb = index(rows_a), index(rows_b)
    missing = []
    for model in sorted(set(ta) | set(tb)):
        seeds_a = set(ta.get(model, {}))
        seeds_b = set(tb.get(model, {}))
        for s in seeds_a ^ seeds_b:
            missing.append((model, s))
    if missing:
        raise KeyError(f"suites do not share (model, seed) keys; unmatched: {missing}")

    models = sorted(ta)
    bounds_a, bounds_b, flags = [], [], []
    for model in models:
        ra = [ta[model][s] for s in sorted(ta[model])]
        rb = [tb[model][s] for s in sorted(tb[model])]
        diverged = any(r.diverged or not np.isfinite(r.estimate) for r in ra + rb)
        flags.append(diverged)
        bounds_a.append(0.0 if diverged else float(np.mean([r.estimate for r in ra])))
        bounds_b.append(0.0 if diverged else float(np.mean([r.estimate for r in rb])))
    return pairwise_ccdf(bounds_a, bounds_b, flags, grid=grid)
