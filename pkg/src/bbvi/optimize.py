"""Stochastic optimization drivers and initialization.

Two step schemes are provided: constant-step Adam driven by a
comprehensive grid search over step sizes (five values spaced by a factor
of four below 0.1/D, each run for the full iteration budget, winner picked
by the best objective averaged over the whole trace), and the adaptive
ADVI scheme (decaying coordinatewise steps with a squared-gradient memory,
preceded by a short trial search over eta in {0.01, 0.1, 1, 10, 100}).

Laplace initialization maximizes log p(z, x) with a hand-rolled BFGS
(Armijo backtracking), takes a central finite-difference Hessian of the
gradient, and returns the full-rank Gaussian matching the local curvature.

Runs are deterministic given a seed; a run ends at its first non-finite
gradient and is excluded from step-size selection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from bbvi.estimators import EstimatorConfig, estimate_gradient
from bbvi.families import FamilyParams, FullRankGaussian
from bbvi.inference import evaluate
from bbvi.targets import TargetModel

ADVI_STEP_CANDIDATES = (0.01, 0.1, 1.0, 10.0, 100.0)


class SearchFailure(RuntimeError):
    """Every candidate step size diverged."""


class LaplaceInitError(RuntimeError):
    """The negated Hessian at the mode is not usably positive definite."""


# ---------------------------------------------------------------------------
# Steppers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    eta: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, eta: float) -> "AdamState":
        return cls(eta=eta, m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, phi: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam ascent step; non-finite gradients are a no-op."""
    if not np.all(np.isfinite(grad)):
        return state, phi
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_phi = phi + state.eta * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(state.eta, m, v, t, state.beta1, state.beta2, state.eps), new_phi


@dataclass
class AdviStepState:
    eta: float
    alpha: float = 0.1
    tau: float = 1.0
    decay_eps: float = 1e-16
    i: int = 0
    s: Optional[np.ndarray] = None


def advi_step(state: AdviStepState, phi: np.ndarray, grad: np.ndarray) -> tuple[AdviStepState, np.ndarray]:
    """ADVI adaptive ascent step.

    s(1) = g^2, s(i) = alpha g^2 + (1-alpha) s(i-1),
    rho(i) = eta / (i^(1/2+eps) * (tau + sqrt(s(i)))).
    """
    if not np.all(np.isfinite(grad)):
        return state, phi
    i = state.i + 1
    g2 = grad * grad
    s = g2 if state.s is None else state.alpha * g2 + (1.0 - state.alpha) * state.s
    rho = state.eta / (i ** (0.5 + state.decay_eps) * (state.tau + np.sqrt(s)))
    new_phi = phi + rho * grad
    return AdviStepState(state.eta, state.alpha, state.tau, state.decay_eps, i, s), new_phi


# ---------------------------------------------------------------------------
# Traces and the selection rule
# ---------------------------------------------------------------------------


@dataclass
class RunTrace:
    """One constant-step optimization run."""

    step_size: float
    objectives: np.ndarray
    diverged: bool
    final_phi: Optional[np.ndarray] = None

    @property
    def average_objective(self) -> float:
        finite = self.objectives[np.isfinite(self.objectives)]
        return float(np.mean(finite)) if finite.size else float("nan")


@dataclass
class OptimizationTrace:
    runs: list[RunTrace] = field(default_factory=list)
    selected_step_size: Optional[float] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "step_size", "objective_estimate", "diverged"])
            for run in self.runs:
                for i, obj in enumerate(run.objectives):
                    writer.writerow([i, f"{run.step_size:.17g}", f"{obj:.17g}", str(run.diverged).lower()])


def select_best_run(runs: Sequence[RunTrace]) -> Optional[int]:
    """Index of the non-diverged run with the highest average objective.

    Ties break toward the smaller step size; None when every run diverged.
    """
    best: Optional[int] = None
    for i, run in enumerate(runs):
        if run.diverged or not np.isfinite(run.average_objective):
            continue
        if best is None:
            best = i
            continue
        cur = runs[best]
        if run.average_objective > cur.average_objective or (
            run.average_objective == cur.average_objective and run.step_size < cur.step_size
        ):
            best = i
    return best


# ---------------------------------------------------------------------------
# Optimization loops
# ---------------------------------------------------------------------------


def _run_constant(
    model: TargetModel,
    fp: FamilyParams,
    cfg: EstimatorConfig,
    eta: float,
    iters: int,
    rng: np.random.Generator,
    scheme: str = "adam",
    rel_tol: Optional[float] = None,
) -> RunTrace:
    """Optimize with a fixed step-size setting; stop at the first non-finite
    gradient (run marked diverged).  With ``rel_tol`` set, stop early when a
    100-iteration rolling mean of the objective changes by less than the
    relative tolerance between consecutive windows."""
    phi = np.array(fp.phi, copy=True)
    state = AdamState.init(phi.size, eta) if scheme == "adam" else AdviStepState(eta=eta)
    stepper = adam_step if scheme == "adam" else advi_step
    objectives = np.full(iters, np.nan)
    window: list[float] = []
    prev_window_mean: Optional[float] = None
    for i in range(iters):
        est = estimate_gradient(model, fp.replace(phi), rng, cfg)
        objectives[i] = est.objective_estimate
        if est.divergent:
            return RunTrace(eta, objectives[: i + 1], True)
        state, phi = stepper(state, phi, est.grad)
        if not np.all(np.isfinite(phi)):
            return RunTrace(eta, objectives[: i + 1], True)
        if rel_tol is not None:
            window.append(est.objective_estimate)
            if len(window) == 100:
                mean = float(np.mean(window))
                window.clear()
                if prev_window_mean is not None:
                    denom = max(abs(prev_window_mean), 1e-12)
                    if abs(mean - prev_window_mean) / denom < rel_tol:
                        return RunTrace(eta, objectives[: i + 1], False, phi)
                prev_window_mean = mean
    return RunTrace(eta, objectives, False, phi)


def step_size_grid(dim: int, decay: float = 4.0) -> list[float]:
    """Adam step-size candidates 0.1/D * [1, 1/B, 1/B^2, 1/B^3, 1/B^4]."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return [0.1 / dim * decay**-k for k in range(5)]


def comprehensive_search(
    model: TargetModel,
    fp: FamilyParams,
    cfg: EstimatorConfig,
    iters: int,
    seed,
    grid: Optional[Sequence[float]] = None,
) -> tuple[FamilyParams, OptimizationTrace]:
    """Run Adam at every grid step size and keep the run with the best
    average objective over its whole trace.

    Each step size gets its own RNG substream keyed by its rank in the
    descending grid, so permuting the candidate list changes nothing.
    Returns the selected run's final parameters.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    grid = step_size_grid(model.dim) if grid is None else sorted(set(grid), reverse=True)
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    streams = ss.spawn(len(grid))
    trace = OptimizationTrace()
    for eta, child in zip(grid, streams):
        rng = np.random.default_rng(child)
        trace.runs.append(_run_constant(model, fp, cfg, eta, iters, rng, scheme="adam"))
    best = select_best_run(trace.runs)
    if best is None:
        raise SearchFailure(f"{model.name}: all step sizes diverged")
    trace.selected_step_size = trace.runs[best].step_size
    return fp.replace(trace.runs[best].final_phi), trace


def advi_step_search(
    model: TargetModel,
    fp: FamilyParams,
    cfg: EstimatorConfig,
    seed,
    iters: int = 200,
    n_eval: int = 500,
) -> float:
    """ADVI's small-trial eta search: short runs from identical
    initialization and seed, scored by the ELBO on a fresh batch of
    samples; ties go to the smaller eta."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    train_ss, eval_ss = ss.spawn(2)
    best_eta: Optional[float] = None
    best_val = -np.inf
    for eta in ADVI_STEP_CANDIDATES:
        run = _run_constant(model, fp, cfg, eta, iters, np.random.default_rng(train_ss), scheme="advi")
        if run.diverged:
            continue
        report = evaluate(model, fp.replace(run.final_phi), np.random.default_rng(eval_ss), 1, n=n_eval)
        if np.isfinite(report.estimate) and (
            report.estimate > best_val or (report.estimate == best_val and best_eta is not None and eta < best_eta)
        ):
            best_val = report.estimate
            best_eta = eta
    if best_eta is None:
        raise SearchFailure(f"{model.name}: every ADVI step-size candidate diverged")
    return best_eta


def advi_optimize(
    model: TargetModel,
    fp: FamilyParams,
    cfg: EstimatorConfig,
    iters: int,
    seed,
    rel_tol: float = 1e-3,
    search_iters: int = 200,
    search_eval: int = 500,
) -> tuple[FamilyParams, OptimizationTrace]:
    """Full ADVI scheme: trial search for eta, then an adaptive-step run with
    the relative-tolerance convergence check."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    search_ss, main_ss = ss.spawn(2)
    eta = advi_step_search(model, fp, cfg, search_ss, iters=search_iters, n_eval=search_eval)
    run = _run_constant(
        model, fp, cfg, eta, iters, np.random.default_rng(main_ss), scheme="advi", rel_tol=rel_tol
    )
    trace = OptimizationTrace(runs=[run], selected_step_size=eta)
    if run.diverged:
        raise SearchFailure(f"{model.name}: ADVI run diverged at eta={eta}")
    return fp.replace(run.final_phi), trace


# ---------------------------------------------------------------------------
# Laplace initialization
# ---------------------------------------------------------------------------


def _bfgs_maximize(model: TargetModel, x0: np.ndarray, max_iters: int, grad_tol: float):
    """BFGS ascent on log p(z, x) with Armijo backtracking (c=1e-4, shrink 0.5).

    Bookkeeping follows the minimization of -log p: B approximates the
    inverse Hessian of the negated objective, so the ascent direction is
    B g and the curvature pair is (s, g_old - g_new).
    """
    x = np.array(x0, dtype=np.float64)
    f, g = model.log_joint_and_grad(x)
    B = np.eye(x.size)
    for _ in range(max_iters):
        if np.linalg.norm(g) < grad_tol:
            break
        direction = B @ g
        slope = g @ direction
        if slope <= 0.0:  # lost positive definiteness; restart from steepest ascent
            B = np.eye(x.size)
            direction = g
            slope = g @ g
        alpha = 1.0
        for _ in range(60):
            x_new = x + alpha * direction
            try:
                f_new, g_new = model.log_joint_and_grad(x_new)
            except Exception:
                alpha *= 0.5
                continue
            if f_new >= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            break
        s = x_new - x
        y = g - g_new
        sy = s @ y
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(x.size)
            B = (I - rho * np.outer(s, y)) @ B @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
    return x


def laplace_init(
    model: TargetModel,
    max_iters: int = 2000,
    x0: Optional[np.ndarray] = None,
    grad_tol: float = 1e-8,
    fd_eps: float = 1e-6,
) -> FamilyParams:
    """Initialize a full-rank Gaussian from the mode and curvature of log p.

    Finds the mode by BFGS, forms the Hessian with central finite
    differences of the gradient (step ``fd_eps``), and returns mu at the
    mode with L the Cholesky factor of (-H)^{-1}.  Raises LaplaceInitError
    when the negated Hessian is not (robustly) positive definite, as at a
    flat optimum.
    """
    D = model.dim
    x0 = np.zeros(D) if x0 is None else np.asarray(x0, dtype=np.float64)
    z_hat = _bfgs_maximize(model, x0, max_iters, grad_tol)
    H = np.empty((D, D))
    for j in range(D):
        step = np.zeros(D)
        step[j] = fd_eps
        g_plus = model.grad_log_joint(z_hat + step)
        g_minus = model.grad_log_joint(z_hat - step)
        H[:, j] = (g_plus - g_minus) / (2.0 * fd_eps)
    A = -0.5 * (H + H.T)
    eigvals = np.linalg.eigvalsh(A)
    if eigvals[0] <= 1e-4 * max(1.0, eigvals[-1]):
        raise LaplaceInitError(
            f"{model.name}: -Hessian at the mode is not positive definite "
            f"(eigenvalues in [{eigvals[0]:.3g}, {eigvals[-1]:.3g}])"
        )
    cov = np.linalg.inv(A)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    fam = FullRankGaussian(D)
    return FamilyParams(fam, fam.pack(z_hat, L))
