"""Objective and gradient estimators under a fixed per-iteration oracle budget.

Five estimators share one calling convention: draw base noise, spend
exactly ``budget`` oracle evaluations of log p (one per sampled point,
value and gradient together), and return a flat parameter gradient plus
the batch objective estimate.

For the importance-weighted objectives a "copy" draws M fresh samples;
``budget / M`` independent copies are averaged per call.  Weight
normalization runs in log-space through a max-shifted softmax so large
log-weights cannot overflow.

A batch that produces non-finite numbers anywhere (exploded parameters,
overflowing transforms) is returned flagged ``divergent`` instead of
raising; the optimizer treats such a run as diverged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from bbvi.families import FamilyParams
from bbvi.targets import TargetError, TargetModel

ESTIMATOR_KINDS = ("elbo_closed_form", "elbo_full", "elbo_stl", "iwelbo_naive", "iwelbo_dreg")


@dataclass(frozen=True)
class EstimatorConfig:
    """Which gradient to compute, with how many importance samples per copy."""

    kind: str
    M: int = 1
    budget: int = 100

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator {self.kind!r}; expected one of {ESTIMATOR_KINDS}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.kind.startswith("elbo") and self.M != 1:
            raise ValueError(f"{self.kind} requires M = 1")
        if self.budget < 1 or self.budget % self.M != 0:
            raise ValueError(f"budget ({self.budget}) must be a positive multiple of M ({self.M})")

    @property
    def copies(self) -> int:
        return self.budget // self.M


@dataclass
class GradientEstimate:
    grad: np.ndarray
    objective_estimate: float
    oracle_evals_used: int
    divergent: bool = False


def _diverged(n_params: int, evals_used: int = 0) -> GradientEstimate:
    return GradientEstimate(np.full(n_params, np.nan), float("nan"), evals_used, True)


def _finalize(grad: np.ndarray, objective: float, budget: int) -> GradientEstimate:
    divergent = not (np.all(np.isfinite(grad)) and np.isfinite(objective))
    return GradientEstimate(grad, float(objective), budget, divergent)


def _draw(model, fam, phi, rng, n):
    """Sample a batch and query the oracle; None signals divergence."""
    eps = rng.standard_normal((n, fam.dim))
    z, logq, cache = fam.forward(phi, eps)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logq))):
        return None
    try:
        lp, gp = model.log_joint_and_grad(z)
    except TargetError:
        return None
    return eps, z, logq, cache, lp, gp


def elbo_grad_closed_form(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    """Pathwise log p gradient plus the exact entropy gradient (ADVI's estimator)."""
    fam, phi = fp.family, fp.phi
    entropy = fam.entropy(phi)  # raises UnsupportedFamilyError for flows
    n = cfg.budget
    batch = _draw(model, fam, phi, rng, n)
    if batch is None:
        return _diverged(fam.n_params)
    eps, z, _, cache, lp, gp = batch
    w = np.full(n, 1.0 / n)
    grad = fam.sample_vjp(phi, eps, gp * w[:, None], cache=cache) + fam.entropy_grad(phi)
    return _finalize(grad, np.mean(lp) + entropy, n)


def elbo_grad_full(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    """Reparameterized ELBO gradient with the total-derivative entropy term."""
    fam, phi = fp.family, fp.phi
    n = cfg.budget
    batch = _draw(model, fam, phi, rng, n)
    if batch is None:
        return _diverged(fam.n_params)
    eps, z, logq, cache, lp, gp = batch
    w = np.full(n, 1.0 / n)
    grad = fam.sample_vjp(phi, eps, gp * w[:, None], cache=cache) - fam.logq_grad_full(phi, eps, weights=w, cache=cache)
    return _finalize(grad, np.mean(lp - logq), n)


def elbo_grad_stl(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    """Sticking-the-landing: the density parameters are frozen under the
    gradient, so it flows only through the sampling path and the zero-mean
    score term drops out."""
    fam, phi = fp.family, fp.phi
    n = cfg.budget
    batch = _draw(model, fam, phi, rng, n)
    if batch is None:
        return _diverged(fam.n_params)
    eps, z, logq, cache, lp, gp = batch
    gq = fam.grad_z_at_sample(phi, eps, cache=cache)
    w = np.full(n, 1.0 / n)
    grad = fam.sample_vjp(phi, eps, (gp - gq) * w[:, None], cache=cache)
    return _finalize(grad, np.mean(lp - logq), n)


def iwelbo_estimate(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, M: int, copies: int) -> float:
    """Monte Carlo IW-ELBO: mean over copies of log (1/M) sum_m p/q in log-space."""
    fam, phi = fp.family, fp.phi
    eps = rng.standard_normal((copies * M, fam.dim))
    z, logq, _ = fam.forward(phi, eps)
    lp = model.log_joint(z)
    logw = (lp - logq).reshape(copies, M)
    return float(np.mean(logsumexp(logw, axis=1) - np.log(M)))


def iwelbo_grad_naive(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    """Self-normalized IW gradient with total derivatives of log(p/q)."""
    fam, phi = fp.family, fp.phi
    batch = _draw(model, fam, phi, rng, cfg.budget)
    if batch is None:
        return _diverged(fam.n_params)
    eps, z, logq, cache, lp, gp = batch
    logw = (lp - logq).reshape(cfg.copies, cfg.M)
    what = softmax(logw, axis=1)
    w = (what / cfg.copies).ravel()
    grad = fam.sample_vjp(phi, eps, gp * w[:, None], cache=cache) - fam.logq_grad_full(phi, eps, weights=w, cache=cache)
    objective = np.mean(logsumexp(logw, axis=1) - np.log(cfg.M))
    return _finalize(grad, objective, cfg.budget)


def iwelbo_grad_dreg(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    """Doubly reparameterized IW gradient: squared normalized weights and a
    frozen-parameter density term (the IW analogue of sticking the landing)."""
    fam, phi = fp.family, fp.phi
    batch = _draw(model, fam, phi, rng, cfg.budget)
    if batch is None:
        return _diverged(fam.n_params)
    eps, z, logq, cache, lp, gp = batch
    logw = (lp - logq).reshape(cfg.copies, cfg.M)
    what = softmax(logw, axis=1)
    w2 = (what**2 / cfg.copies).ravel()
    gq = fam.grad_z_at_sample(phi, eps, cache=cache)
    grad = fam.sample_vjp(phi, eps, (gp - gq) * w2[:, None], cache=cache)
    objective = np.mean(logsumexp(logw, axis=1) - np.log(cfg.M))
    return _finalize(grad, objective, cfg.budget)


_DISPATCH = {
    "elbo_closed_form": elbo_grad_closed_form,
    "elbo_full": elbo_grad_full,
    "elbo_stl": elbo_grad_stl,
    "iwelbo_naive": iwelbo_grad_naive,
    "iwelbo_dreg": iwelbo_grad_dreg,
}


def estimate_gradient(model: TargetModel, fp: FamilyParams, rng: np.random.Generator, cfg: EstimatorConfig) -> GradientEstimate:
    return _DISPATCH[cfg.kind](model, fp, rng, cfg)
