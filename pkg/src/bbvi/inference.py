"""Post-training posterior access and the final evaluation metric.

Evaluation always spends the same oracle budget regardless of M: with
n fresh samples, it averages n/M independent copies of the M-sample
IW-ELBO (M = 1 is the plain ELBO).  Importance-weighted sampling draws M
candidates from q and resamples one in proportion to the self-normalized
importance weights, which yields samples from the implicitly enriched
distribution q_M.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from bbvi.families import FamilyParams
from bbvi.targets import TargetModel


@dataclass
class EvalReport:
    """Final lower-bound estimate with its Monte Carlo standard error."""

    bound_kind: str  # "elbo" when M = 1, else "iwelbo"
    M_sampling: int
    n_fresh_samples: int
    estimate: float
    std_error: float
    oracle_evals: int

    def to_json_dict(self, model: str = "", method: str = "", seed: int | None = None) -> dict:
        return {
            "model": model,
            "method": method,
            "seed": seed,
            "bound_kind": self.bound_kind,
            "M": self.M_sampling,
            "estimate": self.estimate,
            "se": self.std_error,
            "n_fresh_samples": self.n_fresh_samples,
            "oracle_evals": self.oracle_evals,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_json_dict(**kwargs), indent=2)


def evaluate(
    model: TargetModel,
    fp: FamilyParams,
    rng: np.random.Generator,
    M_sampling: int = 1,
    n: int = 10000,
) -> EvalReport:
    """Estimate the (IW-)ELBO from n fresh samples split into n/M copies."""
    if M_sampling < 1:
        raise ValueError("M_sampling must be >= 1")
    if n % M_sampling != 0:
        raise ValueError(f"n ({n}) must be divisible by M_sampling ({M_sampling})")
    fam, phi = fp.family, fp.phi
    copies = n // M_sampling
    eps = rng.standard_normal((n, fam.dim))
    z, logq, _ = fam.forward(phi, eps)
    lp = model.log_joint(z)
    logw = (lp - logq).reshape(copies, M_sampling)
    vals = logsumexp(logw, axis=1) - np.log(M_sampling)
    se = float(np.std(vals, ddof=1) / np.sqrt(copies)) if copies > 1 else 0.0
    return EvalReport(
        bound_kind="elbo" if M_sampling == 1 else "iwelbo",
        M_sampling=M_sampling,
        n_fresh_samples=n,
        estimate=float(np.mean(vals)),
        std_error=se,
        oracle_evals=n,
    )


def iw_sample(
    model: TargetModel,
    fp: FamilyParams,
    rng: np.random.Generator,
    M: int,
    n: int = 1,
) -> np.ndarray:
    """Draw from q_M: M candidates from q, one kept by self-normalized weights.

    Costs M oracle evaluations per returned sample.  Returns shape (dim,)
    for n = 1, else (n, dim).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    fam, phi = fp.family, fp.phi
    eps = rng.standard_normal((n * M, fam.dim))
    z, logq, _ = fam.forward(phi, eps)
    lp = model.log_joint(z)
    logw = (lp - logq).reshape(n, M)
    probs = softmax(logw, axis=1)
    u = rng.random((n, 1))
    idx = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), M - 1)
    chosen = z.reshape(n, M, fam.dim)[np.arange(n), idx]
    return chosen[0] if n == 1 else chosen
