"""Built-in target posteriors defined on unconstrained latent spaces.

Every target exposes the joint log-density ``log p(z, x)`` and its gradient
with respect to the latent vector ``z``, where any constrained variables
(scales, probabilities, simplexes) have already been mapped to R^D through
an invertible transform whose log-Jacobian is folded into the density.
Where the model is tractable, the marginal likelihood ``log p(x)`` is
attached as ``analytic_evidence``.

All densities are finite on the whole of R^D and evaluated in float64.
Evaluations are metered: one oracle evaluation per latent point, whether
the caller asks for the value, the gradient, or both at once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, gammaln

LOG_2PI = float(np.log(2.0 * np.pi))


class TargetError(RuntimeError):
    """The target produced a non-finite value; carries the offending point."""

    def __init__(self, message: str, z: np.ndarray):
        super().__init__(message)
        self.z = np.array(z, copy=True)


class OracleCounter:
    """Monotone evaluation counter, safe under concurrent increments."""

    __slots__ = ("_count", "_lock")

    def __init__(self) -> None:
        self._count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


@dataclass
class TargetModel:
    """An unconstrained-space log-density oracle.

    ``log_joint_fn`` and ``grad_fn`` must accept a batch of points with
    shape (n, dim) and return shape (n,) and (n, dim) respectively.
    """

    name: str
    dim: int
    log_joint_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    analytic_evidence: Optional[float] = None
    counter: OracleCounter = field(default_factory=OracleCounter, repr=False)

    def _prepare(self, z) -> tuple[np.ndarray, bool]:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(
                f"{self.name}: expected points of dimension {self.dim}, got shape {z.shape}"
            )
        if not np.all(np.isfinite(z)):
            raise ValueError(f"{self.name}: non-finite input point")
        return z, single

    def log_joint(self, z):
        """log p(z, x); one oracle evaluation per row of ``z``."""
        zb, single = self._prepare(z)
        self.counter.add(zb.shape[0])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            val = self.log_joint_fn(zb)
        if not np.all(np.isfinite(val)):
            bad = zb[~np.isfinite(val)][0]
            raise TargetError(f"{self.name}: non-finite log density", bad)
        return float(val[0]) if single else val

    def grad_log_joint(self, z):
        """grad_z log p(z, x); one oracle evaluation per row."""
        zb, single = self._prepare(z)
        self.counter.add(zb.shape[0])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            g = self.grad_fn(zb)
        if not np.all(np.isfinite(g)):
            bad = zb[~np.isfinite(g).all(axis=1)][0]
            raise TargetError(f"{self.name}: non-finite gradient", bad)
        return g[0] if single else g

    def log_joint_and_grad(self, z):
        """(log p, grad log p) computed jointly; counts once per row."""
        zb, single = self._prepare(z)
        self.counter.add(zb.shape[0])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            val = self.log_joint_fn(zb)
            g = self.grad_fn(zb)
        if not (np.all(np.isfinite(val)) and np.all(np.isfinite(g))):
            raise TargetError(f"{self.name}: non-finite oracle output", zb[0])
        if single:
            return float(val[0]), g[0]
        return val, g

    @property
    def oracle_count(self) -> int:
        return self.counter.count


def log_joint_and_grad(model: TargetModel, z):
    """Joint value/gradient oracle call (counts as one evaluation per point)."""
    return model.log_joint_and_grad(z)


# ---------------------------------------------------------------------------
# Constraint transforms (unconstrained -> constrained)
# ---------------------------------------------------------------------------


class ConstraintTransform:
    """Invertible map from R^k to a constrained space with tractable Jacobian."""

    kind: str
    unconstrained_dim: int
    constrained_dim: int

    def apply(self, u: np.ndarray) -> tuple[np.ndarray, float]:
        """Return (constrained value, log |det J| of the map)."""
        raise NotImplementedError

    def inverse(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, u: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull a cotangent on the constrained value back to u."""
        raise NotImplementedError

    def grad_logdet(self, u: np.ndarray) -> np.ndarray:
        """Gradient of log |det J| with respect to u."""
        raise NotImplementedError

    def _check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.unconstrained_dim,):
            raise ValueError(
                f"{self.kind}: expected input of shape ({self.unconstrained_dim},), got {u.shape}"
            )
        return u


class PositiveTransform(ConstraintTransform):
    """Elementwise exp onto (0, inf)."""

    kind = "positive"

    def __init__(self, dim: int = 1):
        self.unconstrained_dim = dim
        self.constrained_dim = dim

    def apply(self, u):
        u = self._check(u)
        return np.exp(u), float(np.sum(u))

    def inverse(self, x):
        return np.log(np.asarray(x, dtype=np.float64))

    def vjp(self, u, cotangent):
        u = self._check(u)
        return np.asarray(cotangent) * np.exp(u)

    def grad_logdet(self, u):
        u = self._check(u)
        return np.ones_like(u)


class IntervalTransform(ConstraintTransform):
    """Scaled logistic onto (lower, upper)."""

    kind = "interval"

    def __init__(self, lower: float, upper: float, dim: int = 1):
        if not upper > lower:
            raise ValueError("interval transform requires upper > lower")
        self.lower = float(lower)
        self.upper = float(upper)
        self.unconstrained_dim = dim
        self.constrained_dim = dim

    def apply(self, u):
        u = self._check(u)
        s = expit(u)
        x = self.lower + (self.upper - self.lower) * s
        # d x / d u = (upper - lower) * s * (1 - s)
        logdet = float(np.sum(np.log(self.upper - self.lower) + np.log(s) + np.log1p(-s)))
        return x, logdet

    def inverse(self, x):
        x = np.asarray(x, dtype=np.float64)
        p = (x - self.lower) / (self.upper - self.lower)
        return np.log(p) - np.log1p(-p)

    def vjp(self, u, cotangent):
        u = self._check(u)
        s = expit(u)
        return np.asarray(cotangent) * (self.upper - self.lower) * s * (1.0 - s)

    def grad_logdet(self, u):
        u = self._check(u)
        return 1.0 - 2.0 * expit(u)


class SimplexTransform(ConstraintTransform):
    """Stick-breaking map from R^{K-1} onto the K-simplex.

    Uses the shifted-logit convention so that u = 0 maps to the uniform
    probability vector.  The Jacobian determinant is taken with respect to
    the first K-1 simplex coordinates.
    """

    kind = "simplex"

    def __init__(self, n_categories: int):
        if n_categories < 2:
            raise ValueError("simplex transform needs at least 2 categories")
        self.n_categories = n_categories
        self.unconstrained_dim = n_categories - 1
        self.constrained_dim = n_categories
        # shift making u=0 the uniform point: log of remaining stick count
        self._shift = np.log(np.arange(n_categories - 1, 0, -1, dtype=np.float64))

    def _sticks(self, u):
        z = expit(u - self._shift)
        one_minus = 1.0 - z
        # remaining stick before each break: r[k] = prod_{j<k} (1 - z_j)
        r = np.concatenate(([1.0], np.cumprod(one_minus)))
        p = np.empty(self.n_categories)
        p[:-1] = z * r[:-1]
        p[-1] = r[-1]
        return z, r, p

    def apply(self, u):
        u = self._check(u)
        z, r, p = self._sticks(u)
        logdet = float(np.sum(np.log(z) + np.log1p(-z) + np.log(r[:-1])))
        return p, logdet

    def inverse(self, x):
        p = np.asarray(x, dtype=np.float64)
        # remaining stick as a suffix sum (exact even when the prefix is ~1)
        r = np.cumsum(p[::-1])[::-1]
        z = p[:-1] / r[:-1]
        return np.log(z) - np.log1p(-z) + self._shift

    def vjp(self, u, cotangent):
        u = self._check(u)
        g = np.asarray(cotangent, dtype=np.float64)
        z, r, p = self._sticks(u)
        K = self.n_categories
        # dp_k/dz_k = r_k ; dp_i/dz_k = -p_i / (1 - z_k) for i > k
        gp = np.empty(K - 1)
        tail = np.cumsum((g * p)[::-1])[::-1]  # tail[k] = sum_{i>=k} g_i p_i
        for k in range(K - 1):
            gp[k] = g[k] * r[k] - tail[k + 1] / (1.0 - z[k])
        return gp * z * (1.0 - z)

    def grad_logdet(self, u):
        u = self._check(u)
        z, r, _ = self._sticks(u)
        K = self.n_categories
        # d logdet / dz_k = 1/z_k - 1/(1-z_k) - (#later sticks)/(1-z_k)
        later = np.arange(K - 2, -1, -1, dtype=np.float64)
        dz = 1.0 / z - (1.0 + later) / (1.0 - z)
        return dz * z * (1.0 - z)


def transform_apply(t: ConstraintTransform, unconstrained: np.ndarray):
    """Apply a constraint transform; returns (constrained, log |det J|)."""
    return t.apply(unconstrained)


# ---------------------------------------------------------------------------
# Target constructors
# ---------------------------------------------------------------------------


def standard_normal(dim: int = 2) -> TargetModel:
    """N(0, I) joint; integrates to one so the evidence is exactly zero."""

    def lj(z):
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * dim * LOG_2PI

    def grad(z):
        return -z

    return TargetModel("std_normal", dim, lj, grad, analytic_evidence=0.0)


def gaussian_target(mean, cov, log_evidence: float = 0.0, name: str = "gaussian") -> TargetModel:
    """Gaussian posterior N(mean, cov) shifted by a known evidence constant.

    log p(z, x) = log N(z; mean, cov) + log_evidence, so the posterior is the
    given Gaussian and log p(x) = log_evidence.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    dim = mean.shape[0]
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    norm_const = -0.5 * (dim * LOG_2PI + logdet) + log_evidence

    def lj(z):
        d = z - mean
        return -0.5 * np.einsum("ni,ij,nj->n", d, prec, d) + norm_const

    def grad(z):
        return -(z - mean) @ prec

    m = TargetModel(name, dim, lj, grad, analytic_evidence=float(log_evidence))
    m.posterior_mean = mean  # type: ignore[attr-defined]
    m.posterior_cov = cov  # type: ignore[attr-defined]
    return m


def conjugate_gaussian_1d(x_obs: float = 0.0, prior_var: float = 1.0, noise_var: float = 1.0) -> TargetModel:
    """Scalar conjugate model: z ~ N(0, prior_var), x | z ~ N(z, noise_var).

    Marginally x ~ N(0, prior_var + noise_var), which gives the evidence;
    the posterior is N(x * prior_var / (prior_var + noise_var), pv*nv/(pv+nv)).
    """
    pv, nv = float(prior_var), float(noise_var)
    evidence = -0.5 * (LOG_2PI + np.log(pv + nv)) - 0.5 * x_obs**2 / (pv + nv)

    def lj(z):
        zz = z[:, 0]
        lp = -0.5 * (LOG_2PI + np.log(pv)) - 0.5 * zz**2 / pv
        ll = -0.5 * (LOG_2PI + np.log(nv)) - 0.5 * (x_obs - zz) ** 2 / nv
        return lp + ll

    def grad(z):
        zz = z[:, 0]
        return (-zz / pv + (x_obs - zz) / nv)[:, None]

    m = TargetModel("conj_gaussian_1d", 1, lj, grad, analytic_evidence=float(evidence))
    m.posterior_mean = np.array([x_obs * pv / (pv + nv)])  # type: ignore[attr-defined]
    m.posterior_cov = np.array([[pv * nv / (pv + nv)]])  # type: ignore[attr-defined]
    return m


# Fixed regression data: 8 observations of 2 correlated covariates.
_REG_X = np.array(
    [
        [0.0012, 0.1055],
        [-0.2741, -0.531],
        [-0.4547, -0.7108],
        [0.0601, 0.5172],
        [-0.4922, -0.6109],
        [0.4898, 0.5168],
        [0.1054, -0.2413],
        [-0.0293, 0.22],
    ]
)
_REG_Y = np.array([-0.9822, -0.3272, -1.4103, -1.0615, -1.4386, 0.0206, -0.7064, 0.0784])
_REG_NOISE_VAR = 0.49


def conjugate_regression() -> TargetModel:
    """Bayesian linear regression with N(0, I) prior and known noise.

    y | z ~ N(Xz, sigma^2 I) with the dataset fixed in source, so the
    evidence log N(y; 0, X X^T + sigma^2 I) and the Gaussian posterior are
    both available in closed form.
    """
    X, y, s2 = _REG_X, _REG_Y, _REG_NOISE_VAR
    n, dim = X.shape
    S = X @ X.T + s2 * np.eye(n)
    _, logdetS = np.linalg.slogdet(S)
    evidence = -0.5 * (n * LOG_2PI + logdetS + y @ np.linalg.solve(S, y))
    post_cov = np.linalg.inv(np.eye(dim) + X.T @ X / s2)
    post_mean = post_cov @ X.T @ y / s2
    const = -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * dim * LOG_2PI

    def lj(z):
        resid = y[None, :] - z @ X.T
        return const - 0.5 * np.sum(resid * resid, axis=1) / s2 - 0.5 * np.sum(z * z, axis=1)

    def grad(z):
        resid = y[None, :] - z @ X.T
        return resid @ X / s2 - z

    m = TargetModel("conj_regression", dim, lj, grad, analytic_evidence=float(evidence))
    m.posterior_mean = post_mean  # type: ignore[attr-defined]
    m.posterior_cov = post_cov  # type: ignore[attr-defined]
    return m


_CORR_SDS = np.array([1.0, 2.0, 0.5, 1.5])
_CORR_EVIDENCE = -3.25


def correlated_gaussian() -> TargetModel:
    """Heavily correlated 4-d full-rank Gaussian posterior, known evidence."""
    D = 4
    base = 0.9 ** np.abs(np.subtract.outer(np.arange(D), np.arange(D)))
    cov = base * np.outer(_CORR_SDS, _CORR_SDS)
    mean = np.array([0.5, -1.0, 0.25, 1.5])
    return gaussian_target(mean, cov, log_evidence=_CORR_EVIDENCE, name="corr_gaussian")


# Fixed logistic-regression data: 20 observations, 2 features.
_LOGIT_X = np.array(
    [
        [0.484, -0.0537],
        [0.4668, 0.2023],
        [-0.6886, -1.4778],
        [1.1926, -0.1489],
        [-1.6158, -1.2093],
        [0.1495, 0.5792],
        [-0.3021, 1.8621],
        [-0.1119, -1.2343],
        [0.2322, -1.1269],
        [0.2343, 1.3156],
        [0.1265, 1.1905],
        [-0.3753, 0.9099],
        [-0.4049, 1.627],
        [0.832, -0.2515],
        [-0.3912, 0.4457],
        [0.8913, -1.1747],
        [-0.1025, -1.2281],
        [-0.4809, 1.3044],
        [0.3419, 0.8892],
        [-0.64, -0.5269],
    ]
)
_LOGIT_Y = np.array([0, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1], dtype=np.float64)


def logistic_regression() -> TargetModel:
    """Bayesian logistic regression, N(0, I) prior on (intercept, weights)."""
    A = np.column_stack([np.ones(len(_LOGIT_Y)), _LOGIT_X])  # design with intercept
    y = _LOGIT_Y
    dim = A.shape[1]

    def lj(z):
        logits = z @ A.T
        # sum_i [y*eta - log(1 + e^eta)] with a stable softplus
        ll = np.sum(y[None, :] * logits - np.logaddexp(0.0, logits), axis=1)
        return ll - 0.5 * np.sum(z * z, axis=1) - 0.5 * dim * LOG_2PI

    def grad(z):
        p = expit(z @ A.T)
        return (y[None, :] - p) @ A - z

    return TargetModel("logistic_regression", dim, lj, grad)


def funnel(dim: int = 2, scale_sd: float = 3.0) -> TargetModel:
    """Neal's funnel: v ~ N(0, scale_sd^2), w_k | v ~ N(0, e^v).

    A normalized density, so the evidence is exactly zero.
    """
    if dim < 2:
        raise ValueError("funnel requires dim >= 2")
    k = dim - 1
    sv2 = scale_sd**2

    def lj(z):
        v, w = z[:, 0], z[:, 1:]
        lp_v = -0.5 * (LOG_2PI + np.log(sv2)) - 0.5 * v**2 / sv2
        lp_w = -0.5 * k * LOG_2PI - 0.5 * k * v - 0.5 * np.sum(w * w, axis=1) * np.exp(-v)
        return lp_v + lp_w

    def grad(z):
        v, w = z[:, 0], z[:, 1:]
        e = np.exp(-v)
        g = np.empty_like(z)
        g[:, 0] = -v / sv2 - 0.5 * k + 0.5 * np.sum(w * w, axis=1) * e
        g[:, 1:] = -w * e[:, None]
        return g

    return TargetModel("funnel", dim, lj, grad, analytic_evidence=0.0)


_SCHOOLS_Y = np.array([28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0])
_SCHOOLS_SIGMA = np.array([15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0])
_SCHOOLS_TAU_TRANSFORM = PositiveTransform(1)


def eight_schools() -> TargetModel:
    """Centered eight-schools model; latent = (theta_1..8, mu, log tau).

    theta_j ~ N(mu, tau^2), y_j ~ N(theta_j, sigma_j^2), mu ~ N(0, 5^2),
    tau ~ HalfCauchy(5) mapped through the positive transform (its
    log-Jacobian, log tau, is added to the density).
    """
    y, sig2 = _SCHOOLS_Y, _SCHOOLS_SIGMA**2
    J = len(y)
    mu_var = 25.0
    cauchy_scale2 = 25.0
    const = (
        -0.5 * J * LOG_2PI
        - 0.5 * np.sum(np.log(sig2))
        - 0.5 * (LOG_2PI + np.log(mu_var))
        + np.log(2.0 * 5.0 / np.pi)
    )

    def lj(z):
        theta, mu, u = z[:, :J], z[:, J], z[:, J + 1]
        tau2 = np.exp(2.0 * u)
        ll = -0.5 * np.sum((y[None, :] - theta) ** 2 / sig2[None, :], axis=1)
        lp_theta = -0.5 * J * LOG_2PI - J * u - 0.5 * np.sum((theta - mu[:, None]) ** 2, axis=1) / tau2
        lp_mu = -0.5 * mu**2 / mu_var
        lp_tau = -np.log(tau2 + cauchy_scale2) + u  # half-Cauchy + Jacobian of exp
        return const + ll + lp_theta + lp_mu + lp_tau

    def grad(z):
        theta, mu, u = z[:, :J], z[:, J], z[:, J + 1]
        tau2 = np.exp(2.0 * u)
        g = np.empty_like(z)
        dev = theta - mu[:, None]
        g[:, :J] = (y[None, :] - theta) / sig2[None, :] - dev / tau2[:, None]
        g[:, J] = np.sum(dev, axis=1) / tau2 - mu / mu_var
        g[:, J + 1] = -J + np.sum(dev * dev, axis=1) / tau2 - 2.0 * tau2 / (tau2 + cauchy_scale2) + 1.0
        return g

    return TargetModel("eight_schools", J + 2, lj, grad)


_SIMPLEX_ALPHA = np.array([2.0, 1.0, 1.0, 0.5])
_SIMPLEX_COUNTS = np.array([5.0, 3.0, 1.0, 1.0])


def simplex_toy() -> TargetModel:
    """Dirichlet-multinomial on a 4-simplex via stick-breaking (D = 3).

    p ~ Dirichlet(alpha), counts ~ Multinomial(10, p).  The marginal
    likelihood is the Dirichlet-multinomial mass of the fixed counts.
    """
    alpha, counts = _SIMPLEX_ALPHA, _SIMPLEX_COUNTS
    t = SimplexTransform(len(alpha))
    N = counts.sum()
    log_mult_coef = gammaln(N + 1.0) - np.sum(gammaln(counts + 1.0))
    log_beta = np.sum(gammaln(alpha)) - gammaln(np.sum(alpha))
    log_beta_post = np.sum(gammaln(alpha + counts)) - gammaln(np.sum(alpha + counts))
    evidence = log_mult_coef + log_beta_post - log_beta
    coeff = alpha + counts - 1.0  # exponent on p in the joint

    def lj(z):
        out = np.empty(z.shape[0])
        for i, u in enumerate(z):
            p, logdet = t.apply(u)
            out[i] = log_mult_coef - log_beta + np.sum(coeff * np.log(p)) + logdet
        return out

    def grad(z):
        out = np.empty_like(z)
        for i, u in enumerate(z):
            p, _ = t.apply(u)
            out[i] = t.vjp(u, coeff / p) + t.grad_logdet(u)
        return out

    return TargetModel("simplex_toy", len(alpha) - 1, lj, grad, analytic_evidence=float(evidence))


def quartic() -> TargetModel:
    """Flat-topped scalar target log p = -z^4; curvature vanishes at the mode."""

    def lj(z):
        return -z[:, 0] ** 4

    def grad(z):
        return -4.0 * z**3

    return TargetModel("quartic", 1, lj, grad)


_ZOO_BUILDERS = {
    "conj_regression": conjugate_regression,
    "corr_gaussian": correlated_gaussian,
    "logistic_regression": logistic_regression,
    "funnel": funnel,
    "eight_schools": eight_schools,
    "simplex_toy": simplex_toy,
}

ZOO_NAMES = tuple(_ZOO_BUILDERS)


def make_zoo() -> list[TargetModel]:
    """Fresh instances of every built-in benchmark target."""
    return [build() for build in _ZOO_BUILDERS.values()]


def get_model(name: str) -> TargetModel:
    """Look up a zoo model by name; raises with the valid names listed."""
    try:
        return _ZOO_BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; valid models: {', '.join(ZOO_NAMES)}") from None
