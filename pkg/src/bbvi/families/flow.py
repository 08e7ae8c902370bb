"""Real-NVP normalizing flow with hand-derived forward and reverse passes.

Each coupling layer applies two affine transitions with an alternating
first-half mask: transition one passes z[:d] through untouched and maps
z[d:] to z[d:] * exp(s) + t, transition two mirrors the roles.  Scale and
translation come from one fully connected network per transition with
layer sizes [d_in, H, H, 2*d_out], leaky-ReLU (slope 0.01) hidden
activations, a tanh head for s and a linear head for t.  The log-Jacobian
of a transition is the sum of its s outputs.

No autodiff: the parameter-cotangent products and the input gradient of
the inverse-path density are explicit reverse passes over cached
activations, each checked against finite differences in the test suite.
The cache keeps the leaky-ReLU masks and weight views from the forward
sweep so the reverse sweeps do no re-computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

import bbvi.families as _base

LOG_2PI = _base.LOG_2PI
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class _Transition:
    keep: slice
    tr: slice
    d_in: int
    d_out: int
    sW1: slice
    sb1: slice
    sW2: slice
    sb2: slice
    sW3: slice
    sb3: slice


@dataclass
class _TransitionCache:
    u: np.ndarray
    v: np.ndarray  # untransformed value of the affine half (forward input)
    m1: np.ndarray  # leaky-ReLU derivative masks
    h1: np.ndarray
    m2: np.ndarray
    h2: np.ndarray
    s: np.ndarray
    t: np.ndarray
    es: np.ndarray  # exp(s)
    weights: tuple


class RealNVP(_base.Family):
    """Coupling-based flow on a standard-normal base distribution."""

    kind = "flow"

    def __init__(self, dim: int, n_layers: int = 10, n_hidden: int = 32):
        if dim < 2:
            raise ValueError("real-NVP coupling needs dim >= 2 (two nonempty halves)")
        if n_layers < 1 or n_hidden < 1:
            raise ValueError("n_layers and n_hidden must be positive")
        self.dim = dim
        self.n_layers = n_layers
        self.n_hidden = n_hidden
        d = (dim + 1) // 2  # first half gets the extra coordinate when dim is odd
        H = n_hidden
        self._transitions: list[_Transition] = []
        offset = 0
        for _ in range(n_layers):
            for keep, tr in ((slice(0, d), slice(d, dim)), (slice(d, dim), slice(0, d))):
                d_in = keep.stop - keep.start
                d_out = tr.stop - tr.start
                sizes = (d_in * H, H, H * H, H, H * 2 * d_out, 2 * d_out)
                slices = []
                for n in sizes:
                    slices.append(slice(offset, offset + n))
                    offset += n
                self._transitions.append(_Transition(keep, tr, d_in, d_out, *slices))
        self.n_params = offset

    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(0)
        return rng.normal(scale=1e-3, size=self.n_params)

    def _weights(self, phi: np.ndarray, tr: _Transition):
        H = self.n_hidden
        return (
            phi[tr.sW1].reshape(tr.d_in, H),
            phi[tr.sb1],
            phi[tr.sW2].reshape(H, H),
            phi[tr.sb2],
            phi[tr.sW3].reshape(H, 2 * tr.d_out),
            phi[tr.sb3],
        )

    def _net(self, phi, tr: _Transition, u: np.ndarray):
        W1, b1, W2, b2, W3, b3 = weights = self._weights(phi, tr)
        pre1 = u @ W1
        pre1 += b1
        m1 = np.where(pre1 > 0.0, 1.0, LEAKY_SLOPE)
        h1 = pre1 * m1
        pre2 = h1 @ W2
        pre2 += b2
        m2 = np.where(pre2 > 0.0, 1.0, LEAKY_SLOPE)
        h2 = pre2 * m2
        raw = h2 @ W3
        raw += b3
        s = np.tanh(raw[:, : tr.d_out])
        t = raw[:, tr.d_out :]
        return m1, h1, m2, h2, s, t, weights

    # -- forward / inverse ------------------------------------------------

    def forward(self, phi, eps):
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        x = np.array(eps, copy=True)
        logdet = np.zeros(x.shape[0])
        cache = []
        for tr in self._transitions:
            u = x[:, tr.keep].copy()
            v = x[:, tr.tr].copy()
            m1, h1, m2, h2, s, t, weights = self._net(phi, tr, u)
            es = np.exp(s)
            x[:, tr.tr] = v * es + t
            logdet += np.sum(s, axis=1)
            cache.append(_TransitionCache(u, v, m1, h1, m2, h2, s, t, es, weights))
        logq = -0.5 * np.sum(eps * eps, axis=1) - 0.5 * self.dim * LOG_2PI - logdet
        return x, logq, cache

    def _inverse_with_cache(self, phi, z):
        x = np.array(np.atleast_2d(np.asarray(z, dtype=np.float64)), copy=True)
        logdet_inv = np.zeros(x.shape[0])
        cache: list[Optional[_TransitionCache]] = [None] * len(self._transitions)
        for idx in range(len(self._transitions) - 1, -1, -1):
            tr = self._transitions[idx]
            u = x[:, tr.keep].copy()
            vp = x[:, tr.tr].copy()
            m1, h1, m2, h2, s, t, weights = self._net(phi, tr, u)
            es = np.exp(s)
            v = (vp - t) / es
            x[:, tr.tr] = v
            logdet_inv -= np.sum(s, axis=1)
            cache[idx] = _TransitionCache(u, v, m1, h1, m2, h2, s, t, es, weights)
        return x, logdet_inv, cache

    def inverse(self, phi, z):
        eps, _, _ = self._inverse_with_cache(phi, z)
        return eps[0] if np.ndim(z) == 1 else eps

    def log_density(self, phi, z):
        eps, logdet_inv, _ = self._inverse_with_cache(phi, z)
        out = -0.5 * np.sum(eps * eps, axis=1) - 0.5 * self.dim * LOG_2PI + logdet_inv
        return float(out[0]) if np.ndim(z) == 1 else out

    # -- reverse passes ----------------------------------------------------

    def _param_backward(self, phi, cache, z_cot, logdet_cot, per_sample=False):
        """Accumulate cotangents through the forward pass into parameter space.

        ``z_cot`` is a cotangent on the flow output (n, dim) or None;
        ``logdet_cot`` a cotangent on the forward log-Jacobian (n,) or None.
        """
        n = cache[0].u.shape[0]
        dX = np.zeros((n, self.dim)) if z_cot is None else np.array(z_cot, copy=True)
        ld = None if logdet_cot is None else np.asarray(logdet_cot, dtype=np.float64)[:, None]
        grad = np.zeros((n, self.n_params)) if per_sample else np.zeros(self.n_params)
        for idx in range(len(self._transitions) - 1, -1, -1):
            tr = self._transitions[idx]
            c = cache[idx]
            W1, _, W2, _, W3, _ = c.weights
            dvp = dX[:, tr.tr]
            du = dX[:, tr.keep].copy()
            ds = dvp * c.v * c.es
            if ld is not None:
                ds += ld
            dv = dvp * c.es
            draw = np.empty((n, 2 * tr.d_out))
            np.multiply(ds, 1.0 - c.s * c.s, out=draw[:, : tr.d_out])
            draw[:, tr.d_out :] = dvp
            dpre2 = (draw @ W3.T) * c.m2
            dpre1 = (dpre2 @ W2.T) * c.m1
            if per_sample:
                grad[:, tr.sW1] = np.einsum("ni,nj->nij", c.u, dpre1).reshape(n, -1)
                grad[:, tr.sb1] = dpre1
                grad[:, tr.sW2] = np.einsum("ni,nj->nij", c.h1, dpre2).reshape(n, -1)
                grad[:, tr.sb2] = dpre2
                grad[:, tr.sW3] = np.einsum("ni,nj->nij", c.h2, draw).reshape(n, -1)
                grad[:, tr.sb3] = draw
            else:
                H = self.n_hidden
                np.matmul(c.u.T, dpre1, out=grad[tr.sW1].reshape(tr.d_in, H))
                np.sum(dpre1, axis=0, out=grad[tr.sb1])
                np.matmul(c.h1.T, dpre2, out=grad[tr.sW2].reshape(H, H))
                np.sum(dpre2, axis=0, out=grad[tr.sb2])
                np.matmul(c.h2.T, draw, out=grad[tr.sW3].reshape(H, 2 * tr.d_out))
                np.sum(draw, axis=0, out=grad[tr.sb3])
            dX[:, tr.keep] = du + dpre1 @ W1.T
            dX[:, tr.tr] = dv
        return grad

    def _input_grad_inverse_path(self, phi, eps_hat, cache):
        """d/dz of log q_eps(T^-1(z)) + log|det grad T^-1(z)| over cached activations.

        The inverse pass visits transitions last-to-first, so its reverse
        sweep runs first-to-last, seeded with the base-density gradient.
        """
        dX = -np.asarray(eps_hat, dtype=np.float64).copy()
        for idx, tr in enumerate(self._transitions):
            c = cache[idx]
            W1, _, W2, _, W3, _ = c.weights
            dv = dX[:, tr.tr]
            du = dX[:, tr.keep].copy()
            dvp = dv / c.es
            ds = -dv * c.v - 1.0  # v = (v'-t)e^{-s}; the inverse log-det adds -1 per coord
            draw = np.concatenate([ds * (1.0 - c.s * c.s), -dvp], axis=1)
            dpre2 = (draw @ W3.T) * c.m2
            dpre1 = (dpre2 @ W2.T) * c.m1
            dX[:, tr.keep] = du + dpre1 @ W1.T
            dX[:, tr.tr] = dvp
        return dX

    # -- family interface ----------------------------------------------------

    def grad_z_log_density(self, phi, z):
        zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
        eps_hat, _, cache = self._inverse_with_cache(phi, zb)
        g = self._input_grad_inverse_path(phi, eps_hat, cache)
        return g[0] if np.ndim(z) == 1 else g

    def grad_z_at_sample(self, phi, eps, cache=None):
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if cache is None:
            _, _, cache = self.forward(phi, eps)
        # at z = T_phi(eps) the inverse retraces the forward activations, so
        # the frozen-parameter density gradient reuses them directly
        return self._input_grad_inverse_path(phi, eps, cache)

    def sample_vjp(self, phi, eps, cotangent, cache=None, per_sample=False):
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        c = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if cache is None:
            _, _, cache = self.forward(phi, eps)
        return self._param_backward(phi, cache, c, None, per_sample=per_sample)

    def logq_grad_full(self, phi, eps, weights=None, cache=None, per_sample=False):
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if cache is None:
            _, _, cache = self.forward(phi, eps)
        # log q_phi(T_phi(eps)) = log q_eps(eps) - logdet(phi, eps)
        n = eps.shape[0]
        if per_sample:
            return self._param_backward(phi, cache, None, -np.ones(n), per_sample=True)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        return self._param_backward(phi, cache, None, -w)

    def __repr__(self) -> str:
        return f"RealNVP(dim={self.dim}, n_layers={self.n_layers}, n_hidden={self.n_hidden})"
