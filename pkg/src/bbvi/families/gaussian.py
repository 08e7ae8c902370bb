"""Gaussian variational families (full-rank and diagonal).

The full-rank family stores the mean and the Cholesky factor of the
covariance, with the diagonal of L kept in log-space so any flat parameter
vector yields a valid positive-definite covariance.  All derivatives are
written out by hand; the log-diagonal storage shows up as an extra factor
of L_jj on diagonal-entry gradients.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

import bbvi.families as _base

LOG_2PI = _base.LOG_2PI


def _as_batch(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


class FullRankGaussian(_base.Family):
    """q = N(mu, L L^T); phi = [mu, log diag L, strict lower triangle of L]."""

    kind = "gaussian_full"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = dim
        self.n_params = 2 * dim + dim * (dim - 1) // 2
        self._tril = np.tril_indices(dim, k=-1)

    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def pack(self, mu: np.ndarray, L: np.ndarray) -> np.ndarray:
        d = self.dim
        phi = np.empty(self.n_params)
        phi[:d] = mu
        phi[d : 2 * d] = np.log(np.diag(L))
        phi[2 * d :] = L[self._tril]
        return phi

    def unpack(self, phi) -> tuple[np.ndarray, np.ndarray]:
        d = self.dim
        mu = phi[:d]
        L = np.zeros((d, d))
        L[np.diag_indices(d)] = np.exp(phi[d : 2 * d])
        L[self._tril] = phi[2 * d :]
        return mu, L

    def forward(self, phi, eps):
        mu, L = self.unpack(phi)
        eps = _as_batch(eps)
        z = mu + eps @ L.T
        logq = -0.5 * np.sum(eps * eps, axis=1) - 0.5 * self.dim * LOG_2PI - np.sum(phi[self.dim : 2 * self.dim])
        return z, logq, (mu, L)

    def inverse(self, phi, z):
        mu, L = self.unpack(phi)
        zb = _as_batch(z)
        eps = solve_triangular(L, (zb - mu).T, lower=True).T
        return eps[0] if np.ndim(z) == 1 else eps

    def log_density(self, phi, z):
        mu, L = self.unpack(phi)
        zb = _as_batch(z)
        w = solve_triangular(L, (zb - mu).T, lower=True).T
        out = -0.5 * np.sum(w * w, axis=1) - 0.5 * self.dim * LOG_2PI - np.sum(phi[self.dim : 2 * self.dim])
        return float(out[0]) if np.ndim(z) == 1 else out

    def grad_z_log_density(self, phi, z):
        mu, L = self.unpack(phi)
        zb = _as_batch(z)
        w = solve_triangular(L, (zb - mu).T, lower=True)
        g = -solve_triangular(L.T, w, lower=False).T
        return g[0] if np.ndim(z) == 1 else g

    def grad_z_at_sample(self, phi, eps, cache=None):
        mu, L = cache if cache is not None else self.unpack(phi)
        eps = _as_batch(eps)
        # z - mu = L eps, so Sigma^{-1}(z - mu) = L^{-T} eps
        return -solve_triangular(L.T, eps.T, lower=False).T

    def sample_vjp(self, phi, eps, cotangent, cache=None, per_sample=False):
        d = self.dim
        mu, L = cache if cache is not None else self.unpack(phi)
        eps = _as_batch(eps)
        c = _as_batch(cotangent)
        diag = np.diag(L)
        if per_sample:
            n = eps.shape[0]
            out = np.empty((n, self.n_params))
            out[:, :d] = c
            dL = c[:, :, None] * eps[:, None, :]  # (n, d, d) outer products
            out[:, d : 2 * d] = dL[:, np.arange(d), np.arange(d)] * diag
            out[:, 2 * d :] = dL[:, self._tril[0], self._tril[1]]
            return out
        out = np.empty(self.n_params)
        out[:d] = c.sum(axis=0)
        dL = c.T @ eps
        out[d : 2 * d] = np.diag(dL) * diag
        out[2 * d :] = dL[self._tril]
        return out

    def logq_grad_full(self, phi, eps, weights=None, cache=None, per_sample=False):
        # log q_phi(z_phi(eps)) = -D/2 log 2pi - sum log L_jj - |eps|^2/2:
        # the total parameter derivative is the deterministic -dH/dphi.
        d = self.dim
        eps = _as_batch(eps)
        g = np.zeros(self.n_params)
        g[d : 2 * d] = -1.0
        if per_sample:
            return np.tile(g, (eps.shape[0], 1))
        scale = eps.shape[0] if weights is None else float(np.sum(weights))
        return scale * g

    def entropy(self, phi) -> float:
        return 0.5 * self.dim * (LOG_2PI + 1.0) + float(np.sum(phi[self.dim : 2 * self.dim]))

    def entropy_grad(self, phi) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[self.dim : 2 * self.dim] = 1.0
        return g


class DiagGaussian(_base.Family):
    """q = N(mu, diag(sigma^2)); phi = [mu, log sigma]."""

    kind = "gaussian_diag"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = dim
        self.n_params = 2 * dim

    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def unpack(self, phi) -> tuple[np.ndarray, np.ndarray]:
        return phi[: self.dim], np.exp(phi[self.dim :])

    def forward(self, phi, eps):
        mu, sigma = self.unpack(phi)
        eps = _as_batch(eps)
        z = mu + eps * sigma
        logq = -0.5 * np.sum(eps * eps, axis=1) - 0.5 * self.dim * LOG_2PI - np.sum(phi[self.dim :])
        return z, logq, (mu, sigma)

    def inverse(self, phi, z):
        mu, sigma = self.unpack(phi)
        zb = _as_batch(z)
        eps = (zb - mu) / sigma
        return eps[0] if np.ndim(z) == 1 else eps

    def log_density(self, phi, z):
        mu, sigma = self.unpack(phi)
        zb = _as_batch(z)
        w = (zb - mu) / sigma
        out = -0.5 * np.sum(w * w, axis=1) - 0.5 * self.dim * LOG_2PI - np.sum(phi[self.dim :])
        return float(out[0]) if np.ndim(z) == 1 else out

    def grad_z_log_density(self, phi, z):
        mu, sigma = self.unpack(phi)
        zb = _as_batch(z)
        g = -(zb - mu) / sigma**2
        return g[0] if np.ndim(z) == 1 else g

    def grad_z_at_sample(self, phi, eps, cache=None):
        mu, sigma = cache if cache is not None else self.unpack(phi)
        return -_as_batch(eps) / sigma

    def sample_vjp(self, phi, eps, cotangent, cache=None, per_sample=False):
        d = self.dim
        mu, sigma = cache if cache is not None else self.unpack(phi)
        eps = _as_batch(eps)
        c = _as_batch(cotangent)
        if per_sample:
            return np.concatenate([c, c * eps * sigma], axis=1)
        out = np.empty(self.n_params)
        out[:d] = c.sum(axis=0)
        out[d:] = np.sum(c * eps, axis=0) * sigma
        return out

    def logq_grad_full(self, phi, eps, weights=None, cache=None, per_sample=False):
        d = self.dim
        eps = _as_batch(eps)
        g = np.zeros(self.n_params)
        g[d:] = -1.0
        if per_sample:
            return np.tile(g, (eps.shape[0], 1))
        scale = eps.shape[0] if weights is None else float(np.sum(weights))
        return scale * g

    def entropy(self, phi) -> float:
        return 0.5 * self.dim * (LOG_2PI + 1.0) + float(np.sum(phi[self.dim :]))

    def entropy_grad(self, phi) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[self.dim :] = 1.0
        return g
