"""Variational families with reparameterized sampling and hand-derived gradients.

Every family maps base noise eps ~ N(0, I) through a parametric map
z = T_phi(eps) and exposes the building blocks the gradient estimators
need: forward/inverse transforms, exact densities, vector-Jacobian
products of the sample path, and the two entropy-gradient integrands
(total derivative and the sticking-the-landing variant that freezes the
density parameters under differentiation).

Parameter vectors are flat float64 arrays; the family object carries the
immutable structure (kind, dimension, architecture) and all operations
are pure functions of (phi, eps).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class UnsupportedFamilyError(TypeError):
    """Operation not defined for this family (e.g. closed-form entropy of a flow)."""


class Family:
    """Base interface; see concrete families for the parameter layouts."""

    kind: str
    dim: int
    n_params: int

    # -- construction -------------------------------------------------------

    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        raise NotImplementedError

    # -- sampling path ------------------------------------------------------

    def sample(self, phi: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """z = T_phi(eps); accepts (dim,) or (n, dim)."""
        z, _, _ = self.forward(phi, np.atleast_2d(eps))
        return z[0] if np.ndim(eps) == 1 else z

    def forward(self, phi, eps) -> tuple[np.ndarray, np.ndarray, object]:
        """(z, log q(z) along the forward path, cache) for a batch of eps."""
        raise NotImplementedError

    def inverse(self, phi, z) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, phi, z) -> np.ndarray:
        """Exact log q_phi at arbitrary points (inverse path for flows)."""
        raise NotImplementedError

    def grad_z_log_density(self, phi, z) -> np.ndarray:
        """d log q_phi(z) / dz at arbitrary points, parameters fixed."""
        raise NotImplementedError

    def grad_z_at_sample(self, phi, eps, cache=None) -> np.ndarray:
        """d log q_theta(z)/dz at z = T_phi(eps) with theta frozen at phi.

        Evaluated through the inverse-path density; at a sampled point the
        inverse retraces the forward pass, so the cache can stand in for an
        explicit inverse recomputation.
        """
        raise NotImplementedError

    # -- parameter gradients -------------------------------------------------

    def sample_vjp(self, phi, eps, cotangent, cache=None, per_sample: bool = False) -> np.ndarray:
        """cotangent^T dT_phi(eps)/dphi, summed over the batch.

        With ``per_sample=True`` returns the (n, n_params) stack instead of
        the batch sum.
        """
        raise NotImplementedError

    def logq_grad_full(self, phi, eps, weights=None, cache=None, per_sample: bool = False) -> np.ndarray:
        """Total derivative d/dphi log q_phi(T_phi(eps)), weighted batch sum."""
        raise NotImplementedError

    def logq_grad_stl(self, phi, eps, weights=None, cache=None, per_sample: bool = False) -> np.ndarray:
        """Gradient through the sample path only (density parameters frozen)."""
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        g = self.grad_z_at_sample(phi, eps, cache=cache)
        if per_sample:
            return self.sample_vjp(phi, eps, g, cache=cache, per_sample=True)
        if weights is not None:
            g = g * np.asarray(weights, dtype=np.float64)[:, None]
        return self.sample_vjp(phi, eps, g, cache=cache)

    # -- entropy (Gaussians only) --------------------------------------------

    def entropy(self, phi) -> float:
        raise UnsupportedFamilyError(f"{self.kind} has no closed-form entropy")

    def entropy_grad(self, phi) -> np.ndarray:
        raise UnsupportedFamilyError(f"{self.kind} has no closed-form entropy")

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


@dataclass
class FamilyParams:
    """A family together with a concrete flat parameter vector."""

    family: Family
    phi: np.ndarray

    def replace(self, phi: np.ndarray) -> "FamilyParams":
        return replace(self, phi=phi)

    @property
    def dim(self) -> int:
        return self.family.dim


from bbvi.families.gaussian import DiagGaussian, FullRankGaussian  # noqa: E402
from bbvi.families.flow import RealNVP  # noqa: E402

_KIND_CODES = {"gaussian_full": 0, "gaussian_diag": 1, "flow": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def make_family(kind: str, dim: int, n_layers: int = 10, n_hidden: int = 32) -> Family:
    if kind == "gaussian_full":
        return FullRankGaussian(dim)
    if kind == "gaussian_diag":
        return DiagGaussian(dim)
    if kind == "flow":
        return RealNVP(dim, n_layers=n_layers, n_hidden=n_hidden)
    raise ValueError(f"unknown family kind {kind!r}; expected one of {sorted(_KIND_CODES)}")


def init_standard(
    kind: str,
    dim: int,
    n_layers: int = 10,
    n_hidden: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> FamilyParams:
    """Standard initialization: q ~= N(0, I) for every family.

    Gaussians start at mean zero, identity scale.  Flow network weights are
    drawn N(0, 0.001^2) so the composed map is near-identity on the
    standard-normal base.
    """
    fam = make_family(kind, dim, n_layers=n_layers, n_hidden=n_hidden)
    return FamilyParams(fam, fam.init_params(rng=rng))


_MAGIC = b"BBVI"


def save_params(path, fp: FamilyParams) -> None:
    """Checkpoint: magic, (kind, D, T, H) header, then little-endian float64 phi."""
    fam = fp.family
    t = getattr(fam, "n_layers", 0)
    h = getattr(fam, "n_hidden", 0)
    header = struct.pack("<4sBiii q", _MAGIC, _KIND_CODES[fam.kind], fam.dim, t, h, fp.phi.size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(fp.phi, dtype="<f8").tobytes())


def load_params(path) -> FamilyParams:
    with open(path, "rb") as f:
        raw = f.read()
    head_size = struct.calcsize("<4sBiii q")
    if len(raw) < head_size or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    _, code, dim, t, h, n = struct.unpack("<4sBiii q", raw[:head_size])
    fam = make_family(_KIND_NAMES[code], dim, n_layers=t or 10, n_hidden=h or 32)
    phi = np.frombuffer(raw[head_size:], dtype="<f8", count=n).astype(np.float64)
    if phi.size != fam.n_params:
        raise ValueError(f"{path}: expected {fam.n_params} parameters, found {phi.size}")
    return FamilyParams(fam, phi)


__all__ = [
    "Family",
    "FamilyParams",
    "FullRankGaussian",
    "DiagGaussian",
    "RealNVP",
    "UnsupportedFamilyError",
    "make_family",
    "init_standard",
    "save_params",
    "load_params",
]
