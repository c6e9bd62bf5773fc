"""Six-dimensional state model used by the extended Kalman filter.

The filter state vector stacks the conditional moments and the unknown
frequency:

    x = (X, P, sigma_x, sigma_p, sigma_xp, omega)

The frequency is carried as a static sixth component (zero drift); the
known controls (epsilon, kappa, eta, phi) live in a ModelContext.

All functions broadcast over leading axes: an input of shape (..., 6)
yields drift/diffusion of shape (..., 6) and a Jacobian of shape
(..., 6, 6). Context fields may be scalars or arrays broadcastable
against the leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Index layout of the filter state vector.
IX_X, IX_P, IX_SX, IX_SP, IX_SXP, IX_OMEGA = range(6)


@dataclass(frozen=True)
class ModelContext:
    """Known control/environment parameters entering the state model."""

    epsilon: float
    kappa: float = 1.0
    eta: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.kappa) <= 0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        eta = np.asarray(self.eta)
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


def filter_vector(X=0.0, P=0.0, sigma_x=1.0, sigma_p=1.0, sigma_xp=0.0,
                  omega=0.0) -> np.ndarray:
    """Assemble a filter state vector in the canonical component order."""
    return np.array([X, P, sigma_x, sigma_p, sigma_xp, omega], dtype=float)


def _sigma12(x: np.ndarray, ctx: ModelContext):
    """Projected covariance deviations sigma_1, sigma_2 onto the measured axis."""
    c, s = np.cos(ctx.phi), np.sin(ctx.phi)
    sigma1 = c * (x[..., IX_SX] - 1.0) + s * x[..., IX_SXP]
    sigma2 = s * (x[..., IX_SP] - 1.0) + c * x[..., IX_SXP]
    return sigma1, sigma2


def drift_F(x: np.ndarray, ctx: ModelContext) -> np.ndarray:
    """Deterministic drift of the state model; last component is zero."""
    x = np.asarray(x, dtype=float)
    e, k, eta = ctx.epsilon, ctx.kappa, ctx.eta
    X, P = x[..., IX_X], x[..., IX_P]
    sx, sp, sxp = x[..., IX_SX], x[..., IX_SP], x[..., IX_SXP]
    w = x[..., IX_OMEGA]
    s1, s2 = _sigma12(x, ctx)
    out = np.empty(np.broadcast_shapes(x[..., 0].shape, np.shape(e)) + (6,))
    out[..., IX_X] = -0.5 * k * X + (w - e) * P
    out[..., IX_P] = -(w + e) * X - 0.5 * k * P
    out[..., IX_SX] = 2.0 * (w - e) * sxp - k * (sx - 1.0) - eta * k * s1 ** 2
    out[..., IX_SP] = -2.0 * (w + e) * sxp - k * (sp - 1.0) - eta * k * s2 ** 2
    out[..., IX_SXP] = -(w + e) * sx + (w - e) * sp - k * sxp - eta * k * s1 * s2
    out[..., IX_OMEGA] = 0.0
    return out


def diffusion_G(x: np.ndarray, ctx: ModelContext) -> np.ndarray:
    """Measurement-noise coupling of the state model (nonzero in X, P only)."""
    x = np.asarray(x, dtype=float)
    s1, s2 = _sigma12(x, ctx)
    pref = np.sqrt(ctx.eta * ctx.kappa / 2.0)
    out = np.zeros(np.broadcast_shapes(x[..., 0].shape, np.shape(pref)) + (6,))
    out[..., IX_X] = pref * s1
    out[..., IX_P] = pref * s2
    return out


def observation_H(ctx: ModelContext) -> np.ndarray:
    """Observation row mapping the state to the mean photocurrent rate."""
    pref = np.sqrt(2.0 * ctx.kappa * ctx.eta)
    out = np.zeros(np.shape(pref) + (6,))
    out[..., IX_X] = pref * np.cos(ctx.phi)
    out[..., IX_P] = pref * np.sin(ctx.phi)
    return out


def jacobian_F(x: np.ndarray, ctx: ModelContext) -> np.ndarray:
    """Jacobian of drift_F with respect to the state; last row is zero."""
    x = np.asarray(x, dtype=float)
    e, k, eta = ctx.epsilon, ctx.kappa, ctx.eta
    c, s = np.cos(ctx.phi), np.sin(ctx.phi)
    X, P = x[..., IX_X], x[..., IX_P]
    sx, sp, sxp = x[..., IX_SX], x[..., IX_SP], x[..., IX_SXP]
    w = x[..., IX_OMEGA]
    s1, s2 = _sigma12(x, ctx)
    shape = np.broadcast_shapes(x[..., 0].shape, np.shape(e))
    J = np.zeros(shape + (6, 6))
    J[..., IX_X, IX_X] = -0.5 * k
    J[..., IX_X, IX_P] = w - e
    J[..., IX_X, IX_OMEGA] = P
    J[..., IX_P, IX_X] = -(w + e)
    J[..., IX_P, IX_P] = -0.5 * k
    J[..., IX_P, IX_OMEGA] = -X
    J[..., IX_SX, IX_SX] = -k - 2.0 * k * eta * c * s1
    J[..., IX_SX, IX_SXP] = 2.0 * (w - e) - 2.0 * k * eta * s * s1
    J[..., IX_SX, IX_OMEGA] = 2.0 * sxp
    J[..., IX_SP, IX_SP] = -k - 2.0 * k * eta * s * s2
    J[..., IX_SP, IX_SXP] = -2.0 * (w + e) - 2.0 * k * eta * c * s2
    J[..., IX_SP, IX_OMEGA] = -2.0 * sxp
    J[..., IX_SXP, IX_SX] = -(w + e) - k * eta * c * s2
    J[..., IX_SXP, IX_SP] = (w - e) - k * eta * s * s1
    J[..., IX_SXP, IX_SXP] = -k - k * eta * c * s1 - k * eta * s * s2
    J[..., IX_SXP, IX_OMEGA] = -sx + sp
    return J
