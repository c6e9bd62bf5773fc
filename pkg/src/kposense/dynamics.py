"""Gaussian model of the monitored Kerr parametric oscillator.

Conventions used throughout the package:

- Internal units: the damping rate kappa sets the scale. Times are in
  1/kappa, frequencies and drive amplitudes in kappa. Defaults assume
  kappa = 1.
- The conditional state is Gaussian, described by the quadrature mean
  vector r = (X, P) and the symmetric 2x2 covariance sigma.
- The homodyne phase enters only through period-pi functions, so phases
  are canonicalized to [0, pi).

The normal phase (stable linearized dynamics) is bounded by the critical
drive amplitude eps_c(omega) = sqrt(omega^2 + kappa^2/4); everything in
this package operates below that boundary.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    """Relaxation toward a stationary solution did not reach tolerance."""


def canonical_phase(phi: float) -> float:
    """Reduce a homodyne phase to the canonical interval [0, pi)."""
    return float(np.mod(phi, np.pi))


@dataclass(frozen=True)
class OscillatorParams:
    """Physical and control parameters of the KPO sensor.

    omega    oscillator frequency [kappa]
    epsilon  parametric drive amplitude [kappa]
    kappa    damping rate (unit scale, > 0)
    eta      detection efficiency in [0, 1]
    phi      homodyne phase, stored modulo pi
    """

    omega: float
    epsilon: float
    kappa: float = 1.0
    eta: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.omega == 0.0:
            # The continuous-transition analysis assumes omega > 0; omega = 0
            # is mathematically admissible here but outside that regime.
            warnings.warn("omega = 0 lies on the boundary of the supported "
                          "regime (omega > 0)", stacklevel=2)
        object.__setattr__(self, "phi", canonical_phase(self.phi))

    def replace(self, **kwargs) -> "OscillatorParams":
        fields = dict(omega=self.omega, epsilon=self.epsilon,
                      kappa=self.kappa, eta=self.eta, phi=self.phi)
        fields.update(kwargs)
        return OscillatorParams(**fields)


@dataclass
class GaussianState:
    """Conditional Gaussian state: mean r = (X, P), covariance sigma (2x2)."""

    r: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(2)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(2, 2)

    @classmethod
    def vacuum(cls) -> "GaussianState":
        return cls(np.zeros(2), np.eye(2))

    def is_valid(self, tol: float = 1e-10) -> bool:
        """Symmetric and positive definite covariance, finite mean."""
        if not np.all(np.isfinite(self.r)) or not np.all(np.isfinite(self.sigma)):
            return False
        if abs(self.sigma[0, 1] - self.sigma[1, 0]) > tol:
            return False
        return bool(np.linalg.eigvalsh(self.sigma).min() > 0)

    def copy(self) -> "GaussianState":
        return GaussianState(self.r.copy(), self.sigma.copy())


@dataclass(frozen=True)
class PriorInterval:
    """Prior interval (omega_l, omega_h) for the unknown frequency."""

    omega_l: float
    omega_h: float

    def __post_init__(self):
        if not self.omega_h > self.omega_l >= 0.0:
            raise ValueError(
                f"require omega_h > omega_l >= 0, got ({self.omega_l}, {self.omega_h})")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.omega_l + self.omega_h)


def drift_matrix(params: OscillatorParams) -> np.ndarray:
    """Drift matrix A of the conditional-mean dynamics."""
    w, e, k = params.omega, params.epsilon, params.kappa
    return np.array([[-k / 2.0, w - e],
                     [-w - e, -k / 2.0]])


def measurement_matrix(phi: float) -> np.ndarray:
    """Rank-1 projector B = v v^T onto the monitored quadrature direction."""
    v = np.array([np.cos(phi), np.sin(phi)])
    return np.outer(v, v)


def critical_amplitude(omega: float, kappa: float = 1.0) -> float:
    """Drive amplitude at the continuous phase boundary."""
    if omega < 0:
        raise ValueError(f"omega must be >= 0, got {omega}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return math.sqrt(omega * omega + kappa * kappa / 4.0)


def stability_margin(params: OscillatorParams) -> float:
    """Largest real part of the eigenvalues of the drift matrix.

    Closed form -kappa/2 + Re sqrt(epsilon^2 - omega^2); negative exactly
    when epsilon < critical_amplitude(omega).
    """
    disc = params.epsilon ** 2 - params.omega ** 2
    re_root = math.sqrt(disc) if disc > 0 else 0.0
    return -params.kappa / 2.0 + re_root


def covariance_flow(sigma: np.ndarray, params: OscillatorParams) -> np.ndarray:
    """Right-hand side of the deterministic covariance equation.

    d(sigma)/dt = A sigma + sigma A^T + D - eta*kappa (sigma - I) B (sigma - I)
    with D = kappa * I.
    """
    A = drift_matrix(params)
    B = measurement_matrix(params.phi)
    k = params.kappa
    lin = A @ sigma + sigma @ A.T + k * np.eye(2)
    dev = sigma - np.eye(2)
    return lin - params.eta * k * (dev @ B @ dev)


def _rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def steady_covariance(params: OscillatorParams, tol: float = 1e-12,
                      t_max: float = 200.0, dt: float = 0.01) -> np.ndarray:
    """Stationary conditional covariance, by relaxation of the Riccati flow.

    Integrates the deterministic covariance equation from sigma = I with a
    fixed-step 4th-order scheme until max |d(sigma)/dt| < tol. Raises
    ConvergenceError if tolerance is not met within t_max, which signals
    proximity to the stability boundary.
    """
    if stability_margin(params) >= 0:
        raise ValueError("steady covariance requires a stable drift "
                         f"(epsilon < eps_c); margin = {stability_margin(params):.4g}")
    flow = lambda s: covariance_flow(s, params)
    sigma = np.eye(2)
    n_steps = int(round(t_max / dt))
    for _ in range(n_steps):
        sigma = _rk4_step(flow, sigma, dt)
        sigma = 0.5 * (sigma + sigma.T)
        if np.max(np.abs(flow(sigma))) < tol:
            return sigma
    raise ConvergenceError(
        f"covariance relaxation did not reach tol={tol:g} within t_max={t_max:g} "
        f"(residual {np.max(np.abs(flow(sigma))):.3g}); parameters are likely "
        "too close to the stability boundary")
