"""Classical 1-D advection schemes: upwind, flux-limited, WENO3.

Everything here acts on periodic 1-D arrays of cell values (or cell
averages for the reconstruction). The CFL number mu = c*dt/dx carries the
full time-step scaling, so the numerical fluxes are dimensionless and one
update reads U' = U - (F_{j+1/2} - F_{j-1/2}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AdvectionConfig",
    "upwind_step_1",
    "upwind_step_2",
    "flux_limited_step",
    "weno3_reconstruct",
    "total_variation",
]


@dataclass(frozen=True)
class AdvectionConfig:
    """Constant-speed advection setup; mu = c*dt/dx is the CFL number."""

    c: float
    dt: float
    dx: float

    def __post_init__(self):
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("dt and dx must be positive")

    @property
    def mu(self) -> float:
        return self.c * self.dt / self.dx

    @property
    def stable(self) -> bool:
        """Whether the CFL condition |mu| <= 1 holds."""
        return abs(self.mu) <= 1.0


def _as_field(U):
    U = np.asarray(U, dtype=float)
    if U.ndim != 1:
        raise ValueError("expected a 1-D periodic field")
    return U


def upwind_step_1(U, mu):
    """One step of first-order upwind advection at CFL number mu."""
    U = _as_field(U)
    a = abs(mu)
    return (
        (1.0 - a) * U
        + 0.5 * (mu + a) * np.roll(U, 1)
        - 0.5 * (mu - a) * np.roll(U, -1)
    )


def upwind_step_2(U, mu):
    """One step of second-order upwind advection at CFL number mu."""
    U = _as_field(U)
    a = abs(mu)
    return (
        0.5 * (2.0 - 3.0 * a) * U
        + (mu + a) * np.roll(U, 1)
        - (mu - a) * np.roll(U, -1)
        - 0.25 * (mu + a) * np.roll(U, 2)
        + 0.25 * (mu - a) * np.roll(U, -2)
    )


_LIMITERS = {
    "minmod": lambda theta: np.clip(theta, 0.0, 1.0),
    "vanleer": lambda theta: (theta + np.abs(theta)) / (1.0 + np.abs(theta)),
}


def flux_limited_step(U, mu, limiter="minmod"):
    """One conservative step blending Lax-Wendroff and upwind fluxes.

    The slope ratio theta = (U_j - U_{j-1}) / (U_{j+1} - U_j) feeds the
    limiter phi, which selects the high-order flux where the data is
    smooth and falls back to upwind near kinks. Requires 0 < mu <= 1.
    """
    U = _as_field(U)
    if not 0.0 < mu <= 1.0:
        raise ValueError("flux limiting assumes 0 < mu <= 1")
    try:
        phi_of = _LIMITERS[limiter]
    except KeyError:
        raise ValueError(f"unknown limiter {limiter!r}") from None

    jump = np.roll(U, -1) - U
    upwind_jump = U - np.roll(U, 1)
    denom = np.where(jump == 0.0, 1.0, jump)
    theta = np.where(jump == 0.0, 0.0, upwind_jump / denom)
    phi = phi_of(theta)

    low = mu * U
    high = 0.5 * mu * (U + np.roll(U, -1)) - 0.5 * mu * mu * jump
    F = phi * high + (1.0 - phi) * low
    return U - (F - np.roll(F, 1))


def weno3_reconstruct(ubar, return_weights=False):
    """Interface values u_{j+1/2} from periodic cell averages.

    Two linear candidates (the one-sided stencil {j-1, j} and the centered
    stencil {j, j+1}) are blended with smoothness-weighted coefficients.
    At the linear weights 1/3 and 2/3 the blend collapses to the
    third-order stencil -1/6 u_{j-1} + 5/6 u_j + 1/3 u_{j+1}; near kinks
    the weights shift toward the smoother candidate.
    """
    ubar = _as_field(ubar)
    left = np.roll(ubar, 1)
    right = np.roll(ubar, -1)
    p0 = 1.5 * ubar - 0.5 * left
    p1 = 0.5 * (ubar + right)
    beta0 = (ubar - left) ** 2
    beta1 = (right - ubar) ** 2
    eps = 1e-6
    a0 = (1.0 / 3.0) / (eps + beta0) ** 2
    a1 = (2.0 / 3.0) / (eps + beta1) ** 2
    w0 = a0 / (a0 + a1)
    w1 = a1 / (a0 + a1)
    values = w0 * p0 + w1 * p1
    if return_weights:
        return values, w0, w1
    return values


def total_variation(U):
    """Sum of absolute jumps between periodic neighbours."""
    U = _as_field(U)
    return float(np.sum(np.abs(np.roll(U, -1) - U)))
