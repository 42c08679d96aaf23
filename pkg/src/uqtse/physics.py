"""Greenshields fundamental diagram and first/second-order model residuals.

All functions are stateless and written with plain arithmetic so they accept
floats, numpy arrays, or autodiff tensors (anything supporting +, -, *, /).
Parameter objects only need `rho_max`, `u_max`, and (for the second-order
model) `tau` attributes, so learnable parameters work as well as
:class:`~uqtse.domain.PhysicsParams`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

__all__ = [
    "DerivativeBundle",
    "ResidualValues",
    "equilibrium_speed",
    "lwr_flux",
    "arz_h",
    "arz_h_prime",
    "lwr_residual",
    "arz_residual",
]


@dataclass
class DerivativeBundle:
    """State values and their first partial derivatives at a point (batch).

    Derivatives are with respect to physical coordinates (meters, seconds).
    """

    rho: Any
    u: Any
    d_rho_dt: Any
    d_rho_dx: Any
    d_u_dt: Any
    d_u_dx: Any

    def validate_finite(self) -> None:
        """Check finiteness for plain numeric contents (no-op for tensors)."""
        for name in ("rho", "u", "d_rho_dt", "d_rho_dx", "d_u_dt", "d_u_dx"):
            val = getattr(self, name)
            if isinstance(val, (int, float, np.ndarray, np.floating)):
                if not np.all(np.isfinite(val)):
                    raise ValueError(f"DerivativeBundle.{name} contains non-finite values")


@dataclass
class ResidualValues:
    """Conservation residual r1 (veh/m/s) and, for the second-order model,
    the momentum residual r2 (m/s^2)."""

    r1: Any
    r2: Optional[Any] = None


def equilibrium_speed(rho, params):
    """Greenshields speed u = u_max * (1 - rho / rho_max).

    Not clamped: callers that need a physical speed clamp at 0 themselves.
    """
    return params.u_max * (1.0 - rho / params.rho_max)


def lwr_flux(rho, params):
    """Flow q = rho * U_eq(rho); concave with capacity at rho_max / 2."""
    return rho * equilibrium_speed(rho, params)


def arz_h(rho, params):
    """Hesitation function h(rho) = U_eq(0) - U_eq(rho) = u_max * rho / rho_max."""
    return params.u_max * rho / params.rho_max


def arz_h_prime(params):
    """dh/drho, constant for the Greenshields closure."""
    return params.u_max / params.rho_max


def lwr_residual(bundle: DerivativeBundle, params) -> ResidualValues:
    """Conservation-law residual with the flux divergence expanded by the
    product rule so only first derivatives are consumed:

        r1 = drho/dt + u * drho/dx + rho * du/dx
    """
    r1 = bundle.d_rho_dt + bundle.u * bundle.d_rho_dx + bundle.rho * bundle.d_u_dx
    return ResidualValues(r1=r1)


def arz_residual(bundle: DerivativeBundle, params) -> ResidualValues:
    """Residual pair for the second-order model.

    r1 is the conservation residual; r2 expands d/dt(u + h) + u * d/dx(u + h)
    with the constant h' pulled through, minus the relaxation source:

        r2 = (du/dt + h' * drho/dt) + u * (du/dx + h' * drho/dx)
             - (U_eq(rho) - u) / tau
    """
    tau = params.tau
    if tau is None:
        raise ValueError("params.tau is required for the second-order residual")
    r1 = lwr_residual(bundle, params).r1
    hp = arz_h_prime(params)
    convective = (bundle.d_u_dt + hp * bundle.d_rho_dt) + bundle.u * (bundle.d_u_dx + hp * bundle.d_rho_dx)
    relaxation = (equilibrium_speed(bundle.rho, params) - bundle.u) / tau
    return ResidualValues(r1=r1, r2=convective - relaxation)
