import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from uqtse.domain import PhysicsParams
from uqtse.physics import (
    DerivativeBundle,
    arz_h,
    arz_h_prime,
    arz_residual,
    equilibrium_speed,
    lwr_flux,
    lwr_residual,
)

PARAMS = PhysicsParams(rho_max=0.38, u_max=22.86, tau=5.0)


class TestFundamentalDiagram:
    def test_free_flow(self):
        assert equilibrium_speed(0.0, PARAMS) == PARAMS.u_max

    def test_jam(self):
        assert equilibrium_speed(PARAMS.rho_max, PARAMS) == 0.0

    def test_linearity(self):
        assert equilibrium_speed(PARAMS.rho_max / 2, PARAMS) == pytest.approx(PARAMS.u_max / 2)

    def test_flux_endpoints(self):
        assert lwr_flux(0.0, PARAMS) == 0.0
        assert lwr_flux(PARAMS.rho_max, PARAMS) == pytest.approx(0.0, abs=1e-15)

    def test_flux_vertex(self):
        assert lwr_flux(PARAMS.rho_max / 2, PARAMS) == pytest.approx(PARAMS.rho_max * PARAMS.u_max / 4)

    def test_h_values(self):
        assert arz_h(0.0, PARAMS) == 0.0
        assert arz_h(PARAMS.rho_max, PARAMS) == pytest.approx(PARAMS.u_max)
        assert arz_h(0.19, PhysicsParams(0.38, 22.86, 5.0)) == pytest.approx(11.43)

    @given(rho=st.floats(0.0, 0.38, allow_nan=False))
    def test_speed_affine_decreasing(self, rho):
        eps = 1e-6
        assert equilibrium_speed(rho + eps, PARAMS) < equilibrium_speed(rho, PARAMS)

    def test_flux_concavity(self):
        rho = np.linspace(0.0, PARAMS.rho_max, 257)
        q = lwr_flux(rho, PARAMS)
        second_diff = q[2:] - 2 * q[1:-1] + q[:-2]
        assert np.all(second_diff <= 1e-12)


def constant_bundle(rho, u):
    return DerivativeBundle(rho=rho, u=u, d_rho_dt=0.0, d_rho_dx=0.0, d_u_dt=0.0, d_u_dx=0.0)


class TestResiduals:
    def test_constant_field_lwr_zero(self):
        res = lwr_residual(constant_bundle(0.2, 10.0), PARAMS)
        assert res.r1 == 0.0 and res.r2 is None

    def test_constructed_kernel_zero(self):
        rho, u = 0.2, 11.0
        d_rho_dx, d_u_dx = 0.003, -0.05
        d_rho_dt = -(u * d_rho_dx + rho * d_u_dx)
        bundle = DerivativeBundle(rho=rho, u=u, d_rho_dt=d_rho_dt, d_rho_dx=d_rho_dx, d_u_dt=0.0, d_u_dx=d_u_dx)
        assert lwr_residual(bundle, PARAMS).r1 == 0.0

    def test_equilibrium_constant_field_arz_zero(self):
        rho = 0.21
        res = arz_residual(constant_bundle(rho, equilibrium_speed(rho, PARAMS)), PARAMS)
        assert res.r1 == 0.0
        assert res.r2 == 0.0

    def test_constant_offequilibrium_relaxation_only(self):
        rho, u = 0.21, 7.0
        res = arz_residual(constant_bundle(rho, u), PARAMS)
        expected = -(equilibrium_speed(rho, PARAMS) - u) / PARAMS.tau
        assert res.r2 == expected

    def test_relaxation_vanishes_for_huge_tau(self):
        rho, u = 0.21, 7.0
        slow = PhysicsParams(PARAMS.rho_max, PARAMS.u_max, tau=1e12)
        res = arz_residual(constant_bundle(rho, u), slow)
        assert abs(res.r2 - 0.0) <= 1e-9  # convective part is zero here

    def test_deterministic(self):
        bundle = DerivativeBundle(rho=0.2, u=9.0, d_rho_dt=1e-3, d_rho_dx=-2e-3, d_u_dt=0.02, d_u_dx=0.05)
        a = arz_residual(bundle, PARAMS)
        b = arz_residual(bundle, PARAMS)
        assert a.r1 == b.r1 and a.r2 == b.r2

    def test_missing_tau_rejected(self):
        with pytest.raises(ValueError):
            arz_residual(constant_bundle(0.2, 5.0), PhysicsParams(0.38, 22.86))

    def test_validate_finite(self):
        bundle = constant_bundle(np.nan, 5.0)
        with pytest.raises(ValueError):
            bundle.validate_finite()


class ManufacturedField:
    """rho = 0.1 + 0.05 sin(2 pi x/L) cos(2 pi t/T) with u = U_eq(rho);
    all partials derived symbolically, evaluated at arbitrary points."""

    def __init__(self, params: PhysicsParams, L=1000.0, T=300.0):
        x, t = sp.symbols("x t", real=True)
        rho = sp.Rational(1, 10) + sp.Rational(1, 20) * sp.sin(2 * sp.pi * x / L) * sp.cos(2 * sp.pi * t / T)
        u = params.u_max * (1 - rho / params.rho_max)
        self.params = params
        self.fns = {
            "rho": sp.lambdify((x, t), rho),
            "u": sp.lambdify((x, t), u),
            "d_rho_dt": sp.lambdify((x, t), sp.diff(rho, t)),
            "d_rho_dx": sp.lambdify((x, t), sp.diff(rho, x)),
            "d_u_dt": sp.lambdify((x, t), sp.diff(u, t)),
            "d_u_dx": sp.lambdify((x, t), sp.diff(u, x)),
        }
        # independent symbolic oracles for the residuals themselves
        r1 = sp.diff(rho, t) + sp.diff(rho * u, x)
        h = params.u_max * rho / params.rho_max
        r2 = sp.diff(u + h, t) + u * sp.diff(u + h, x) - (u - u) / params.tau
        # the relaxation term is exactly zero for u = U_eq(rho)
        self.r1_fn = sp.lambdify((x, t), sp.simplify(r1))
        self.r2_fn = sp.lambdify((x, t), sp.simplify(r2))

    def bundle(self, x, t) -> DerivativeBundle:
        return DerivativeBundle(**{k: np.asarray(f(x, t), dtype=float) for k, f in self.fns.items()})


@pytest.fixture(scope="module")
def field():
    return ManufacturedField(PARAMS)


@pytest.fixture(scope="module")
def points():
    rng = np.random.default_rng(19)
    return rng.uniform(0, 1000.0, 200), rng.uniform(0, 300.0, 200)


class TestManufacturedSolution:

    def test_lwr_residual_matches_symbolic_oracle(self, field, points):
        x, t = points
        res = lwr_residual(field.bundle(x, t), PARAMS)
        expected = field.r1_fn(x, t)
        assert np.max(np.abs(res.r1 - expected)) <= 1e-10

    def test_arz_residual_matches_symbolic_oracle(self, field, points):
        x, t = points
        res = arz_residual(field.bundle(x, t), PARAMS)
        assert np.max(np.abs(res.r1 - field.r1_fn(x, t))) <= 1e-10
        assert np.max(np.abs(res.r2 - field.r2_fn(x, t))) <= 1e-10

    def test_h_prime_constant(self, field):
        assert arz_h_prime(PARAMS) == pytest.approx(PARAMS.u_max / PARAMS.rho_max, rel=1e-15)
