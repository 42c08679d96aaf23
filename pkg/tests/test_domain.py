import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from uqtse.domain import (
    CollocationSet,
    Grid,
    Normalization,
    ObservationSet,
    ParamDistribution,
    PhysicsParams,
    SpaceTimeDomain,
    StateField,
    TruncatedGaussian,
    sample_params,
)


def make_grid(L=1000.0, T=300.0, nx=100, nt=50) -> Grid:
    return Grid(SpaceTimeDomain(L, T), nx, nt)


class TestGrid:
    def test_cell_center_origin(self):
        assert make_grid().cell_center(0, 0) == (5.0, 0.0)

    def test_cell_center_last_cell(self):
        assert make_grid().cell_center(99, 0) == (995.0, 0.0)

    def test_cell_center_out_of_range(self):
        g = make_grid()
        with pytest.raises(IndexError):
            g.cell_center(g.nx, 0)
        with pytest.raises(IndexError):
            g.cell_center(0, g.nt)
        with pytest.raises(IndexError):
            g.cell_center(-1, 0)

    def test_spacing_consistency(self):
        g = make_grid(nx=60, nt=560)
        assert g.dx * g.nx == pytest.approx(g.domain.length_m, rel=1e-14)
        assert g.dt * g.nt == pytest.approx(g.domain.horizon_s, rel=1e-14)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            Grid(SpaceTimeDomain(1.0, 1.0), 1, 10)
        with pytest.raises(ValueError):
            SpaceTimeDomain(-1.0, 1.0)


class TestNormalization:
    def test_corners(self):
        norm = Normalization(SpaceTimeDomain(1000.0, 300.0))
        assert norm.normalize_point(0.0, 0.0) == (0.0, 0.0)
        assert norm.normalize_point(1000.0, 300.0) == (1.0, 1.0)
        assert norm.normalize_point(500.0, 75.0) == (0.5, 0.25)

    def test_outside_domain_rejected(self):
        norm = Normalization(SpaceTimeDomain(1000.0, 300.0))
        with pytest.raises(ValueError):
            norm.normalize_point(1000.1, 0.0)

    @given(
        x=st.floats(0.0, 1000.0, allow_nan=False),
        t=st.floats(0.0, 300.0, allow_nan=False),
    )
    def test_round_trip_identity(self, x, t):
        norm = Normalization(SpaceTimeDomain(1000.0, 300.0))
        xn, tn = norm.normalize_point(x, t)
        xb, tb = norm.denormalize_point(xn, tn)
        assert abs(xb - x) <= 1e-12 * max(1.0, abs(x))
        assert abs(tb - t) <= 1e-12 * max(1.0, abs(t))

    def test_round_trip_many_points(self):
        rng = np.random.default_rng(0)
        norm = Normalization(SpaceTimeDomain(1234.5, 678.9))
        x = rng.uniform(0, 1234.5, 1000)
        t = rng.uniform(0, 678.9, 1000)
        xb, tb = norm.denormalize_point(*norm.normalize_point(x, t))
        assert np.all(np.abs(xb - x) <= 1e-12 * np.maximum(1.0, np.abs(x)))
        assert np.all(np.abs(tb - t) <= 1e-12 * np.maximum(1.0, np.abs(t)))


class TestStateField:
    def test_rejects_negative_and_nonfinite(self):
        g = make_grid(nx=4, nt=3)
        ok = np.ones((4, 3))
        with pytest.raises(ValueError):
            StateField(g, -ok, ok)
        with pytest.raises(ValueError):
            StateField(g, ok, -ok)
        bad = ok.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            StateField(g, bad, ok)
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            StateField(g, ok, bad)

    def test_shape_checked(self):
        g = make_grid(nx=4, nt=3)
        with pytest.raises(ValueError):
            StateField(g, np.ones((3, 4)), np.ones((3, 4)))


class TestPhysicsParams:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            PhysicsParams(rho_max=0.0, u_max=1.0)
        with pytest.raises(ValueError):
            PhysicsParams(rho_max=1.0, u_max=-1.0)
        with pytest.raises(ValueError):
            PhysicsParams(rho_max=1.0, u_max=1.0, tau=0.0)

    def test_tau_optional(self):
        p = PhysicsParams(rho_max=1.0, u_max=1.0)
        with pytest.raises(ValueError):
            p.require_tau()


class TestSampleParams:
    def make_dist(self, std_rho=0.02):
        return ParamDistribution(
            rho_max=TruncatedGaussian(0.38, std_rho, 0.3, 0.5),
            u_max=TruncatedGaussian(22.9, 1.0, 18.0, 28.0),
            tau=TruncatedGaussian(5.0, 0.5, 3.0, 8.0),
        )

    def test_zero_std_returns_mean(self):
        dist = ParamDistribution(
            rho_max=TruncatedGaussian(0.38, 0.0, 0.3, 0.5),
            u_max=TruncatedGaussian(22.9, 0.0, 18.0, 28.0),
        )
        p = sample_params(dist, seed=123)
        assert p.rho_max == 0.38 and p.u_max == 22.9 and p.tau is None

    def test_same_seed_same_draw(self):
        dist = self.make_dist()
        a = sample_params(dist, seed=42)
        b = sample_params(dist, seed=42)
        assert (a.rho_max, a.u_max, a.tau) == (b.rho_max, b.u_max, b.tau)

    def test_sample_mean_matches_truncated_density(self):
        # oracle: analytic mean of the truncated normal (truncation is mildly
        # asymmetric, shifting the mean by ~3e-6)
        tg = TruncatedGaussian(0.38, 0.02, 0.3, 0.5)
        a, b = (tg.lower - tg.mean) / tg.std, (tg.upper - tg.mean) / tg.std
        expected = stats.truncnorm.mean(a, b, loc=tg.mean, scale=tg.std)
        assert expected == pytest.approx(0.38, abs=1e-4)
        rng = np.random.default_rng(7)
        draws = np.array([tg.sample(rng) for _ in range(100_000)])
        # MC error at 1e5 draws is ~6e-5, far inside the 0.002 window
        assert abs(draws.mean() - expected) <= 5 * tg.std / np.sqrt(100_000)
        assert abs(draws.mean() - 0.38) <= 0.002

    def test_draws_respect_bounds(self):
        tg = TruncatedGaussian(0.32, 0.05, 0.3, 0.5)
        rng = np.random.default_rng(3)
        draws = np.array([tg.sample(rng) for _ in range(100_000)])
        assert draws.min() >= 0.3 and draws.max() <= 0.5

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError):
            TruncatedGaussian(0.2, 0.1, 0.3, 0.5)  # mean outside bounds
        with pytest.raises(ValueError):
            TruncatedGaussian(0.4, -0.1, 0.3, 0.5)
        with pytest.raises(ValueError):
            TruncatedGaussian(0.4, 0.1, 0.5, 0.3)


class TestDatasets:
    def test_observations_validated(self):
        dom = SpaceTimeDomain(100.0, 10.0)
        ObservationSet([1.0], [2.0], [0.1], [3.0], domain=dom)
        with pytest.raises(ValueError):
            ObservationSet([1.0], [2.0], [-0.1], [3.0], domain=dom)
        with pytest.raises(ValueError):
            ObservationSet([101.0], [2.0], [0.1], [3.0], domain=dom)

    def test_collocation_validated(self):
        dom = SpaceTimeDomain(100.0, 10.0)
        c = CollocationSet([1.0, 2.0], [0.5, 9.0], domain=dom)
        assert len(c) == 2
        with pytest.raises(ValueError):
            CollocationSet([1.0], [10.5], domain=dom)

    def test_observation_iteration(self):
        obs = ObservationSet([1.0, 2.0], [3.0, 4.0], [0.1, 0.2], [5.0, 6.0])
        recs = list(obs)
        assert recs[1].x == 2.0 and recs[1].u == 6.0
