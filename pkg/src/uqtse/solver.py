"""Finite-volume solvers for the first and second-order traffic models.

First-order: demand-supply Godunov flux, explicit conservative update.
Second-order: HLL flux on conservative variables (rho, y = rho*(u + h(rho)))
plus an exact relaxation substep per time step. Both are first-order accurate,
conservative to round-off, and run on a shared uniform grid so realizations of
a stochastic scenario can be stacked into an ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .domain import (
    Grid,
    NoiseModel,
    ParamDistribution,
    PhysicsParams,
    SpaceTimeDomain,
    StateField,
    sample_params,
)
from .physics import arz_h, arz_h_prime, equilibrium_speed, lwr_flux

__all__ = [
    "ConstantInflow",
    "SinusoidalInflow",
    "BoundaryCondition",
    "ConstantProfile",
    "RiemannProfile",
    "JamPocketProfile",
    "SineProfile",
    "Scenario",
    "Ensemble",
    "SolveRecord",
    "NumericalError",
    "cfl_timestep",
    "plan_grid",
    "godunov_flux_lwr",
    "solve_lwr",
    "solve_arz",
    "solve_scenario",
    "generate_ensemble",
    "mass_balance_residual",
    "write_ensemble",
    "read_ensemble",
]

CFL = 0.9
ENSEMBLE_FORMAT_VERSION = "uqtse-ensemble-1"


class NumericalError(RuntimeError):
    """Raised when a solve produces non-finite values or violates CFL."""


def _check_frac(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must be a density fraction in [0, 1], got {value}")


# -- boundary conditions ------------------------------------------------------
# Upstream inflow is prescribed as a density fraction of rho_max so it stays
# admissible for every sampled parameter draw; downstream is free outflow.


@dataclass(frozen=True)
class ConstantInflow:
    level_frac: float

    def __post_init__(self):
        _check_frac("level_frac", self.level_frac)

    def density_at(self, t: float, params: PhysicsParams) -> float:
        return self.level_frac * params.rho_max


@dataclass(frozen=True)
class SinusoidalInflow:
    base_frac: float
    amplitude_frac: float
    period_s: float

    def __post_init__(self):
        _check_frac("base_frac - amplitude_frac", self.base_frac - self.amplitude_frac)
        _check_frac("base_frac + amplitude_frac", self.base_frac + self.amplitude_frac)
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")

    def density_at(self, t: float, params: PhysicsParams) -> float:
        frac = self.base_frac + self.amplitude_frac * np.sin(2.0 * np.pi * t / self.period_s)
        return frac * params.rho_max


Inflow = Union[ConstantInflow, SinusoidalInflow]


@dataclass(frozen=True)
class BoundaryCondition:
    """Prescribed upstream inflow density; downstream outflow is free."""

    inflow: Inflow


# -- initial profiles ---------------------------------------------------------


@dataclass(frozen=True)
class ConstantProfile:
    level_frac: float

    def __post_init__(self):
        _check_frac("level_frac", self.level_frac)

    def density(self, x: np.ndarray, L: float, params: PhysicsParams) -> np.ndarray:
        return np.full_like(x, self.level_frac * params.rho_max)


@dataclass(frozen=True)
class RiemannProfile:
    left_frac: float
    right_frac: float
    split_frac: float = 0.5

    def __post_init__(self):
        _check_frac("left_frac", self.left_frac)
        _check_frac("right_frac", self.right_frac)
        _check_frac("split_frac", self.split_frac)

    def density(self, x: np.ndarray, L: float, params: PhysicsParams) -> np.ndarray:
        return np.where(x < self.split_frac * L, self.left_frac, self.right_frac) * params.rho_max


@dataclass(frozen=True)
class JamPocketProfile:
    """High-density block inside a free-flow background (stop-and-go seed)."""

    background_frac: float = 0.15
    jam_frac: float = 0.75
    start_frac: float = 0.4
    end_frac: float = 0.6

    def __post_init__(self):
        _check_frac("background_frac", self.background_frac)
        _check_frac("jam_frac", self.jam_frac)
        if not (0.0 <= self.start_frac < self.end_frac <= 1.0):
            raise ValueError("need 0 <= start_frac < end_frac <= 1")

    def density(self, x: np.ndarray, L: float, params: PhysicsParams) -> np.ndarray:
        inside = (x >= self.start_frac * L) & (x <= self.end_frac * L)
        return np.where(inside, self.jam_frac, self.background_frac) * params.rho_max


@dataclass(frozen=True)
class SineProfile:
    mean_frac: float
    amplitude_frac: float
    cycles: float = 1.0

    def __post_init__(self):
        _check_frac("mean_frac - amplitude_frac", self.mean_frac - self.amplitude_frac)
        _check_frac("mean_frac + amplitude_frac", self.mean_frac + self.amplitude_frac)

    def density(self, x: np.ndarray, L: float, params: PhysicsParams) -> np.ndarray:
        frac = self.mean_frac + self.amplitude_frac * np.sin(2.0 * np.pi * self.cycles * x / L)
        return frac * params.rho_max


InitialProfile = Union[ConstantProfile, RiemannProfile, JamPocketProfile, SineProfile]


@dataclass(frozen=True)
class Scenario:
    """Everything needed to draw and solve one stochastic realization."""

    domain: SpaceTimeDomain
    model: str  # "lwr" or "arz"
    initial: InitialProfile
    boundary: BoundaryCondition
    lambda_dist: ParamDistribution
    noise: NoiseModel
    nx: int
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("lwr", "arz"):
            raise ValueError(f"model must be 'lwr' or 'arz', got {self.model!r}")
        if self.model == "arz" and self.lambda_dist.tau is None:
            raise ValueError("second-order scenario needs a tau distribution")
        if self.nx < 2:
            raise ValueError("nx must be >= 2")


@dataclass
class SolveRecord:
    """Optional diagnostics collected during a solve."""

    inflow_flux: list = field(default_factory=list)
    outflow_flux: list = field(default_factory=list)
    clamp_count: int = 0


@dataclass(frozen=True)
class Ensemble:
    """Realizations of a stochastic scenario on one shared grid."""

    grid: Grid
    realizations: tuple
    lambdas: tuple

    def __post_init__(self):
        if len(self.realizations) != len(self.lambdas):
            raise ValueError("realizations and lambdas must align")
        if any(f.grid != self.grid for f in self.realizations):
            raise ValueError("all realizations must share the ensemble grid")

    def __len__(self) -> int:
        return len(self.realizations)

    def rho_stack(self) -> np.ndarray:
        return np.stack([f.rho for f in self.realizations])

    def u_stack(self) -> np.ndarray:
        return np.stack([f.u for f in self.realizations])

    def mean_field(self) -> tuple:
        return self.rho_stack().mean(axis=0), self.u_stack().mean(axis=0)


# -- time step ---------------------------------------------------------------


def wave_speed_bound(params: PhysicsParams, model: str) -> float:
    """Upper bound on characteristic speeds over admissible states."""
    if model == "lwr":
        return params.u_max
    # second order: |u| <= u_max and rho * h'(rho) <= u_max
    return 2.0 * params.u_max


def cfl_timestep(grid: Grid, params: PhysicsParams, model: str = "lwr") -> float:
    return CFL * grid.dx / wave_speed_bound(params, model)


def plan_grid(scenario: Scenario) -> Grid:
    """Grid whose dt is the largest step dividing T that satisfies the CFL
    bound for every admissible parameter draw (u_max at its upper bound)."""
    worst = PhysicsParams(
        rho_max=scenario.lambda_dist.rho_max.upper,
        u_max=scenario.lambda_dist.u_max.upper,
        tau=None if scenario.lambda_dist.tau is None else scenario.lambda_dist.tau.mean,
    )
    dt_max = CFL * (scenario.domain.length_m / scenario.nx) / wave_speed_bound(worst, scenario.model)
    nt = max(2, int(np.ceil(scenario.domain.horizon_s / dt_max)))
    return Grid(scenario.domain, scenario.nx, nt)


# -- first-order model ---------------------------------------------------------


def godunov_flux_lwr(rho_left, rho_right, params: PhysicsParams):
    """Demand-supply interface flux: min(demand(left), supply(right))."""
    rho_left = np.asarray(rho_left, dtype=np.float64)
    rho_right = np.asarray(rho_right, dtype=np.float64)
    rho_crit = 0.5 * params.rho_max
    demand = lwr_flux(np.minimum(rho_left, rho_crit), params)
    supply = lwr_flux(np.maximum(rho_right, rho_crit), params)
    return np.minimum(demand, supply)


def _require_cfl(grid: Grid, params: PhysicsParams, model: str) -> None:
    bound = cfl_timestep(grid, params, model)
    if grid.dt > bound * (1.0 + 1e-12):
        raise NumericalError(f"dt={grid.dt:.6g} violates the CFL bound {bound:.6g} for model {model!r}")


def solve_lwr(scenario: Scenario, params: PhysicsParams, grid: Grid, record: Optional[SolveRecord] = None) -> StateField:
    """Explicit conservative update rho_i += (dt/dx) * (F_{i-1/2} - F_{i+1/2})."""
    _require_cfl(grid, params, "lwr")
    nx, nt, dx, dt = grid.nx, grid.nt, grid.dx, grid.dt
    rho = np.empty((nx, nt))
    rho[:, 0] = scenario.initial.density(grid.x_centers(), scenario.domain.length_m, params)
    if rho[:, 0].min() < 0 or rho[:, 0].max() > params.rho_max:
        raise ValueError("initial profile outside [0, rho_max]")
    for k in range(nt - 1):
        cur = rho[:, k]
        ghost_up = scenario.boundary.inflow.density_at(k * dt, params)
        flux_in = godunov_flux_lwr(ghost_up, cur[0], params)
        interior = godunov_flux_lwr(cur[:-1], cur[1:], params)
        # free outflow: downstream supply never binds
        rho_crit = 0.5 * params.rho_max
        flux_out = lwr_flux(min(cur[-1], rho_crit), params)
        flux_left = np.concatenate(([flux_in], interior))
        flux_right = np.concatenate((interior, [flux_out]))
        nxt = cur + (dt / dx) * (flux_left - flux_right)
        if not np.all(np.isfinite(nxt)):
            raise NumericalError(f"non-finite density at step {k + 1}")
        rho[:, k + 1] = nxt
        if record is not None:
            record.inflow_flux.append(float(flux_in))
            record.outflow_flux.append(float(flux_out))
    u = np.maximum(equilibrium_speed(rho, params), 0.0)
    return StateField(grid, rho, u)


# -- second-order model --------------------------------------------------------


def _arz_flux_hll(rho_l, u_l, rho_r, u_r, params: PhysicsParams):
    """HLL flux for the homogeneous system on (rho, y); batched arrays."""
    hp = arz_h_prime(params)
    y_l = rho_l * (u_l + arz_h(rho_l, params))
    y_r = rho_r * (u_r + arz_h(rho_r, params))
    f1_l, f2_l = rho_l * u_l, y_l * u_l
    f1_r, f2_r = rho_r * u_r, y_r * u_r
    lam1_l = u_l - rho_l * hp
    lam1_r = u_r - rho_r * hp
    s_l = np.minimum(lam1_l, lam1_r)
    s_r = np.maximum(u_l, u_r)
    denom = s_r - s_l
    denom = np.where(np.abs(denom) < 1e-14, 1.0, denom)
    f1_m = (s_r * f1_l - s_l * f1_r + s_l * s_r * (rho_r - rho_l)) / denom
    f2_m = (s_r * f2_l - s_l * f2_r + s_l * s_r * (y_r - y_l)) / denom
    f1 = np.where(s_l >= 0.0, f1_l, np.where(s_r <= 0.0, f1_r, f1_m))
    f2 = np.where(s_l >= 0.0, f2_l, np.where(s_r <= 0.0, f2_r, f2_m))
    return f1, f2


def arz_hyperbolic_step(rho, u, ghost_up_rho, ghost_up_u, params: PhysicsParams, dt: float, dx: float):
    """One conservative step of the homogeneous part; state arrays (B, nx).

    Upstream ghost is the prescribed inflow state, downstream ghost copies the
    last cell (zero-gradient outflow). Returns (rho, u, flux_in, flux_out,
    clamps) where fluxes are the rho-component boundary fluxes.
    """
    rho_ext = np.concatenate([ghost_up_rho[:, None], rho, rho[:, -1:]], axis=1)
    u_ext = np.concatenate([ghost_up_u[:, None], u, u[:, -1:]], axis=1)
    f1, f2 = _arz_flux_hll(rho_ext[:, :-1], u_ext[:, :-1], rho_ext[:, 1:], u_ext[:, 1:], params)
    y = rho * (u + arz_h(rho, params))
    rho_n = rho + (dt / dx) * (f1[:, :-1] - f1[:, 1:])
    y_n = y + (dt / dx) * (f2[:, :-1] - f2[:, 1:])
    clamps = int(np.sum(rho_n < 0.0))
    rho_n = np.maximum(rho_n, 0.0)
    u_n = np.where(rho_n > 1e-12, y_n / np.maximum(rho_n, 1e-12) - arz_h(rho_n, params), equilibrium_speed(rho_n, params))
    neg_u = int(np.sum(u_n < 0.0))
    u_n = np.maximum(u_n, 0.0)
    return rho_n, u_n, f1[:, 0], f1[:, -1], clamps + neg_u


def arz_relaxation_step(rho, u, params: PhysicsParams, dt: float):
    """Exact integration of du/dt = (U_eq(rho) - u) / tau at fixed rho."""
    ueq = equilibrium_speed(rho, params)
    return ueq + (u - ueq) * np.exp(-dt / params.require_tau())


def arz_step(rho, u, ghost_up_rho, ghost_up_u, params: PhysicsParams, dt: float, dx: float):
    """Full split step (hyperbolic then relaxation); state arrays (B, nx)."""
    rho_n, u_n, f_in, f_out, clamps = arz_hyperbolic_step(rho, u, ghost_up_rho, ghost_up_u, params, dt, dx)
    u_n = arz_relaxation_step(rho_n, u_n, params, dt)
    return rho_n, u_n, f_in, f_out, clamps


def solve_arz(scenario: Scenario, params: PhysicsParams, grid: Grid, record: Optional[SolveRecord] = None) -> StateField:
    """Operator-split solve started from the equilibrium velocity profile."""
    params.require_tau()
    _require_cfl(grid, params, "arz")
    nx, nt, dx, dt = grid.nx, grid.nt, grid.dx, grid.dt
    rho = np.empty((nx, nt))
    u = np.empty((nx, nt))
    rho[:, 0] = scenario.initial.density(grid.x_centers(), scenario.domain.length_m, params)
    if rho[:, 0].min() < 0 or rho[:, 0].max() > params.rho_max:
        raise ValueError("initial profile outside [0, rho_max]")
    u[:, 0] = np.maximum(equilibrium_speed(rho[:, 0], params), 0.0)
    cur_rho = rho[:, 0][None, :].copy()
    cur_u = u[:, 0][None, :].copy()
    for k in range(nt - 1):
        g_rho = np.array([scenario.boundary.inflow.density_at(k * dt, params)])
        g_u = np.maximum(equilibrium_speed(g_rho, params), 0.0)
        cur_rho, cur_u, f_in, f_out, clamps = arz_step(cur_rho, cur_u, g_rho, g_u, params, dt, dx)
        if not (np.all(np.isfinite(cur_rho)) and np.all(np.isfinite(cur_u))):
            raise NumericalError(f"non-finite state at step {k + 1}")
        rho[:, k + 1] = cur_rho[0]
        u[:, k + 1] = cur_u[0]
        if record is not None:
            record.inflow_flux.append(float(f_in[0]))
            record.outflow_flux.append(float(f_out[0]))
            record.clamp_count += clamps
    return StateField(grid, rho, u)


def solve_scenario(scenario: Scenario, params: PhysicsParams, grid: Grid, record: Optional[SolveRecord] = None) -> StateField:
    if scenario.model == "lwr":
        return solve_lwr(scenario, params, grid, record)
    return solve_arz(scenario, params, grid, record)


def mass_balance_residual(field: StateField, record: SolveRecord) -> float:
    """|mass change - net boundary inflow| relative to the mean total mass."""
    grid = field.grid
    delta = field.total_mass(grid.nt - 1) - field.total_mass(0)
    net = (np.sum(record.inflow_flux) - np.sum(record.outflow_flux)) * grid.dt
    scale = max(abs(field.total_mass(0)), abs(field.total_mass(grid.nt - 1)), 1e-30)
    return abs(delta - net) / scale


# -- ensembles ----------------------------------------------------------------


def generate_ensemble(scenario: Scenario, n_realizations: int, seed: int, grid: Optional[Grid] = None) -> Ensemble:
    """Draw parameters per realization and solve; deterministic given seed."""
    if n_realizations < 1:
        raise ValueError("n_realizations must be >= 1")
    if grid is None:
        grid = plan_grid(scenario)
    children = np.random.SeedSequence(seed).spawn(n_realizations)
    fields, lambdas = [], []
    for child in children:
        params = sample_params(scenario.lambda_dist, np.random.default_rng(child))
        fields.append(solve_scenario(scenario, params, grid))
        lambdas.append(params)
    return Ensemble(grid=grid, realizations=tuple(fields), lambdas=tuple(lambdas))


def write_ensemble(path, ensemble: Ensemble, estimator: str = "solver") -> None:
    """Versioned binary export: grid metadata plus per-realization fields.

    `estimator` tags what produced the fields ("solver" ground truth, "ekf"
    filter output where realization 0 is the mean and 1 the variance, ...).
    """
    import os
    import tempfile

    grid = ensemble.grid
    lam = np.array(
        [[p.rho_max, p.u_max, np.nan if p.tau is None else p.tau] for p in ensemble.lambdas]
    )
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(
                fh,
                format_version=np.array(ENSEMBLE_FORMAT_VERSION),
                estimator=np.array(estimator),
                length_m=np.array(grid.domain.length_m),
                horizon_s=np.array(grid.domain.horizon_s),
                nx=np.array(grid.nx),
                nt=np.array(grid.nt),
                rho=ensemble.rho_stack(),
                u=ensemble.u_stack(),
                lambdas=lam,
            )
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_ensemble(path, return_estimator: bool = False):
    with np.load(path) as data:
        version = str(data["format_version"])
        if version != ENSEMBLE_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {version!r}")
        estimator = str(data["estimator"]) if "estimator" in data.files else "solver"
        domain = SpaceTimeDomain(float(data["length_m"]), float(data["horizon_s"]))
        grid = Grid(domain, int(data["nx"]), int(data["nt"]))
        rho, u, lam = data["rho"], data["u"], data["lambdas"]
    fields = tuple(StateField(grid, rho[i], u[i]) for i in range(rho.shape[0]))
    lambdas = tuple(
        PhysicsParams(rho_max=row[0], u_max=row[1], tau=None if np.isnan(row[2]) else row[2]) for row in lam
    )
    ensemble = Ensemble(grid=grid, realizations=fields, lambdas=lambdas)
    return (ensemble, estimator) if return_estimator else ensemble
