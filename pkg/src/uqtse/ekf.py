"""Extended Kalman filter baseline with the second-order model as process.

State vector stacks primitive variables per cell: [rho_0..rho_{nx-1},
u_0..u_{nx-1}], so detector readings of density and speed are a linear
measurement. The step-map Jacobian is built by central finite differences
through a batched solver step; covariance updates use the Joseph form and are
re-symmetrized after every operation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .domain import Grid, NoiseModel, ObservationSet, PhysicsParams, StateField
from .physics import equilibrium_speed
from .sensing import DetectorArray
from .solver import Scenario, arz_step

__all__ = [
    "EkfState",
    "MeasurementMap",
    "EkfRunResult",
    "ekf_predict",
    "ekf_update",
    "arz_step_fn",
    "run_ekf",
]

DEFAULT_Q_RHO = 1e-6
DEFAULT_Q_U = 1e-4


@dataclass
class EkfState:
    """Gaussian state estimate: mean (2nx,), covariance (2nx, 2nx)."""

    mean: np.ndarray
    cov: np.ndarray
    q_diag: np.ndarray

    def __post_init__(self):
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} != ({n}, {n})")
        if self.q_diag.shape != (n,):
            raise ValueError("process-noise diagonal must match the state length")
        if np.any(self.q_diag < 0):
            raise ValueError("process-noise diagonal must be nonnegative")


@dataclass(frozen=True)
class MeasurementMap:
    """Which state components a measurement vector reads (rho then u per cell)."""

    cell_indices: tuple
    nx: int

    def rows(self) -> np.ndarray:
        cells = np.asarray(self.cell_indices, dtype=int)
        if np.any(cells < 0) or np.any(cells >= self.nx):
            raise ValueError("detector cell index out of range")
        return np.concatenate([cells, self.nx + cells])

    def __len__(self) -> int:
        return 2 * len(self.cell_indices)


@dataclass
class EkfRunResult:
    """Filtered mean and per-cell variance trajectories.

    `variance` reuses the field container: its rho slot holds Var[rho] and its
    u slot holds Var[u].
    """

    mean: StateField
    variance: StateField


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def ekf_predict(state: EkfState, step_fn: Callable[[np.ndarray], np.ndarray], fd_eps: float = 1e-6) -> EkfState:
    """Propagate mean through the step map and covariance through its
    finite-difference Jacobian: P <- F P F^T + Q."""
    n = state.mean.shape[0]
    batch = np.empty((2 * n + 1, n))
    batch[0] = state.mean
    eye = np.eye(n) * fd_eps
    batch[1 : n + 1] = state.mean[None, :] + eye
    batch[n + 1 :] = state.mean[None, :] - eye
    out = step_fn(batch)
    mean_next = out[0]
    F = (out[1 : n + 1] - out[n + 1 :]).T / (2.0 * fd_eps)
    cov_next = _symmetrize(F @ state.cov @ F.T + np.diag(state.q_diag))
    return EkfState(mean=mean_next, cov=cov_next, q_diag=state.q_diag)


def ekf_update(state: EkfState, measurement: np.ndarray, mmap: MeasurementMap, r_diag: np.ndarray) -> EkfState:
    """Joseph-form Kalman update with a selection (index) measurement matrix."""
    rows = mmap.rows()
    m = rows.shape[0]
    if measurement.shape != (m,) or r_diag.shape != (m,):
        raise ValueError("measurement/noise length does not match the map")
    if np.any(r_diag < 0):
        raise ValueError("measurement-noise diagonal must be nonnegative")
    P = state.cov
    S = P[np.ix_(rows, rows)] + np.diag(r_diag)
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        warnings.warn("singular innovation covariance, regularizing", RuntimeWarning)
        S_inv = np.linalg.inv(S + 1e-10 * np.eye(m))
    K = P[:, rows] @ S_inv
    innovation = measurement - state.mean[rows]
    mean_next = state.mean + K @ innovation
    n = state.mean.shape[0]
    I_KH = np.eye(n)
    # subtract K from the observed columns: (I - K H)
    I_KH[:, rows] -= K
    cov_next = _symmetrize(I_KH @ P @ I_KH.T + (K * r_diag[None, :]) @ K.T)
    return EkfState(mean=mean_next, cov=cov_next, q_diag=state.q_diag)


def arz_step_fn(scenario: Scenario, params: PhysicsParams, grid: Grid, step_index: int) -> Callable[[np.ndarray], np.ndarray]:
    """One-step process map at a given time node, batched over state rows."""
    nx, dt, dx = grid.nx, grid.dt, grid.dx
    t = step_index * dt

    def step(batch: np.ndarray) -> np.ndarray:
        B = batch.shape[0]
        rho = np.maximum(batch[:, :nx], 0.0)
        u = np.maximum(batch[:, nx:], 0.0)
        g_rho = np.full(B, scenario.boundary.inflow.density_at(t, params))
        g_u = np.maximum(equilibrium_speed(g_rho, params), 0.0)
        rho_n, u_n, _, _, _ = arz_step(rho, u, g_rho, g_u, params, dt, dx)
        return np.concatenate([rho_n, u_n], axis=1)

    return step


def _group_observations(obs: ObservationSet, grid: Grid) -> dict:
    """node index -> {cell index -> (mean rho, mean u, count)}."""
    grouped: dict = {}
    for i in range(len(obs)):
        k = grid.nearest_node(obs.t[i])
        c = grid.nearest_cell(obs.x[i])
        acc = grouped.setdefault(k, {}).setdefault(c, [0.0, 0.0, 0])
        acc[0] += obs.rho[i]
        acc[1] += obs.u[i]
        acc[2] += 1
    return grouped


def run_ekf(
    scenario: Scenario,
    grid: Grid,
    observations: ObservationSet,
    noise: NoiseModel,
    params: Optional[PhysicsParams] = None,
    q_diag: Optional[np.ndarray] = None,
    p0_diag: Optional[np.ndarray] = None,
    fd_eps: float = 1e-6,
) -> EkfRunResult:
    """Filter over the whole horizon: predict every solver step, update at
    nodes where detector samples exist.

    Physics parameters default to the scenario distribution means (the filter
    does not estimate them). Repeated readings at one (cell, node) are fused
    into a mean measurement with variance scaled by the count.
    """
    if params is None:
        params = scenario.lambda_dist.means()
    params.require_tau()
    nx, nt = grid.nx, grid.nt
    if q_diag is None:
        q_diag = np.concatenate([np.full(nx, DEFAULT_Q_RHO), np.full(nx, DEFAULT_Q_U)])
    if p0_diag is None:
        p0_diag = np.concatenate([np.full(nx, 1e-4), np.full(nx, 1e-2)])
    rho0 = scenario.initial.density(grid.x_centers(), scenario.domain.length_m, params)
    u0 = np.maximum(equilibrium_speed(rho0, params), 0.0)
    state = EkfState(mean=np.concatenate([rho0, u0]), cov=np.diag(p0_diag.astype(float)), q_diag=q_diag)

    grouped = _group_observations(observations, grid)
    var_floor = 1e-12
    mean_hist = np.empty((2 * nx, nt))
    var_hist = np.empty((2 * nx, nt))

    def apply_updates(k: int, st: EkfState) -> EkfState:
        if k not in grouped:
            return st
        cells = sorted(grouped[k])
        mmap = MeasurementMap(cell_indices=tuple(cells), nx=nx)
        z = np.empty(2 * len(cells))
        r = np.empty(2 * len(cells))
        for j, c in enumerate(cells):
            s_rho, s_u, cnt = grouped[k][c]
            z[j] = s_rho / cnt
            z[len(cells) + j] = s_u / cnt
            r[j] = max(noise.sigma_rho**2 / cnt, var_floor)
            r[len(cells) + j] = max(noise.sigma_u**2 / cnt, var_floor)
        return ekf_update(st, z, mmap, r)

    state = apply_updates(0, state)
    mean_hist[:, 0] = state.mean
    var_hist[:, 0] = np.diag(state.cov)
    for k in range(nt - 1):
        state = ekf_predict(state, arz_step_fn(scenario, params, grid, k), fd_eps=fd_eps)
        state = apply_updates(k + 1, state)
        mean_hist[:, k + 1] = state.mean
        var_hist[:, k + 1] = np.diag(state.cov)

    mean_field = StateField(grid, np.maximum(mean_hist[:nx], 0.0), np.maximum(mean_hist[nx:], 0.0))
    var_field = StateField(grid, np.maximum(var_hist[:nx], 0.0), np.maximum(var_hist[nx:], 0.0))
    return EkfRunResult(mean=mean_field, variance=var_field)
