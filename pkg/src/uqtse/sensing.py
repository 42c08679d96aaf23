"""Loop-detector placement, observation extraction, collocation sampling, and
trajectory ingestion into grid fields.

CSV schemas (UTF-8, newline-delimited, decimal point):
  observations:  x_m,t_s,rho_veh_per_m,u_m_per_s
  collocation:   x_m,t_s
  trajectories:  Vehicle_ID,Frame_ID,Local_Y,v_Vel,Lane_ID
Floats are written with shortest round-trip formatting, so write/read is
lossless.
"""

from __future__ import annotations

import csv
from array import array
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .domain import (
    CollocationSet,
    Grid,
    NoiseModel,
    ObservationSet,
    SpaceTimeDomain,
    StateField,
)
from .solver import Ensemble

__all__ = [
    "DetectorArray",
    "TrajectoryRecord",
    "place_detectors",
    "extract_observations",
    "sample_collocation",
    "ingest_trajectories",
    "write_observations",
    "read_observations",
    "write_collocation",
    "read_collocation",
    "read_trajectories",
    "write_trajectories",
]

OBS_HEADER = ["x_m", "t_s", "rho_veh_per_m", "u_m_per_s"]
COLLOC_HEADER = ["x_m", "t_s"]
TRAJ_HEADER = ["Vehicle_ID", "Frame_ID", "Local_Y", "v_Vel", "Lane_ID"]
FEET_TO_METERS = 0.3048


@dataclass(frozen=True)
class DetectorArray:
    """Fixed sensor positions (strictly increasing, strictly inside the segment)
    sampling every `period_s` seconds."""

    positions: tuple
    period_s: float = 5.0

    def __post_init__(self):
        pos = tuple(float(p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        if len(pos) == 0:
            raise ValueError("need at least one detector")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("detector positions must be strictly increasing")
        if self.period_s <= 0:
            raise ValueError("sampling period must be positive")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: int
    t: float
    x: float
    v: float
    lane: int


def place_detectors(n: int, domain: SpaceTimeDomain, period_s: float = 5.0) -> DetectorArray:
    """Evenly spaced detectors at x_j = j * L / (n + 1), endpoints excluded."""
    if n < 1:
        raise ValueError("need at least one detector")
    L = domain.length_m
    return DetectorArray(positions=tuple(j * L / (n + 1) for j in range(1, n + 1)), period_s=period_s)


def extract_observations(ensemble: Ensemble, detectors: DetectorArray, noise: NoiseModel, seed: int) -> ObservationSet:
    """Read (rho, u) at each detector/sampling time in every realization.

    Values come from the nearest grid cell/node; independent Gaussian noise is
    added and readings are clamped at zero. Multiple realizations produce
    multiple labels per coordinate, which is the empirical conditional
    distribution the estimators train against.
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    grid = ensemble.grid
    domain = grid.domain
    for p in detectors.positions:
        if not (0.0 < p < domain.length_m):
            raise ValueError(f"detector at x={p} outside (0, {domain.length_m})")
    sample_times = np.arange(0.0, domain.horizon_s + 1e-9, detectors.period_s)
    sample_times = sample_times[sample_times <= domain.horizon_s]
    cells = np.array([grid.nearest_cell(p) for p in detectors.positions])
    nodes = np.array([grid.nearest_node(t) for t in sample_times])
    rng = np.random.default_rng(seed)
    xs, ts, rhos, us = [], [], [], []
    x_rep = np.repeat(np.asarray(detectors.positions), len(sample_times))
    t_rep = np.tile(sample_times, len(detectors))
    for field in ensemble.realizations:
        vals_rho = field.rho[np.ix_(cells, nodes)].ravel()
        vals_u = field.u[np.ix_(cells, nodes)].ravel()
        if noise.sigma_rho > 0:
            vals_rho = vals_rho + rng.normal(0.0, noise.sigma_rho, size=vals_rho.shape)
        if noise.sigma_u > 0:
            vals_u = vals_u + rng.normal(0.0, noise.sigma_u, size=vals_u.shape)
        xs.append(x_rep)
        ts.append(t_rep)
        rhos.append(np.maximum(vals_rho, 0.0))
        us.append(np.maximum(vals_u, 0.0))
    return ObservationSet(
        np.concatenate(xs), np.concatenate(ts), np.concatenate(rhos), np.concatenate(us), domain=domain
    )


def sample_collocation(n_c: int, domain: SpaceTimeDomain, strategy: str = "uniform", seed: int = 0) -> CollocationSet:
    """Unlabeled points over [0, L] x [0, T]; deterministic per seed."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        x = rng.uniform(0.0, domain.length_m, n_c)
        t = rng.uniform(0.0, domain.horizon_s, n_c)
    elif strategy == "latin-hypercube":
        # one point per stratum in each coordinate
        x = (np.arange(n_c) + rng.uniform(size=n_c)) * (domain.length_m / n_c)
        t = (rng.permutation(n_c) + rng.uniform(size=n_c)) * (domain.horizon_s / n_c)
    else:
        raise ValueError(f"unknown collocation strategy {strategy!r}")
    return CollocationSet(x, t, domain=domain)


def ingest_trajectories(
    records: Iterable[TrajectoryRecord],
    grid: Grid,
    lane_filter: Optional[Iterable[int]] = None,
    info: Optional[dict] = None,
) -> StateField:
    """Aggregate vehicle trajectories into cell densities and speeds.

    Per space-time cell: rho = total vehicle time / (dx * dt * n_lanes) and
    u = total distance / total time, accumulated from consecutive sample
    pairs assigned to the cell of their midpoint. Cells no vehicle touched
    are filled from the nearest populated cell.
    """
    lanes_allowed = None if lane_filter is None else set(int(l) for l in lane_filter)
    by_vehicle: dict = {}
    lanes_seen = set()
    dropped = 0
    domain = grid.domain
    for rec in records:
        if lanes_allowed is not None and rec.lane not in lanes_allowed:
            continue
        if not (0.0 <= rec.x <= domain.length_m and 0.0 <= rec.t <= domain.horizon_s):
            dropped += 1
            continue
        lanes_seen.add(rec.lane)
        by_vehicle.setdefault(rec.vehicle_id, []).append(rec)
    if not by_vehicle:
        raise ValueError("no usable trajectory records inside the domain")
    n_lanes = max(len(lanes_seen), 1)
    time_in = np.zeros((grid.nx, grid.nt))
    dist_in = np.zeros((grid.nx, grid.nt))
    for recs in by_vehicle.values():
        recs.sort(key=lambda r: r.t)
        t = np.array([r.t for r in recs])
        x = np.array([r.x for r in recs])
        if len(recs) < 2:
            continue
        dt_pair = np.diff(t)
        dx_pair = np.abs(np.diff(x))
        keep = dt_pair > 0
        mid_x = 0.5 * (x[:-1] + x[1:])[keep]
        mid_t = 0.5 * (t[:-1] + t[1:])[keep]
        ci = np.clip(np.rint(mid_x / grid.dx - 0.5).astype(int), 0, grid.nx - 1)
        ki = np.clip(np.rint(mid_t / grid.dt).astype(int), 0, grid.nt - 1)
        np.add.at(time_in, (ci, ki), dt_pair[keep])
        np.add.at(dist_in, (ci, ki), dx_pair[keep])
    if time_in.sum() == 0:
        raise ValueError("no usable trajectory records (need >= 2 samples per vehicle)")
    rho = time_in / (grid.dx * grid.dt * n_lanes)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(time_in > 0, dist_in / np.maximum(time_in, 1e-300), np.nan)
    missing = time_in == 0
    if np.any(missing):
        _, (ii, kk) = ndimage.distance_transform_edt(missing, return_indices=True)
        rho = rho[ii, kk]
        u = u[ii, kk]
    if info is not None:
        info["n_lanes"] = n_lanes
        info["filled_mask"] = missing
        info["dropped_records"] = dropped
        info["total_time_s"] = float(time_in.sum())
        info["total_distance_m"] = float(dist_in.sum())
    return StateField(grid, rho, np.maximum(u, 0.0))


# -- CSV round trips -----------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _open_header(reader, expected, path) -> None:
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: empty file, expected header {','.join(expected)}")
    got = [h.strip() for h in header]
    if got != expected:
        missing = [h for h in expected if h not in got]
        if missing:
            raise ValueError(f"{path}: header is missing column(s) {missing}")
        raise ValueError(f"{path}: header {got} does not match {expected}")


def write_observations(path, obs: ObservationSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_HEADER)
        for i in range(len(obs)):
            w.writerow([_fmt(obs.x[i]), _fmt(obs.t[i]), _fmt(obs.rho[i]), _fmt(obs.u[i])])


def read_observations(path, domain: Optional[SpaceTimeDomain] = None) -> ObservationSet:
    cols = [array("d") for _ in range(4)]
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _open_header(reader, OBS_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                for c, cell in zip(cols, row):
                    c.append(float(cell))
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return ObservationSet(*(np.frombuffer(c, dtype=np.float64).copy() for c in cols), domain=domain)


def write_collocation(path, colloc: CollocationSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLLOC_HEADER)
        for i in range(len(colloc)):
            w.writerow([_fmt(colloc.x[i]), _fmt(colloc.t[i])])


def read_collocation(path, domain: Optional[SpaceTimeDomain] = None) -> CollocationSet:
    xs, ts = array("d"), array("d")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _open_header(reader, COLLOC_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                xs.append(float(row[0]))
                ts.append(float(row[1]))
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return CollocationSet(np.frombuffer(xs, dtype=np.float64).copy(), np.frombuffer(ts, dtype=np.float64).copy(), domain=domain)


def read_trajectories(
    path,
    frame_period_s: float = 0.1,
    positions_in_feet: bool = False,
) -> list:
    """NGSIM-compatible trajectory CSV; Frame_ID * frame_period_s gives time."""
    out = []
    scale = FEET_TO_METERS if positions_in_feet else 1.0
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _open_header(reader, TRAJ_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                out.append(
                    TrajectoryRecord(
                        vehicle_id=int(row[0]),
                        t=float(row[1]) * frame_period_s,
                        x=float(row[2]) * scale,
                        v=float(row[3]) * scale,
                        lane=int(row[4]),
                    )
                )
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


def write_trajectories(path, records: Iterable[TrajectoryRecord], frame_period_s: float = 0.1) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_HEADER)
        for r in records:
            w.writerow([r.vehicle_id, _fmt(r.t / frame_period_s), _fmt(r.x), _fmt(r.v), r.lane])
