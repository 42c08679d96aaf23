"""Road-segment geometry, grids, state fields, and parameter distributions.

Everything here is immutable after construction and safe to share across
workers. Units are SI throughout: meters, seconds, vehicles/meter, m/s.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "SpaceTimeDomain",
    "Grid",
    "StateField",
    "PhysicsParams",
    "TruncatedGaussian",
    "ParamDistribution",
    "NoiseModel",
    "ObservationRecord",
    "ObservationSet",
    "CollocationSet",
    "Normalization",
    "sample_params",
]

# Output scales chosen so network inputs/outputs are O(1): densities are
# measured against 1.0 veh/m and speeds against 50.0 m/s.
RHO_SCALE = 1.0
U_SCALE = 50.0


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class SpaceTimeDomain:
    """Continuous space-time rectangle [0, L] x [0, T]."""

    length_m: float
    horizon_s: float

    def __post_init__(self):
        _require(np.isfinite(self.length_m) and self.length_m > 0, f"length_m must be > 0, got {self.length_m}")
        _require(np.isfinite(self.horizon_s) and self.horizon_s > 0, f"horizon_s must be > 0, got {self.horizon_s}")

    def contains(self, x: float, t: float) -> bool:
        return 0.0 <= x <= self.length_m and 0.0 <= t <= self.horizon_s


@dataclass(frozen=True)
class Grid:
    """Uniform discretization: nx cells (centered) in space, nt nodes in time.

    Time nodes sit at t_k = k * dt for k = 0..nt-1, so the stored horizon is
    [0, T - dt] and dt * nt == T up to round-off.
    """

    domain: SpaceTimeDomain
    nx: int
    nt: int

    def __post_init__(self):
        _require(self.nx >= 2, f"nx must be >= 2, got {self.nx}")
        _require(self.nt >= 2, f"nt must be >= 2, got {self.nt}")

    @property
    def dx(self) -> float:
        return self.domain.length_m / self.nx

    @property
    def dt(self) -> float:
        return self.domain.horizon_s / self.nt

    def cell_center(self, i: int, k: int) -> tuple[float, float]:
        """Coordinates (x, t) of cell i at time node k."""
        if not (0 <= i < self.nx):
            raise IndexError(f"cell index {i} out of range [0, {self.nx})")
        if not (0 <= k < self.nt):
            raise IndexError(f"time index {k} out of range [0, {self.nt})")
        return (i + 0.5) * self.dx, k * self.dt

    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def t_nodes(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt

    def nearest_cell(self, x: float) -> int:
        """Index of the cell whose center is closest to x (clipped to range)."""
        return int(np.clip(np.rint(x / self.dx - 0.5), 0, self.nx - 1))

    def nearest_node(self, t: float) -> int:
        return int(np.clip(np.rint(t / self.dt), 0, self.nt - 1))


class StateField:
    """Density rho(x,t) and velocity u(x,t) arrays of shape (nx, nt).

    One realization of the traffic-state random field. Values must be
    finite and nonnegative.
    """

    __slots__ = ("grid", "rho", "u")

    def __init__(self, grid: Grid, rho: np.ndarray, u: np.ndarray):
        rho = np.asarray(rho, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        expected = (grid.nx, grid.nt)
        _require(rho.shape == expected, f"rho shape {rho.shape} != {expected}")
        _require(u.shape == expected, f"u shape {u.shape} != {expected}")
        _require(bool(np.all(np.isfinite(rho))), "rho contains non-finite values")
        _require(bool(np.all(np.isfinite(u))), "u contains non-finite values")
        _require(bool(np.all(rho >= 0)), "rho contains negative values")
        _require(bool(np.all(u >= 0)), "u contains negative values")
        self.grid = grid
        self.rho = rho
        self.u = u
        rho.setflags(write=False)
        u.setflags(write=False)

    def total_mass(self, k: int) -> float:
        """Vehicles on the segment at time node k."""
        return float(np.sum(self.rho[:, k]) * self.grid.dx)


@dataclass(frozen=True)
class PhysicsParams:
    """Fundamental-diagram parameters: jam density, free-flow speed, and
    (for the second-order model) the relaxation time tau."""

    rho_max: float
    u_max: float
    tau: Optional[float] = None

    def __post_init__(self):
        _require(np.isfinite(self.rho_max) and self.rho_max > 0, f"rho_max must be > 0, got {self.rho_max}")
        _require(np.isfinite(self.u_max) and self.u_max > 0, f"u_max must be > 0, got {self.u_max}")
        if self.tau is not None:
            _require(np.isfinite(self.tau) and self.tau > 0, f"tau must be > 0, got {self.tau}")

    def require_tau(self) -> float:
        if self.tau is None:
            raise ValueError("tau is required for the second-order model")
        return self.tau


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian truncated to [lower, upper]; std = 0 collapses to the mean."""

    mean: float
    std: float
    lower: float
    upper: float

    def __post_init__(self):
        _require(self.std >= 0, f"std must be >= 0, got {self.std}")
        _require(self.lower < self.upper, f"need lower < upper, got [{self.lower}, {self.upper}]")
        _require(self.lower <= self.mean <= self.upper, f"mean {self.mean} outside [{self.lower}, {self.upper}]")

    def sample(self, rng: np.random.Generator, max_attempts: int = 1000) -> float:
        if self.std == 0.0:
            return self.mean
        for _ in range(max_attempts):
            draw = rng.normal(self.mean, self.std)
            if self.lower <= draw <= self.upper:
                return draw
        raise RuntimeError(
            f"truncated-Gaussian rejection sampling failed after {max_attempts} attempts "
            f"(mean={self.mean}, std={self.std}, bounds=[{self.lower}, {self.upper}])"
        )


@dataclass(frozen=True)
class ParamDistribution:
    """Joint (independent) distribution of the physics parameters."""

    rho_max: TruncatedGaussian
    u_max: TruncatedGaussian
    tau: Optional[TruncatedGaussian] = None

    def means(self) -> PhysicsParams:
        return PhysicsParams(
            rho_max=self.rho_max.mean,
            u_max=self.u_max.mean,
            tau=None if self.tau is None else self.tau.mean,
        )


def sample_params(dist: ParamDistribution, seed) -> PhysicsParams:
    """Draw one PhysicsParams realization; deterministic given the seed.

    `seed` may be an int or an existing numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rho_max = dist.rho_max.sample(rng)
    u_max = dist.u_max.sample(rng)
    tau = None if dist.tau is None else dist.tau.sample(rng)
    return PhysicsParams(rho_max=rho_max, u_max=u_max, tau=tau)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian observation noise on density and speed readings."""

    sigma_rho: float = 0.0
    sigma_u: float = 0.0

    def __post_init__(self):
        _require(self.sigma_rho >= 0, f"sigma_rho must be >= 0, got {self.sigma_rho}")
        _require(self.sigma_u >= 0, f"sigma_u must be >= 0, got {self.sigma_u}")


@dataclass(frozen=True)
class ObservationRecord:
    x: float
    t: float
    rho: float
    u: float


class ObservationSet:
    """Labeled sensor readings (x, t, rho, u), stored columnar."""

    __slots__ = ("x", "t", "rho", "u")

    def __init__(self, x, t, rho, u, domain: Optional[SpaceTimeDomain] = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        self.rho = np.asarray(rho, dtype=np.float64)
        self.u = np.asarray(u, dtype=np.float64)
        n = self.x.shape[0]
        _require(
            self.t.shape == (n,) and self.rho.shape == (n,) and self.u.shape == (n,),
            "observation columns must be 1-D and equal-length",
        )
        for name, col in (("x", self.x), ("t", self.t), ("rho", self.rho), ("u", self.u)):
            _require(bool(np.all(np.isfinite(col))), f"observation column {name} contains non-finite values")
        _require(bool(np.all(self.rho >= 0)), "observed rho must be >= 0")
        _require(bool(np.all(self.u >= 0)), "observed u must be >= 0")
        if domain is not None:
            inside = (self.x >= 0) & (self.x <= domain.length_m) & (self.t >= 0) & (self.t <= domain.horizon_s)
            _require(bool(np.all(inside)), "observation coordinates outside the domain")
        for col in (self.x, self.t, self.rho, self.u):
            col.setflags(write=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[ObservationRecord]:
        for i in range(len(self)):
            yield ObservationRecord(float(self.x[i]), float(self.t[i]), float(self.rho[i]), float(self.u[i]))


class CollocationSet:
    """Unlabeled regularization points (x, t) inside the domain."""

    __slots__ = ("x", "t")

    def __init__(self, x, t, domain: Optional[SpaceTimeDomain] = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        _require(self.x.shape == self.t.shape and self.x.ndim == 1, "collocation columns must be 1-D and equal-length")
        _require(bool(np.all(np.isfinite(self.x))) and bool(np.all(np.isfinite(self.t))), "collocation points must be finite")
        if domain is not None:
            inside = (self.x >= 0) & (self.x <= domain.length_m) & (self.t >= 0) & (self.t <= domain.horizon_s)
            _require(bool(np.all(inside)), "collocation points outside the domain")
        self.x.setflags(write=False)
        self.t.setflags(write=False)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class Normalization:
    """Affine map between SI units and the O(1) coordinates the networks see.

    Space and time map to [0, 1]; density and speed are divided by fixed
    scales (1.0 veh/m, 50.0 m/s).
    """

    domain: SpaceTimeDomain
    rho_scale: float = RHO_SCALE
    u_scale: float = U_SCALE

    def normalize_point(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if np.any(x < 0) or np.any(x > self.domain.length_m) or np.any(t < 0) or np.any(t > self.domain.horizon_s):
            raise ValueError("point outside the domain")
        return x / self.domain.length_m, t / self.domain.horizon_s

    def denormalize_point(self, xn, tn):
        xn = np.asarray(xn, dtype=np.float64)
        tn = np.asarray(tn, dtype=np.float64)
        return xn * self.domain.length_m, tn * self.domain.horizon_s

    def normalize_rho(self, rho):
        return np.asarray(rho, dtype=np.float64) / self.rho_scale

    def denormalize_rho(self, rho_n):
        return np.asarray(rho_n, dtype=np.float64) * self.rho_scale

    def normalize_u(self, u):
        return np.asarray(u, dtype=np.float64) / self.u_scale

    def denormalize_u(self, u_n):
        return np.asarray(u_n, dtype=np.float64) * self.u_scale
