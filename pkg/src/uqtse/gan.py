"""Adversarial traffic-state estimator with physics-regularized training.

The generator maps normalized coordinates plus a latent draw to traffic
state samples; the discriminator scores (x, t, rho, u) tuples. Physics
parameters (jam density, free-flow speed, relaxation time) are learnable in
log-space and updated jointly with the generator from the physics-regularized
loss. The pure-GAN ablation disables the physics term, which also freezes the
physics parameters.

Sign convention (default): the discriminator is trained toward 1 on generated
samples and 0 on real ones, and the generator minimizes the raw score of its
own samples. `classic_gan_losses` switches to the usual non-saturating
convention for stability comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tape
from .domain import Normalization, ObservationSet, CollocationSet, PhysicsParams, SpaceTimeDomain
from .nn import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint
from .physics import DerivativeBundle, arz_residual, equilibrium_speed, lwr_residual
from .solver import NumericalError
from .tape import Tensor, clip, concat_cols, grad_params, log, sigmoid

__all__ = [
    "GeneratorConfig",
    "TrainingConfig",
    "LearnableParams",
    "PhysGan",
    "PredictiveEnsemble",
    "TrainResult",
    "loss_discriminator",
    "loss_physics",
    "loss_generator",
    "train",
    "predict_ensemble",
    "checkpoint_model",
    "restore_model",
]

SCORE_CLAMP = 1e-7
HISTORY_COLUMNS = ("iter", "loss_D", "loss_G", "loss_phy", "rho_max", "u_max", "tau")


@dataclass(frozen=True)
class GeneratorConfig:
    """Generator architecture: estimation mode and latent dimension."""

    mode: str  # "lwr" (density head, speed via the fundamental diagram) or "arz"
    d_z: int = 1
    hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.mode not in ("lwr", "arz"):
            raise ValueError(f"mode must be 'lwr' or 'arz', got {self.mode!r}")
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 0.5
    batch_size: int = 256
    iterations: int = 2000
    lr: float = 0.0005
    n_z: int = 1
    seed: int = 0
    physics_enabled: bool = True
    classic_gan_losses: bool = False
    disc_hidden: tuple = (64, 64)
    lambda_init: tuple = (1.0, 50.0, 5.0)

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_z < 1:
            raise ValueError("n_z must be >= 1")


class LearnableParams:
    """Physics parameters stored in log-space so they stay positive."""

    def __init__(self, rho_max: float, u_max: float, tau: Optional[float] = None):
        self.log_rho_max = Tensor(np.log(float(rho_max)))
        self.log_u_max = Tensor(np.log(float(u_max)))
        self.log_tau = None if tau is None else Tensor(np.log(float(tau)))

    @property
    def rho_max(self) -> Tensor:
        return tape.exp(self.log_rho_max)

    @property
    def u_max(self) -> Tensor:
        return tape.exp(self.log_u_max)

    @property
    def tau(self) -> Optional[Tensor]:
        return None if self.log_tau is None else tape.exp(self.log_tau)

    def raw_tensors(self) -> list:
        out = [self.log_rho_max, self.log_u_max]
        if self.log_tau is not None:
            out.append(self.log_tau)
        return out

    def snapshot(self) -> PhysicsParams:
        return PhysicsParams(
            rho_max=float(np.exp(self.log_rho_max.value)),
            u_max=float(np.exp(self.log_u_max.value)),
            tau=None if self.log_tau is None else float(np.exp(self.log_tau.value)),
        )


@dataclass
class PredictiveEnsemble:
    """Per query point, sampled (rho, u) pairs: arrays (n_points, n_samples)."""

    x: np.ndarray
    t: np.ndarray
    rho: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.rho.ndim != 2 or self.rho.shape != self.u.shape or self.rho.shape[1] < 1:
            raise ValueError("need (n_points, n_samples >= 1) sample arrays")
        if not (np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.u))):
            raise ValueError("predictive samples must be finite")

    @property
    def n_samples(self) -> int:
        return self.rho.shape[1]

    def mean(self) -> tuple:
        return self.rho.mean(axis=1), self.u.mean(axis=1)


class PhysGan:
    """Generator/discriminator pair plus learnable physics parameters."""

    def __init__(
        self,
        gen_config: GeneratorConfig,
        domain: SpaceTimeDomain,
        disc_hidden: tuple = (64, 64),
        lambda_init: tuple = (1.0, 50.0, 5.0),
        seed=0,
    ):
        self.config = gen_config
        self.norm = Normalization(domain)
        n_out = 1 if gen_config.mode == "lwr" else 2
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        gen_seed, disc_seed = ss.spawn(2)
        self.gen = Mlp((2 + gen_config.d_z, *gen_config.hidden, n_out), seed=np.random.default_rng(gen_seed))
        self.disc = Mlp((4, *disc_hidden, 1), seed=np.random.default_rng(disc_seed))
        tau0 = lambda_init[2] if gen_config.mode == "arz" else None
        self.lam = LearnableParams(lambda_init[0], lambda_init[1], tau0)

    @property
    def mode(self) -> str:
        return self.config.mode

    def latent_dim(self) -> int:
        return self.config.d_z

    # -- generator -----------------------------------------------------------

    def generate(self, points_norm: np.ndarray, z: np.ndarray) -> tuple:
        """Differentiable sample at normalized points; returns SI tensors."""
        X = np.concatenate([points_norm, z], axis=1)
        out = self.gen.forward(X)
        if self.mode == "lwr":
            rho = out * self.norm.rho_scale
            u = equilibrium_speed(rho, self.lam)
        else:
            rho = out[:, 0:1] * self.norm.rho_scale
            u = out[:, 1:2] * self.norm.u_scale
        return rho, u

    def generate_numpy(self, points_norm: np.ndarray, z: np.ndarray) -> tuple:
        """Fast non-differentiable sampling used for prediction and metrics."""
        X = np.concatenate([points_norm, z], axis=1)
        out = self.gen.forward_numpy(X)
        lam = self.lam.snapshot()
        if self.mode == "lwr":
            rho = out[:, 0] * self.norm.rho_scale
            u = equilibrium_speed(rho, lam)
        else:
            rho = out[:, 0] * self.norm.rho_scale
            u = out[:, 1] * self.norm.u_scale
        return rho, u

    def generate_with_derivs(self, points_norm: np.ndarray, z: np.ndarray) -> DerivativeBundle:
        """State and SI-space first derivatives at collocation points.

        The network differentiates in normalized coordinates; the chain-rule
        factors 1/L and 1/T convert to physical derivatives.
        """
        X = np.concatenate([points_norm, z], axis=1)
        ev = self.gen.forward_with_input_derivs(X, coords=(0, 1))
        inv_L = 1.0 / self.norm.domain.length_m
        inv_T = 1.0 / self.norm.domain.horizon_s
        rs, us = self.norm.rho_scale, self.norm.u_scale
        if self.mode == "lwr":
            rho = ev.outputs * rs
            d_rho_dx = ev.d_input[0] * (rs * inv_L)
            d_rho_dt = ev.d_input[1] * (rs * inv_T)
            u = equilibrium_speed(rho, self.lam)
            slope = self.lam.u_max / self.lam.rho_max
            d_u_dx = -(slope * d_rho_dx)
            d_u_dt = -(slope * d_rho_dt)
        else:
            rho = ev.outputs[:, 0:1] * rs
            u = ev.outputs[:, 1:2] * us
            d_rho_dx = ev.d_input[0][:, 0:1] * (rs * inv_L)
            d_rho_dt = ev.d_input[1][:, 0:1] * (rs * inv_T)
            d_u_dx = ev.d_input[0][:, 1:2] * (us * inv_L)
            d_u_dt = ev.d_input[1][:, 1:2] * (us * inv_T)
        return DerivativeBundle(rho=rho, u=u, d_rho_dt=d_rho_dt, d_rho_dx=d_rho_dx, d_u_dt=d_u_dt, d_u_dx=d_u_dx)

    # -- discriminator ---------------------------------------------------------

    def discriminator_score(self, points_norm: np.ndarray, rho, u) -> Tensor:
        """Score in (0, 1); rho/u may be SI tensors (generated) or arrays (real)."""
        rho_n = rho * (1.0 / self.norm.rho_scale)
        u_n = u * (1.0 / self.norm.u_scale)
        if not isinstance(rho_n, Tensor):
            rho_n = Tensor(np.asarray(rho_n, dtype=np.float64).reshape(-1, 1))
        if not isinstance(u_n, Tensor):
            u_n = Tensor(np.asarray(u_n, dtype=np.float64).reshape(-1, 1))
        X = concat_cols([Tensor(points_norm), rho_n, u_n])
        return sigmoid(self.disc.forward(X))

    # -- parameter access --------------------------------------------------------

    def theta(self) -> list:
        return self.gen.params()

    def phi(self) -> list:
        return self.disc.params()

    def normalize_coords(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        xn, tn = self.norm.normalize_point(x, t)
        return np.column_stack([xn, tn])


# -- losses ---------------------------------------------------------------------


def _clamped_log(s: Tensor) -> Tensor:
    return log(clip(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP))


def loss_discriminator(
    model: PhysGan,
    points_norm: np.ndarray,
    rho_real: np.ndarray,
    u_real: np.ndarray,
    z: np.ndarray,
    classic: bool = False,
) -> Tensor:
    """Discriminator loss on one observation batch with fresh latent draws.

    Generated counterparts are treated as constants here (only the
    discriminator parameters receive gradients).
    """
    rho_fake, u_fake = model.generate_numpy(points_norm, z)
    s_fake = model.discriminator_score(points_norm, rho_fake, u_fake)
    s_real = model.discriminator_score(points_norm, rho_real, u_real)
    if classic:
        return (-(_clamped_log(s_real)) - _clamped_log(1.0 - s_fake)).mean()
    return (-(_clamped_log(s_fake)) - _clamped_log(1.0 - s_real)).mean()


def loss_physics(model: PhysGan, colloc_points_norm: np.ndarray, z: np.ndarray) -> Tensor:
    """Monte Carlo mean of squared residuals over collocation points and z.

    `z` has one row per residual evaluation; collocation points are repeated
    to match when several latent draws per point are used.
    """
    n_eval = z.shape[0]
    if n_eval % colloc_points_norm.shape[0] != 0:
        raise ValueError("z rows must be a multiple of the collocation batch")
    reps = n_eval // colloc_points_norm.shape[0]
    pts = np.repeat(colloc_points_norm, reps, axis=0) if reps > 1 else colloc_points_norm
    bundle = model.generate_with_derivs(pts, z)
    if model.mode == "lwr":
        res = lwr_residual(bundle, model.lam)
        return (res.r1 * res.r1).mean()
    res = arz_residual(bundle, model.lam)
    return (res.r1 * res.r1).mean() + (res.r2 * res.r2).mean()


def loss_generator(
    model: PhysGan,
    obs_points_norm: np.ndarray,
    z_data: np.ndarray,
    colloc_points_norm: Optional[np.ndarray],
    z_phys: Optional[np.ndarray],
    alpha: float,
    physics_enabled: bool = True,
    classic: bool = False,
) -> tuple:
    """Generator objective: alpha * data term + (1 - alpha) * physics term.

    Returns (total, physics term or None). The physics factor drops entirely
    in pure-GAN mode.
    """
    rho_fake, u_fake = model.generate(obs_points_norm, z_data)
    s_fake = model.discriminator_score(obs_points_norm, rho_fake, u_fake)
    if classic:
        data_term = (-_clamped_log(s_fake)).mean()
    else:
        data_term = s_fake.mean()
    if not physics_enabled:
        return alpha * data_term, None
    phy = loss_physics(model, colloc_points_norm, z_phys)
    return alpha * data_term + (1.0 - alpha) * phy, phy


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: PhysGan
    history: list = field(default_factory=list)  # rows follow HISTORY_COLUMNS

    def history_array(self) -> np.ndarray:
        return np.array(self.history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))

    def final_lambda(self) -> PhysicsParams:
        return self.model.lam.snapshot()


def _draw_batch(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    if n >= m:
        return rng.choice(n, size=m, replace=False)
    return rng.integers(0, n, size=m)


def _snapshot(model: PhysGan) -> dict:
    return {
        "gen": model.gen.flat_params(),
        "disc": model.disc.flat_params(),
        "lam": np.array([t.value.copy() for t in model.lam.raw_tensors()]),
    }


def train(
    gen_config: GeneratorConfig,
    cfg: TrainingConfig,
    observations: ObservationSet,
    collocation: CollocationSet,
    domain: SpaceTimeDomain,
    checkpoint_on_failure: Optional[str] = None,
    on_iteration=None,
) -> TrainResult:
    """Alternating adversarial training: one discriminator update then one
    generator(+physics parameter) update per iteration, deterministically
    seeded. With the physics term disabled the physics parameters are never
    touched."""
    if len(observations) == 0:
        raise ValueError("empty observation set")
    if cfg.physics_enabled and len(collocation) == 0:
        raise ValueError("empty collocation set")
    init_seed, stream_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    model = PhysGan(gen_config, domain, disc_hidden=cfg.disc_hidden, lambda_init=cfg.lambda_init, seed=init_seed)
    rng = np.random.default_rng(stream_seed)

    theta = model.theta()
    phi = model.phi()
    lam_raw = model.lam.raw_tensors()
    opt_theta = AdamState.for_params(theta, lr=cfg.lr)
    opt_phi = AdamState.for_params(phi, lr=cfg.lr)
    opt_lam = AdamState.for_params(lam_raw, lr=cfg.lr)

    obs_pts = model.normalize_coords(observations.x, observations.t)
    obs_rho = observations.rho
    obs_u = observations.u
    colloc_pts = None
    if len(collocation) > 0:
        colloc_pts = model.normalize_coords(collocation.x, collocation.t)

    d_z = gen_config.d_z
    result = TrainResult(model=model)
    last_good = _snapshot(model)
    for it in range(cfg.iterations):
        try:
            idx_o = _draw_batch(rng, len(observations), cfg.batch_size)
            pts_o = obs_pts[idx_o]
            z_d = rng.standard_normal((len(idx_o), d_z))
            l_d = loss_discriminator(model, pts_o, obs_rho[idx_o], obs_u[idx_o], z_d, classic=cfg.classic_gan_losses)
            adam_step(opt_phi, phi, grad_params(l_d, phi))

            z_g = rng.standard_normal((len(idx_o), d_z))
            pts_c = z_p = None
            if cfg.physics_enabled:
                idx_c = _draw_batch(rng, len(collocation), cfg.batch_size)
                pts_c = colloc_pts[idx_c]
                z_p = rng.standard_normal((len(idx_c) * cfg.n_z, d_z))
            l_g, l_phy = loss_generator(
                model,
                pts_o,
                z_g,
                pts_c,
                z_p,
                cfg.alpha,
                physics_enabled=cfg.physics_enabled,
                classic=cfg.classic_gan_losses,
            )
            grads = grad_params(l_g, theta + lam_raw)
            adam_step(opt_theta, theta, grads[: len(theta)])
            if cfg.physics_enabled:
                adam_step(opt_lam, lam_raw, grads[len(theta) :])
            ld_v, lg_v = float(l_d.value), float(l_g.value)
            lphy_v = float(l_phy.value) if l_phy is not None else np.nan
            if not (np.isfinite(ld_v) and np.isfinite(lg_v)):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
        except FloatingPointError as err:
            if checkpoint_on_failure is not None:
                save_checkpoint(checkpoint_on_failure, last_good, {"failed_iteration": it})
            raise NumericalError(f"training aborted: {err}") from err
        last_good = _snapshot(model)
        lam_now = model.lam.snapshot()
        row = (it, ld_v, lg_v, lphy_v, lam_now.rho_max, lam_now.u_max, np.nan if lam_now.tau is None else lam_now.tau)
        result.history.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return result


def predict_ensemble(model: PhysGan, x: np.ndarray, t: np.ndarray, n_samples: int, seed: int) -> PredictiveEnsemble:
    """Sample the generator n_samples times per query point."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    pts = model.normalize_coords(x, t)
    n_pts = pts.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, n_pts, model.latent_dim()))
    tiled = np.tile(pts, (n_samples, 1))
    rho, u = model.generate_numpy(tiled, z.reshape(n_samples * n_pts, -1))
    return PredictiveEnsemble(
        x=x,
        t=t,
        rho=rho.reshape(n_samples, n_pts).T.copy(),
        u=u.reshape(n_samples, n_pts).T.copy(),
    )


# -- checkpoints ---------------------------------------------------------------


def checkpoint_model(path, model: PhysGan, optimizers: Optional[dict] = None, rng_state: Optional[dict] = None) -> None:
    arrays = {
        "gen_params": model.gen.flat_params(),
        "disc_params": model.disc.flat_params(),
        "lam_log": np.array([t.value for t in model.lam.raw_tensors()]),
    }
    meta = {
        "mode": model.mode,
        "d_z": model.config.d_z,
        "gen_hidden": list(model.config.hidden),
        "disc_widths": list(model.disc.widths),
        "length_m": model.norm.domain.length_m,
        "horizon_s": model.norm.domain.horizon_s,
        "has_tau": model.lam.log_tau is not None,
        "rng_state": rng_state,
    }
    if optimizers is not None:
        for name, opt in optimizers.items():
            arrays[f"adam_{name}_m"] = np.concatenate([m.ravel() for m in opt.m])
            arrays[f"adam_{name}_v"] = np.concatenate([v.ravel() for v in opt.v])
            meta[f"adam_{name}_step"] = opt.step_count
            meta[f"adam_{name}_lr"] = opt.lr
    save_checkpoint(path, arrays, meta)


def restore_model(path) -> tuple:
    """Rebuild a PhysGan (plus metadata) from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    gen_config = GeneratorConfig(mode=meta["mode"], d_z=meta["d_z"], hidden=tuple(meta["gen_hidden"]))
    domain = SpaceTimeDomain(meta["length_m"], meta["horizon_s"])
    model = PhysGan(gen_config, domain, disc_hidden=tuple(meta["disc_widths"][1:-1]))
    model.gen.set_flat_params(arrays["gen_params"])
    model.disc.set_flat_params(arrays["disc_params"])
    lam_log = arrays["lam_log"]
    model.lam = LearnableParams(float(np.exp(lam_log[0])), float(np.exp(lam_log[1])), float(np.exp(lam_log[2])) if meta["has_tau"] else None)
    return model, meta
