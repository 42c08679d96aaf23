"""Experiment configuration schema and the pipeline steps behind the CLI.

Configs are JSON with fixed sections; unknown keys are rejected so typos fail
fast. Every artifact-producing step writes a manifest (resolved config, seeds,
schema version) sufficient to reproduce its outputs bit-exactly, and all final
artifacts are written via write-then-rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .domain import NoiseModel, ParamDistribution, SpaceTimeDomain, TruncatedGaussian
from .ekf import run_ekf
from .evaluation import (
    EvalSettings,
    MetricReport,
    MetricRow,
    ekf_metrics,
    gan_metrics,
)
from .gan import (
    GeneratorConfig,
    TrainingConfig,
    checkpoint_model,
    restore_model,
    train,
)
from .sensing import (
    place_detectors,
    read_collocation,
    read_observations,
    sample_collocation,
    extract_observations,
    write_collocation,
    write_observations,
)
from .solver import (
    BoundaryCondition,
    ConstantInflow,
    ConstantProfile,
    Ensemble,
    JamPocketProfile,
    RiemannProfile,
    Scenario,
    SineProfile,
    SinusoidalInflow,
    generate_ensemble,
    read_ensemble,
    write_ensemble,
)

__all__ = [
    "ConfigError",
    "MissingInputError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "derive_seed",
    "build_scenario",
    "run_simulate",
    "run_make_dataset",
    "run_train",
    "run_evaluate",
    "run_sweep",
    "run_report",
    "SWEEP_MODELS",
]

SCHEMA_VERSION = 1
SWEEP_MODELS = ("lwr_physgan", "arz_physgan", "pure_gan", "ekf")
HISTORY_CSV_HEADER = "iter,loss_D,loss_G,loss_phy,rho_max,u_max,tau"


class ConfigError(ValueError):
    """Configuration file is malformed or violates the schema."""


class MissingInputError(FileNotFoundError):
    """An upstream artifact required by a command does not exist."""


# -- schema -------------------------------------------------------------------


def _section(raw: dict, name: str, defaults: dict, required: tuple = ()) -> dict:
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(data) - set(defaults) - set(required)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"section {name!r} is missing required key(s): {missing}")
    out = dict(defaults)
    out.update(data)
    return out


def _trunc_gauss(d: dict, where: str) -> TruncatedGaussian:
    if not isinstance(d, dict) or set(d) != {"mean", "std", "lower", "upper"}:
        raise ConfigError(f"{where} must have exactly keys mean/std/lower/upper")
    try:
        return TruncatedGaussian(mean=d["mean"], std=d["std"], lower=d["lower"], upper=d["upper"])
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


_PROFILE_KINDS = {
    "constant": ConstantProfile,
    "riemann": RiemannProfile,
    "jam_pocket": JamPocketProfile,
    "sine": SineProfile,
}
_INFLOW_KINDS = {"constant": ConstantInflow, "sinusoidal": SinusoidalInflow}


def _from_kind(d: dict, registry: dict, where: str):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{where} must be an object with a 'kind' key")
    kind = d["kind"]
    if kind not in registry:
        raise ConfigError(f"{where}: unknown kind {kind!r} (choose from {sorted(registry)})")
    kwargs = {k: v for k, v in d.items() if k != "kind"}
    try:
        return registry[kind](**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    master_seed: int
    scenario: dict
    sensing: dict
    model: dict
    training: dict
    evaluation: dict
    sweep: dict
    paths: dict

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **section_updates) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        for name, updates in section_updates.items():
            raw.setdefault(name, {}).update(updates)
        return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known_top = {"schema_version", "master_seed", "scenario", "sensing", "model", "training", "evaluation", "sweep", "paths"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    if "master_seed" not in raw or not isinstance(raw["master_seed"], int):
        raise ConfigError("master_seed (integer) is required")

    scenario = _section(
        raw,
        "scenario",
        defaults={
            "length_m": 1000.0,
            "horizon_s": 300.0,
            "model": "arz",
            "nx": 60,
            "n_realizations": 50,
            "initial": {"kind": "jam_pocket", "background_frac": 0.15, "jam_frac": 0.75, "start_frac": 0.4, "end_frac": 0.6},
            "inflow": {"kind": "sinusoidal", "base_frac": 0.15, "amplitude_frac": 0.08, "period_s": 120.0},
            "noise": {"sigma_rho": 0.01, "sigma_u": 0.5},
        },
        required=("lambda",),
    )
    noise = scenario["noise"]
    if not isinstance(noise, dict) or set(noise) - {"sigma_rho", "sigma_u"}:
        raise ConfigError("scenario.noise accepts only sigma_rho/sigma_u")
    lam = scenario["lambda"]
    if not isinstance(lam, dict) or set(lam) - {"rho_max", "u_max", "tau"}:
        raise ConfigError("scenario.lambda accepts only rho_max/u_max/tau")
    if "rho_max" not in lam or "u_max" not in lam:
        raise ConfigError("scenario.lambda requires rho_max and u_max")

    sensing = _section(
        raw,
        "sensing",
        defaults={"n_detectors": 18, "period_s": 5.0, "n_collocation": 4000, "strategy": "latin-hypercube"},
    )
    model = _section(
        raw,
        "model",
        defaults={"mode": "arz", "d_z": 1, "hidden": [64, 64, 64], "disc_hidden": [64, 64]},
    )
    training = _section(
        raw,
        "training",
        defaults={
            "alpha": 0.5,
            "batch_size": 256,
            "iterations": 2000,
            "lr": 0.0005,
            "n_z": 1,
            "physics_enabled": True,
            "classic_gan_losses": False,
            "lambda_init": [1.0, 50.0, 5.0],
            "seed_index": 0,
        },
    )
    evaluation = _section(
        raw,
        "evaluation",
        defaults={
            "time_stride": 8,
            "n_samples_mean": 32,
            "n_samples_kl": 200,
            "n_probe_times": 20,
            "hist_bins": 32,
            "record_wall_time": False,
            "target": "train",
        },
    )
    if evaluation["target"] not in ("train", "ekf", "truth"):
        raise ConfigError("evaluation.target must be one of train/ekf/truth")
    sweep = _section(
        raw,
        "sweep",
        defaults={"detector_counts": [4, 8, 12, 18], "models": list(SWEEP_MODELS), "n_seeds": 3},
    )
    for m in sweep["models"]:
        if m not in SWEEP_MODELS:
            raise ConfigError(f"sweep.models: unknown model {m!r} (choose from {list(SWEEP_MODELS)})")
    if not sweep["detector_counts"]:
        raise ConfigError("sweep.detector_counts must be nonempty")
    paths = _section(
        raw,
        "paths",
        defaults={
            "ensemble": "ensemble.npz",
            "observations": "observations.csv",
            "collocation": "collocation.csv",
            "checkpoint": "checkpoint.npz",
            "cells_dir": "cells",
        },
    )
    return ExperimentConfig(
        raw=raw,
        master_seed=raw["master_seed"],
        scenario=scenario,
        sensing=sensing,
        model=model,
        training=training,
        evaluation=evaluation,
        sweep=sweep,
        paths=paths,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    return parse_config(raw)


# -- derived objects -----------------------------------------------------------


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a label path (master seed, strings, ints)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_domain(cfg: ExperimentConfig) -> SpaceTimeDomain:
    return SpaceTimeDomain(cfg.scenario["length_m"], cfg.scenario["horizon_s"])


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    sc = cfg.scenario
    lam = sc["lambda"]
    dist = ParamDistribution(
        rho_max=_trunc_gauss(lam["rho_max"], "scenario.lambda.rho_max"),
        u_max=_trunc_gauss(lam["u_max"], "scenario.lambda.u_max"),
        tau=_trunc_gauss(lam["tau"], "scenario.lambda.tau") if "tau" in lam else None,
    )
    try:
        return Scenario(
            domain=build_domain(cfg),
            model=sc["model"],
            initial=_from_kind(sc["initial"], _PROFILE_KINDS, "scenario.initial"),
            boundary=BoundaryCondition(inflow=_from_kind(sc["inflow"], _INFLOW_KINDS, "scenario.inflow")),
            lambda_dist=dist,
            noise=NoiseModel(**sc["noise"]),
            nx=sc["nx"],
            seed=cfg.master_seed,
        )
    except ValueError as err:
        raise ConfigError(f"scenario: {err}") from None


def build_eval_settings(cfg: ExperimentConfig, seed: int) -> EvalSettings:
    ev = cfg.evaluation
    return EvalSettings(
        time_stride=ev["time_stride"],
        n_samples_mean=ev["n_samples_mean"],
        n_samples_kl=ev["n_samples_kl"],
        n_probe_times=ev["n_probe_times"],
        hist_bins=ev["hist_bins"],
        seed=seed,
    )


def model_cell_settings(cfg: ExperimentConfig, model_name: str, seed: int) -> tuple:
    """(GeneratorConfig, TrainingConfig) for one trainable sweep model."""
    mc, tc = cfg.model, cfg.training
    if model_name == "lwr_physgan":
        mode, physics = "lwr", True
    elif model_name == "arz_physgan":
        mode, physics = "arz", True
    elif model_name == "pure_gan":
        mode, physics = "arz", False
    else:
        raise ValueError(f"{model_name!r} is not a trainable model")
    gen = GeneratorConfig(mode=mode, d_z=mc["d_z"], hidden=tuple(mc["hidden"]))
    training = TrainingConfig(
        alpha=tc["alpha"],
        batch_size=tc["batch_size"],
        iterations=tc["iterations"],
        lr=tc["lr"],
        n_z=tc["n_z"],
        seed=seed,
        physics_enabled=physics,
        classic_gan_losses=tc["classic_gan_losses"],
        disc_hidden=tuple(mc["disc_hidden"]),
        lambda_init=tuple(tc["lambda_init"]),
    )
    return gen, training


def config_model_name(cfg: ExperimentConfig) -> str:
    if not cfg.training["physics_enabled"]:
        return "pure_gan"
    return f"{cfg.model['mode']}_physgan"


# -- filesystem helpers ----------------------------------------------------------


def _resolve(out_dir: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(out_dir, p)


def _atomic_write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, cfg: ExperimentConfig, artifacts: list, seeds: dict) -> None:
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "config_sha256": cfg.sha256(),
        "config": cfg.raw,
        "master_seed": cfg.master_seed,
        "derived_seeds": seeds,
        "artifacts": sorted(artifacts),
    }
    _atomic_write_text(os.path.join(out_dir, f"manifest_{command}.json"), json.dumps(manifest, indent=2, sort_keys=True))


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path}")
    return path


# -- pipeline steps ----------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig, out_dir: str) -> str:
    """Generate the ground-truth ensemble and export it."""
    os.makedirs(out_dir, exist_ok=True)
    scenario = build_scenario(cfg)
    seed = derive_seed(cfg.master_seed, "ensemble")
    ensemble = generate_ensemble(scenario, cfg.scenario["n_realizations"], seed)
    path = _resolve(out_dir, cfg.paths["ensemble"])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_ensemble(path, ensemble)
    _write_manifest(out_dir, "simulate", cfg, [os.path.basename(path)], {"ensemble": seed})
    return path


def run_make_dataset(cfg: ExperimentConfig, out_dir: str) -> tuple:
    """Extract detector observations and sample collocation points."""
    os.makedirs(out_dir, exist_ok=True)
    ensemble_path = _require_file(_resolve(out_dir, cfg.paths["ensemble"]), "ensemble")
    ensemble = read_ensemble(ensemble_path)
    scenario = build_scenario(cfg)
    n_det = cfg.sensing["n_detectors"]
    detectors = place_detectors(n_det, ensemble.grid.domain, cfg.sensing["period_s"])
    obs_seed = derive_seed(cfg.master_seed, "observations", n_det)
    colloc_seed = derive_seed(cfg.master_seed, "collocation")
    obs = extract_observations(ensemble, detectors, scenario.noise, obs_seed)
    colloc = sample_collocation(cfg.sensing["n_collocation"], ensemble.grid.domain, cfg.sensing["strategy"], colloc_seed)
    obs_path = _resolve(out_dir, cfg.paths["observations"])
    colloc_path = _resolve(out_dir, cfg.paths["collocation"])
    os.makedirs(os.path.dirname(os.path.abspath(obs_path)), exist_ok=True)
    os.makedirs(os.path.dirname(os.path.abspath(colloc_path)), exist_ok=True)
    tmp_obs, tmp_colloc = obs_path + ".tmp", colloc_path + ".tmp"
    write_observations(tmp_obs, obs)
    write_collocation(tmp_colloc, colloc)
    os.replace(tmp_obs, obs_path)
    os.replace(tmp_colloc, colloc_path)
    _write_manifest(
        out_dir,
        "make_dataset",
        cfg,
        [os.path.basename(obs_path), os.path.basename(colloc_path)],
        {"observations": obs_seed, "collocation": colloc_seed},
    )
    return obs_path, colloc_path


def run_train(cfg: ExperimentConfig, out_dir: str) -> str:
    """Train the configured model, streaming the loss history CSV."""
    os.makedirs(out_dir, exist_ok=True)
    domain = build_domain(cfg)
    obs = read_observations(_require_file(_resolve(out_dir, cfg.paths["observations"]), "observations"), domain)
    colloc = read_collocation(_require_file(_resolve(out_dir, cfg.paths["collocation"]), "collocation"), domain)
    model_name = config_model_name(cfg)
    seed = derive_seed(cfg.master_seed, "train", model_name, cfg.sensing["n_detectors"], cfg.training["seed_index"])
    gen_config, train_config = model_cell_settings(cfg, model_name, seed)
    history_path = os.path.join(out_dir, "loss_history.csv")
    ckpt_path = _resolve(out_dir, cfg.paths["checkpoint"])
    partial = history_path + ".partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(HISTORY_CSV_HEADER + "\n")
        fh.flush()

        def stream(row):
            cells = [str(int(row[0]))] + [repr(float(v)) for v in row[1:]]
            fh.write(",".join(cells) + "\n")
            fh.flush()

        result = train(
            gen_config,
            train_config,
            obs,
            colloc,
            domain,
            checkpoint_on_failure=os.path.join(out_dir, "failure_checkpoint.npz"),
            on_iteration=stream,
        )
    os.replace(partial, history_path)
    checkpoint_model(ckpt_path, result.model)
    _write_manifest(out_dir, "train", cfg, [os.path.basename(ckpt_path), "loss_history.csv"], {"train": seed})
    return ckpt_path


def _metric_row(cfg: ExperimentConfig, model_name: str, seed_idx: int, metrics: tuple, lam_hat: tuple, wall_s) -> MetricRow:
    return MetricRow(
        model=model_name,
        n_detectors=cfg.sensing["n_detectors"],
        seed=seed_idx,
        re_rho=metrics[0],
        re_u=metrics[1],
        kl_rho=metrics[2],
        kl_u=metrics[3],
        rho_max_hat=lam_hat[0],
        u_max_hat=lam_hat[1],
        tau_hat=lam_hat[2],
        wall_s=wall_s,
    )


def run_evaluate(cfg: ExperimentConfig, out_dir: str) -> MetricRow:
    """Compare the configured estimator against the truth ensemble."""
    os.makedirs(out_dir, exist_ok=True)
    ensemble = read_ensemble(_require_file(_resolve(out_dir, cfg.paths["ensemble"]), "ensemble"))
    n_det = cfg.sensing["n_detectors"]
    detectors = place_detectors(n_det, ensemble.grid.domain, cfg.sensing["period_s"])
    target = cfg.evaluation["target"]
    seed_idx = cfg.training["seed_index"]
    start = time.perf_counter()
    if target == "train":
        model_name = config_model_name(cfg)
        model, _ = restore_model(_require_file(_resolve(out_dir, cfg.paths["checkpoint"]), "checkpoint"))
        settings = build_eval_settings(cfg, derive_seed(cfg.master_seed, "eval", model_name, n_det, seed_idx))
        metrics = gan_metrics(model, ensemble, detectors, settings)
        lam = model.lam.snapshot()
        lam_hat = (lam.rho_max, lam.u_max, np.nan if lam.tau is None else lam.tau)
    elif target == "ekf":
        model_name = "ekf"
        scenario = build_scenario(cfg)
        obs = read_observations(_require_file(_resolve(out_dir, cfg.paths["observations"]), "observations"), ensemble.grid.domain)
        result = run_ekf(scenario, ensemble.grid, obs, scenario.noise)
        settings = build_eval_settings(cfg, derive_seed(cfg.master_seed, "eval", model_name, n_det, seed_idx))
        metrics = ekf_metrics(result, ensemble, detectors, settings)
        means = scenario.lambda_dist.means()
        lam_hat = (means.rho_max, means.u_max, np.nan if means.tau is None else means.tau)
        fields_path = os.path.join(out_dir, "ekf_fields.npz")
        write_ensemble(
            fields_path,
            Ensemble(grid=ensemble.grid, realizations=(result.mean, result.variance), lambdas=(means, means)),
            estimator="ekf",
        )
    else:  # truth self-check fixture
        model_name = "truth"
        settings = build_eval_settings(cfg, derive_seed(cfg.master_seed, "eval", model_name, n_det, seed_idx))
        metrics = _truth_fixture_metrics(ensemble, detectors, settings)
        lam_hat = (np.nan, np.nan, np.nan)
    wall = time.perf_counter() - start
    row = _metric_row(cfg, model_name, seed_idx, metrics, lam_hat, wall if cfg.evaluation["record_wall_time"] else None)
    report = MetricReport(rows=[row], probe_description=_probe_description(cfg))
    _atomic_write_text(os.path.join(out_dir, "metrics.csv"), report.to_csv(include_wall_time=cfg.evaluation["record_wall_time"]))
    _write_manifest(out_dir, "evaluate", cfg, ["metrics.csv"], {"eval": settings.seed})
    return row


def _truth_fixture_metrics(ensemble: Ensemble, detectors, settings: EvalSettings) -> tuple:
    """Evaluate the truth ensemble against itself; all metrics must be zero."""
    from .evaluation import HistogramSpec, kl_divergence, probe_coordinates, relative_error

    t_idx = np.arange(0, ensemble.grid.nt, max(settings.time_stride, 1))
    mean_rho, mean_u = ensemble.mean_field()
    re_rho = relative_error(mean_rho[:, t_idx], mean_rho[:, t_idx])
    re_u = relative_error(mean_u[:, t_idx], mean_u[:, t_idx])
    px, pt = probe_coordinates(detectors, ensemble.grid.domain, settings.n_probe_times)
    spec_rho = HistogramSpec.for_rho(settings.hist_bins)
    spec_u = HistogramSpec.for_u(settings.hist_bins)
    kls_rho, kls_u = [], []
    for i in range(len(px)):
        c, k = ensemble.grid.nearest_cell(px[i]), ensemble.grid.nearest_node(pt[i])
        rho_samples = np.array([f.rho[c, k] for f in ensemble.realizations])
        u_samples = np.array([f.u[c, k] for f in ensemble.realizations])
        kls_rho.append(kl_divergence(rho_samples, rho_samples, spec_rho))
        kls_u.append(kl_divergence(u_samples, u_samples, spec_u))
    return re_rho, re_u, float(np.mean(kls_rho)), float(np.mean(kls_u))


def _probe_description(cfg: ExperimentConfig) -> str:
    return (
        f"probes: detector positions x {cfg.evaluation['n_probe_times']} evenly spaced times; "
        f"RE grid: all cells, every {cfg.evaluation['time_stride']}-th time node"
    )


# -- sweep ------------------------------------------------------------------------


def sweep_cells(cfg: ExperimentConfig) -> list:
    return [
        (model, count, seed_idx)
        for count in cfg.sweep["detector_counts"]
        for model in cfg.sweep["models"]
        for seed_idx in range(cfg.sweep["n_seeds"])
    ]


def dataset_config(cfg: ExperimentConfig, count: int) -> ExperimentConfig:
    """Config that makes the shared per-count dataset under the sweep out dir."""
    return cfg.with_overrides(
        sensing={"n_detectors": count},
        paths={"observations": os.path.join("datasets", f"observations_{count}.csv")},
    )


def derive_cell_config(cfg: ExperimentConfig, model: str, count: int, seed_idx: int, top_out: str) -> ExperimentConfig:
    """Per-cell config: model knobs plus absolute paths to the shared inputs,
    so the cell can use its own output directory."""
    updates = {
        "sensing": {"n_detectors": count},
        "training": {"seed_index": seed_idx},
        "paths": {
            "ensemble": os.path.abspath(_resolve(top_out, cfg.paths["ensemble"])),
            "observations": os.path.abspath(os.path.join(top_out, "datasets", f"observations_{count}.csv")),
            "collocation": os.path.abspath(_resolve(top_out, cfg.paths["collocation"])),
            "checkpoint": "checkpoint.npz",
        },
    }
    if model == "ekf":
        updates["evaluation"] = {"target": "ekf"}
    else:
        updates["evaluation"] = {"target": "train"}
        if model == "pure_gan":
            updates["training"]["physics_enabled"] = False
            updates["model"] = {"mode": "arz"}
        else:
            updates["training"]["physics_enabled"] = True
            updates["model"] = {"mode": model.split("_")[0]}
    return cfg.with_overrides(**updates)


def run_sweep_cell(cfg: ExperimentConfig, out_dir: str, model: str, count: int, seed_idx: int) -> MetricRow:
    """One (model, detector count, seed) cell in its own run directory;
    persists the resulting row as JSON for incremental report assembly."""
    cell_name = f"{model}_{count}_{seed_idx}"
    cell_dir = os.path.join(out_dir, "runs", cell_name)
    cell_cfg = derive_cell_config(cfg, model, count, seed_idx, out_dir)
    if not os.path.exists(cell_cfg.paths["observations"]):
        run_make_dataset(dataset_config(cfg, count), out_dir)
    start = time.perf_counter()
    if model != "ekf":
        run_train(cell_cfg, cell_dir)
    row = run_evaluate(cell_cfg, cell_dir)
    wall = time.perf_counter() - start
    if cfg.evaluation["record_wall_time"]:
        row.wall_s = wall
    cells_dir = os.path.join(out_dir, cfg.paths["cells_dir"])
    os.makedirs(cells_dir, exist_ok=True)
    payload = asdict(row)
    _atomic_write_text(os.path.join(cells_dir, f"{cell_name}.json"), json.dumps(payload, indent=2, sort_keys=True))
    return row


def _run_cell_entry(args) -> dict:
    cfg_raw, out_dir, model, count, seed_idx = args
    row = run_sweep_cell(parse_config(cfg_raw), out_dir, model, count, seed_idx)
    return asdict(row)


def run_sweep(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> MetricReport:
    """Full protocol: ensemble, datasets, all cells, and the assembled report.

    Composed from the same steps as the atomic commands. Cells are
    independent; with threads > 1 they run in worker processes and their
    persisted results are merged in deterministic order.
    """
    os.makedirs(out_dir, exist_ok=True)
    ensemble_path = _resolve(out_dir, cfg.paths["ensemble"])
    if not os.path.exists(ensemble_path):
        run_simulate(cfg, out_dir)
    cells = sweep_cells(cfg)
    # build shared datasets up front so concurrent cells never race on them
    for count in cfg.sweep["detector_counts"]:
        if not os.path.exists(_resolve(out_dir, os.path.join("datasets", f"observations_{count}.csv"))):
            run_make_dataset(dataset_config(cfg, count), out_dir)
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_run_cell_entry, [(cfg.raw, out_dir, m, c, s) for m, c, s in cells]))
    else:
        for model, count, seed_idx in cells:
            run_sweep_cell(cfg, out_dir, model, count, seed_idx)
    report = run_report(cfg, out_dir)
    _write_manifest(out_dir, "sweep", cfg, ["report.csv", "plot_data.json"], {"master": cfg.master_seed})
    return report


def run_report(cfg: ExperimentConfig, out_dir: str) -> MetricReport:
    """Assemble persisted cell results into report.csv and plot_data.json."""
    cells_dir = os.path.join(out_dir, cfg.paths["cells_dir"])
    if not os.path.isdir(cells_dir):
        raise MissingInputError(f"no cell results directory: {cells_dir}")
    rows = []
    for name in sorted(os.listdir(cells_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(cells_dir, name), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        rows.append(MetricRow(**payload))
    if not rows:
        raise MissingInputError(f"no cell results in {cells_dir}")
    report = MetricReport(rows=rows, probe_description=_probe_description(cfg))
    include_wall = cfg.evaluation["record_wall_time"]
    _atomic_write_text(os.path.join(out_dir, "report.csv"), report.to_csv(include_wall_time=include_wall))
    _atomic_write_text(os.path.join(out_dir, "plot_data.json"), report.plot_data_json())
    _write_manifest(out_dir, "report", cfg, ["report.csv", "plot_data.json"], {})
    return report
