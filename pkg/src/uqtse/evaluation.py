"""Relative-error and KL metrics, probe sets, and the sweep report format.

The KL estimator is a plug-in over fixed-range histograms: samples are clipped
into the range, binned, every bin mass gets +epsilon, masses are renormalized,
and KL(truth || prediction) is returned (clamped at 0 against round-off).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .domain import SpaceTimeDomain
from .ekf import EkfRunResult
from .gan import PhysGan, predict_ensemble
from .sensing import DetectorArray
from .solver import Ensemble

__all__ = [
    "HistogramSpec",
    "relative_error",
    "kl_divergence",
    "kl_divergence_vs_gaussian",
    "probe_coordinates",
    "EvalSettings",
    "MetricRow",
    "MetricReport",
    "gan_metrics",
    "ekf_metrics",
    "lambda_convergence_table",
]

REPORT_HEADER = "model,n_detectors,seed,RE_rho,RE_u,KL_rho,KL_u,rho_max_hat,u_max_hat,tau_hat,wall_s"


@dataclass(frozen=True)
class HistogramSpec:
    """Fixed-range histogram with Laplace smoothing for KL estimation."""

    lo: float
    hi: float
    bins: int = 32
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if not self.hi > self.lo:
            raise ValueError("histogram range is degenerate")

    @classmethod
    def for_rho(cls, bins: int = 32) -> "HistogramSpec":
        return cls(lo=0.0, hi=1.0, bins=bins)

    @classmethod
    def for_u(cls, bins: int = 32) -> "HistogramSpec":
        return cls(lo=0.0, hi=50.0, bins=bins)

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)


def relative_error(pred_mean: np.ndarray, truth_mean: np.ndarray) -> float:
    """l2-norm ratio ||pred - truth|| / ||truth|| over one evaluation set."""
    pred = np.asarray(pred_mean, dtype=np.float64).ravel()
    truth = np.asarray(truth_mean, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise ValueError("truth mean has zero norm")
    return float(np.linalg.norm(pred - truth) / denom)


def _smoothed_masses(samples: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError("need at least 2 samples")
    clipped = np.clip(samples, spec.lo, spec.hi)
    counts, _ = np.histogram(clipped, bins=spec.bins, range=(spec.lo, spec.hi))
    masses = counts / counts.sum()
    return (masses + spec.epsilon) / (1.0 + spec.bins * spec.epsilon)


def _kl_from_masses(p: np.ndarray, q: np.ndarray) -> float:
    kl = float(np.sum(p * np.log(p / q)))
    return max(kl, 0.0)


def kl_divergence(truth_samples: np.ndarray, pred_samples: np.ndarray, spec: HistogramSpec) -> float:
    """KL(truth || prediction) in nats from two sample sets."""
    return _kl_from_masses(_smoothed_masses(truth_samples, spec), _smoothed_masses(pred_samples, spec))


def kl_divergence_vs_gaussian(truth_samples: np.ndarray, mu: float, var: float, spec: HistogramSpec) -> float:
    """KL(truth || N(mu, var)) with the Gaussian binned exactly via its CDF."""
    p = _smoothed_masses(truth_samples, spec)
    sd = math.sqrt(max(var, 1e-30))
    edges = spec.edges()
    cdf = 0.5 * (1.0 + erf((edges - mu) / (sd * math.sqrt(2.0))))
    masses = np.diff(cdf)
    # fold truncated tails into the edge bins, mirroring sample clipping
    masses[0] += cdf[0]
    masses[-1] += 1.0 - cdf[-1]
    q = (masses + spec.epsilon) / (masses.sum() + spec.bins * spec.epsilon)
    return _kl_from_masses(p, q)


def probe_coordinates(detectors: DetectorArray, domain: SpaceTimeDomain, n_times: int = 20) -> tuple:
    """Fixed probe set for distributional metrics: every detector position
    crossed with n_times evenly spaced times."""
    times = np.linspace(0.0, domain.horizon_s, n_times, endpoint=False)
    xs = np.repeat(np.asarray(detectors.positions), n_times)
    ts = np.tile(times, len(detectors))
    return xs, ts


@dataclass(frozen=True)
class EvalSettings:
    """How metrics are computed for one run."""

    time_stride: int = 8  # evaluation grid keeps every time_stride-th node
    n_samples_mean: int = 32
    n_samples_kl: int = 200
    n_probe_times: int = 20
    hist_bins: int = 32
    seed: int = 0


@dataclass
class MetricRow:
    model: str
    n_detectors: int
    seed: int
    re_rho: float
    re_u: float
    kl_rho: float
    kl_u: float
    rho_max_hat: float
    u_max_hat: float
    tau_hat: float
    wall_s: Optional[float] = None


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    probe_description: str = ""

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.model, r.n_detectors, r.seed))

    def to_csv(self, include_wall_time: bool = False) -> str:
        def fmt(v) -> str:
            if isinstance(v, float) and math.isnan(v):
                return "nan"
            return repr(float(v)) if isinstance(v, float) else str(v)

        lines = [REPORT_HEADER]
        for r in self.sorted_rows():
            wall = "" if (not include_wall_time or r.wall_s is None) else repr(float(r.wall_s))
            lines.append(
                ",".join(
                    [
                        r.model,
                        str(r.n_detectors),
                        str(r.seed),
                        fmt(r.re_rho),
                        fmt(r.re_u),
                        fmt(r.kl_rho),
                        fmt(r.kl_u),
                        fmt(r.rho_max_hat),
                        fmt(r.u_max_hat),
                        fmt(r.tau_hat),
                        wall,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def median_over_seeds(self, metric: str) -> dict:
        """(model, n_detectors) -> median of one metric across seeds."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.model, r.n_detectors), []).append(getattr(r, metric))
        return {k: float(np.median(v)) for k, v in groups.items()}

    def plot_data(self) -> dict:
        """Plot-ready arrays: medians per model over detector counts."""
        counts = sorted({r.n_detectors for r in self.rows})
        models = sorted({r.model for r in self.rows})
        out = {"n_detectors": counts, "probe_description": self.probe_description, "series": {}}
        for metric in ("re_rho", "re_u", "kl_rho", "kl_u", "rho_max_hat", "u_max_hat"):
            med = self.median_over_seeds(metric)
            out["series"][metric] = {
                m: [med.get((m, c), float("nan")) for c in counts] for m in models
            }
        return out

    def plot_data_json(self) -> str:
        return json.dumps(self.plot_data(), indent=2, sort_keys=True, allow_nan=True)


def _eval_grid(ensemble: Ensemble, stride: int) -> tuple:
    grid = ensemble.grid
    t_idx = np.arange(0, grid.nt, max(stride, 1))
    xs = grid.x_centers()
    ts = grid.t_nodes()[t_idx]
    X, T = np.meshgrid(xs, ts, indexing="ij")
    return X.ravel(), T.ravel(), t_idx


def _truth_samples_at(ensemble: Ensemble, x: float, t: float) -> np.ndarray:
    grid = ensemble.grid
    c, k = grid.nearest_cell(x), grid.nearest_node(t)
    rho = np.array([f.rho[c, k] for f in ensemble.realizations])
    u = np.array([f.u[c, k] for f in ensemble.realizations])
    return rho, u


def gan_metrics(
    model: PhysGan,
    ensemble: Ensemble,
    detectors: DetectorArray,
    settings: EvalSettings = EvalSettings(),
) -> tuple:
    """(RE_rho, RE_u, KL_rho, KL_u) of a trained generator vs the ensemble."""
    xs, ts, t_idx = _eval_grid(ensemble, settings.time_stride)
    truth_rho, truth_u = ensemble.mean_field()
    truth_rho = truth_rho[:, t_idx].ravel()
    truth_u = truth_u[:, t_idx].ravel()
    pred = predict_ensemble(model, xs, ts, settings.n_samples_mean, seed=settings.seed)
    pred_rho, pred_u = pred.mean()
    re_rho = relative_error(pred_rho, truth_rho)
    re_u = relative_error(pred_u, truth_u)

    px, pt = probe_coordinates(detectors, ensemble.grid.domain, settings.n_probe_times)
    pred_kl = predict_ensemble(model, px, pt, settings.n_samples_kl, seed=settings.seed + 1)
    spec_rho = HistogramSpec.for_rho(settings.hist_bins)
    spec_u = HistogramSpec.for_u(settings.hist_bins)
    kls_rho, kls_u = [], []
    for i in range(len(px)):
        t_rho, t_u = _truth_samples_at(ensemble, px[i], pt[i])
        kls_rho.append(kl_divergence(t_rho, pred_kl.rho[i], spec_rho))
        kls_u.append(kl_divergence(t_u, pred_kl.u[i], spec_u))
    return re_rho, re_u, float(np.mean(kls_rho)), float(np.mean(kls_u))


def ekf_metrics(
    result: EkfRunResult,
    ensemble: Ensemble,
    detectors: DetectorArray,
    settings: EvalSettings = EvalSettings(),
) -> tuple:
    """(RE_rho, RE_u, KL_rho, KL_u) of a filter run vs the ensemble."""
    grid = ensemble.grid
    t_idx = np.arange(0, grid.nt, max(settings.time_stride, 1))
    truth_rho, truth_u = ensemble.mean_field()
    re_rho = relative_error(result.mean.rho[:, t_idx], truth_rho[:, t_idx])
    re_u = relative_error(result.mean.u[:, t_idx], truth_u[:, t_idx])

    px, pt = probe_coordinates(detectors, grid.domain, settings.n_probe_times)
    spec_rho = HistogramSpec.for_rho(settings.hist_bins)
    spec_u = HistogramSpec.for_u(settings.hist_bins)
    kls_rho, kls_u = [], []
    for i in range(len(px)):
        c, k = grid.nearest_cell(px[i]), grid.nearest_node(pt[i])
        t_rho, t_u = _truth_samples_at(ensemble, px[i], pt[i])
        kls_rho.append(kl_divergence_vs_gaussian(t_rho, result.mean.rho[c, k], result.variance.rho[c, k], spec_rho))
        kls_u.append(kl_divergence_vs_gaussian(t_u, result.mean.u[c, k], result.variance.u[c, k], spec_u))
    return re_rho, re_u, float(np.mean(kls_rho)), float(np.mean(kls_u))


def lambda_convergence_table(report: MetricReport) -> list:
    """Median estimated physics parameters per model and detector count."""
    groups: dict = {}
    for r in report.rows:
        groups.setdefault((r.model, r.n_detectors), []).append((r.rho_max_hat, r.u_max_hat, r.tau_hat))
    table = []
    for (model, n_det), vals in sorted(groups.items()):
        arr = np.array(vals, dtype=np.float64)
        table.append(
            {
                "model": model,
                "n_detectors": n_det,
                "rho_max": float(np.median(arr[:, 0])),
                "u_max": float(np.median(arr[:, 1])),
                "tau": float(np.median(arr[:, 2])),
            }
        )
    return table
