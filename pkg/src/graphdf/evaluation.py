"""Multi-step probabilistic forecasting and quantile-loss evaluation.

Forecasts are Monte-Carlo: each sample path rolls the model forward
autoregressively, feeding its own sampled value back in as the next lag,
with future covariates derived from timestamps. Every path owns a
seed-derived random stream, so results are reproducible regardless of
execution order or thread count. Accuracy is summarized by the normalized
quantile loss over all nodes and horizon steps.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDenominator, InvalidValue
from .panel_io import TimeSeriesPanel, atomic_write_text, future_time_covariates

DEFAULT_NUM_SAMPLES = 100
DEFAULT_HORIZONS = (1, 3, 4, 5)


@dataclass(frozen=True)
class ForecastDistribution:
    """Sample paths over nodes and horizon steps."""

    samples: np.ndarray    # (S, N, tau)
    horizon: int
    base_timestamp: int
    seed: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 3:
            raise InvalidValue("samples must be (num_samples, nodes, horizon)")
        if samples.shape[0] < 1 or self.horizon != samples.shape[2] or self.horizon < 1:
            raise InvalidValue("inconsistent sample tensor")
        if not np.isfinite(samples).all():
            raise InvalidValue("non-finite forecast samples")
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.samples.shape[1]

    def mean_path(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def _horizon_inputs(panel: TimeSeriesPanel, tau: int):
    fut = future_time_covariates(panel, tau)  # (D, tau)
    n = panel.n_nodes
    return [np.broadcast_to(fut[:, h], (n, fut.shape[0])).copy() for h in range(tau)]


def point_forecast(model, panel: TimeSeriesPanel, tau: int) -> np.ndarray:
    """Deterministic (N, tau) rollout feeding the mean back as the lag."""
    if tau < 1:
        raise InvalidValue("horizon must be >= 1")
    covs = _horizon_inputs(panel, tau)
    state, z_lag = model.begin(panel)
    out = np.empty((panel.n_nodes, tau))
    for h in range(tau):
        state, mean, _sigma = model.advance(state, z_lag, covs[h])
        out[:, h] = mean
        z_lag = mean
    return out


def forecast_samples(model, panel: TimeSeriesPanel, graph=None, tau: int = 3,
                     num_samples: int = DEFAULT_NUM_SAMPLES, seed: int = 0,
                     force_sigma_zero: bool = False,
                     threads: int = 1) -> ForecastDistribution:
    """Monte-Carlo sample paths of the model's joint forecast distribution.

    ``graph`` is accepted for interface completeness; fitted models already
    carry their graph. Path p draws from default_rng([seed, p]).
    """
    if tau < 1:
        raise InvalidValue("horizon must be >= 1")
    if num_samples < 1:
        raise InvalidValue("need at least one sample path")
    covs = _horizon_inputs(panel, tau)
    warm_state, z_last = model.begin(panel)
    n = panel.n_nodes
    samples = np.empty((num_samples, n, tau))

    # The first horizon step sees the same state and lag on every path, so
    # its mean and sigma are computed once; paths diverge afterwards.
    first_state, first_mean, first_sigma = model.advance(warm_state, z_last, covs[0])

    def run_path(path: int) -> None:
        rng = np.random.default_rng([seed, path])
        if force_sigma_zero:
            draw = first_mean.copy()
        else:
            draw = first_mean + first_sigma * rng.standard_normal(n)
        samples[path, :, 0] = draw
        state, z_lag = first_state, draw
        for h in range(1, tau):
            state, mean, sigma = model.advance(state, z_lag, covs[h])
            if force_sigma_zero:
                draw = mean.copy()
            else:
                draw = mean + sigma * rng.standard_normal(n)
            samples[path, :, h] = draw
            z_lag = draw

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_path, range(num_samples)))
    else:
        for path in range(num_samples):
            run_path(path)
    return ForecastDistribution(samples=samples, horizon=tau,
                                base_timestamp=int(panel.timestamps[-1]), seed=seed)


def rho_quantile(dist: ForecastDistribution, rho: float) -> np.ndarray:
    """Empirical rho-quantile per (node, step), linear interpolation."""
    if not 0.0 < rho < 1.0:
        raise InvalidValue(f"rho must lie in (0, 1), got {rho}")
    if dist.num_samples < 2:
        raise InvalidValue("need at least two sample paths for a quantile")
    return np.quantile(dist.samples, rho, axis=0, method="linear")


def quantile_loss(z, zhat, rho: float):
    """2 [rho (z - zhat)_+ + (1 - rho) (zhat - z)_+], elementwise.

    At rho = 0.5 this is the absolute error; it is zero iff z == zhat.
    """
    if not 0.0 < rho < 1.0:
        raise InvalidValue(f"rho must lie in (0, 1), got {rho}")
    z = np.asarray(z, dtype=np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    over = np.maximum(z - zhat, 0.0)
    under = np.maximum(zhat - z, 0.0)
    out = 2.0 * (rho * over + (1.0 - rho) * under)
    return float(out) if out.ndim == 0 else out


def normalized_quantile_loss(actuals, predictions, rho: float) -> float:
    """sum QL over all (node, step) divided by sum |z|."""
    actuals = np.asarray(actuals, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if actuals.shape != predictions.shape:
        raise InvalidValue(
            f"shape mismatch: actuals {actuals.shape} vs predictions {predictions.shape}")
    denom = float(np.abs(actuals).sum())
    if denom == 0.0:
        raise DegenerateDenominator("actuals sum to zero; loss is undefined")
    return float(np.sum(quantile_loss(actuals, predictions, rho))) / denom


def evaluate_forecast(dist: ForecastDistribution, actuals: np.ndarray,
                      rhos=(0.1, 0.5, 0.9)) -> dict:
    """Normalized quantile losses for several quantile levels."""
    actuals = np.asarray(actuals, dtype=np.float64)
    results = {}
    for rho in rhos:
        predicted = rho_quantile(dist, rho)
        results[f"p{int(round(rho * 100))}"] = normalized_quantile_loss(
            actuals, predicted, rho)
    return {
        "horizon": dist.horizon,
        "num_samples": dist.num_samples,
        "seed": dist.seed,
        "normalized_quantile_loss": results,
    }


def write_report(report: dict, path: str) -> None:
    atomic_write_text(path, json.dumps(report, sort_keys=True))


def write_per_node_losses(dist: ForecastDistribution, actuals: np.ndarray,
                          rho: float, path: str) -> None:
    """CSV of per-node normalized losses (for plotting)."""
    predicted = rho_quantile(dist, rho)
    actuals = np.asarray(actuals, dtype=np.float64)
    lines = ["node,quantile_loss_sum,abs_actual_sum,normalized"]
    losses = quantile_loss(actuals, predicted, rho)
    for i in range(actuals.shape[0]):
        num = float(losses[i].sum())
        den = float(np.abs(actuals[i]).sum())
        norm = num / den if den > 0 else float("nan")
        lines.append(f"{i},{num!r},{den!r},{norm!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
