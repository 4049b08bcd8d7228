"""Joint maximum-likelihood training of all model parameters.

One objective: the summed Gaussian negative log likelihood of the scaled
targets under per-node means (from the factor side) and scales (from the
local side), unrolled over the trailing lookback window. Adam updates every
tensor; the learning rate halves on non-improving epochs down to a floor,
and training stops early after a patience run of non-improving epochs.

A finite-difference checker validates the analytic gradients of the whole
objective, parameter tensor by parameter tensor.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import params as pm
from .errors import InvalidValue, TrainingDiverged
from .graph_build import Graph
from .graphdf_model import GraphDFModel, GraphDFParams, VariantConfig
from .panel_io import TimeSeriesPanel

LOG = logging.getLogger("graphdf.training")

HALF_LOG_TWO_PI = 0.5 * float(np.log(2.0 * np.pi))

# An epoch "improves" only when it beats the best loss by this relative
# margin; below it the run counts as plateaued for decay/early-stop purposes.
MIN_DELTA = 1e-7


def improved(loss: float, best: float) -> bool:
    if not np.isfinite(best):
        return bool(np.isfinite(loss))
    return loss < best - MIN_DELTA * max(1.0, abs(best))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs; defaults follow the usual fast-refit regime."""

    lr: float = 1e-3
    lr_decay: float = 0.5
    min_lr: float = 5e-5
    epochs: int = 200
    patience: int = 10
    lookback: int = 6
    seed: int = 0
    batch: int | None = None   # node-batch size; None = all nodes at once
    clip: float | None = None  # max gradient-component magnitude

    def __post_init__(self):
        if not 0 < self.min_lr <= self.lr:
            raise InvalidValue("need 0 < min_lr <= lr")
        if self.patience < 1:
            raise InvalidValue("patience must be >= 1")
        if self.lookback < 2:
            raise InvalidValue("lookback must be >= 2")
        if self.epochs < 1:
            raise InvalidValue("epochs must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidValue("lr_decay must lie in (0, 1]")


@dataclass
class TrainReport:
    """Per-epoch trace plus how and why training ended."""

    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stop_reason: str = ""
    param_checksum: str = ""
    best_epoch: int = -1

    def to_jsonable(self) -> dict:
        return {
            "losses": self.losses,
            "lrs": self.lrs,
            "stop_reason": self.stop_reason,
            "param_checksum": self.param_checksum,
            "best_epoch": self.best_epoch,
            "timing": {"epoch_seconds": self.epoch_seconds},
        }


def gaussian_nll(z, c, sigma):
    """0.5 ln(2 pi sigma^2) + (z - c)^2 / (2 sigma^2), elementwise.

    The negative log density of N(c, sigma^2); callers sum over steps and
    nodes. Validates sigma > 0; use `nll_terms` inside autodiff graphs.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise InvalidValue("sigma must be positive")
    out = HALF_LOG_TWO_PI + np.log(sigma) + np.square(z - c) / (2.0 * np.square(sigma))
    return float(out) if out.ndim == 0 else out


def nll_terms(z_const, c, sigma):
    """Autodiff-friendly Gaussian NLL terms for constant targets."""
    resid = ad.sub(z_const, c)
    return ad.add(ad.add(HALF_LOG_TWO_PI, ad.log(sigma)),
                  ad.div(ad.square(resid), ad.mul(2.0, ad.square(sigma))))


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place to ``arrays``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, array in arrays.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(array)
        m = state.m.setdefault(name, np.zeros_like(array))
        v = state.v.setdefault(name, np.zeros_like(array))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * np.square(grad)
        array -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return arrays, state


def window_loss(model: GraphDFModel, params: GraphDFParams, z_scaled: np.ndarray,
                cov: np.ndarray, t_start: int, t_end: int,
                node_subset: np.ndarray | None = None):
    """Summed NLL over targets t in [t_start, t_end) for the chosen nodes."""
    _, outputs = model.unroll(params, z_scaled, cov, t_start, t_end)
    total = None
    for t, c_vec, sigma_vec in outputs:
        z_t = z_scaled[:, t]
        if node_subset is not None:
            z_t = z_t[node_subset]
            c_vec = ad.getitem(c_vec, node_subset)
            sigma_vec = ad.getitem(sigma_vec, node_subset)
        term = ad.ssum(nll_terms(z_t, c_vec, sigma_vec))
        total = term if total is None else ad.add(total, term)
    return total


def train(variant: VariantConfig, panel: TimeSeriesPanel, graph: Graph,
          cfg: TrainConfig, model: GraphDFModel | None = None):
    """Fit a model on the trailing lookback window of ``panel``.

    Returns (GraphDFModel, TrainReport); the model carries the best-epoch
    parameters. Pass ``model`` to continue from existing parameters.
    """
    if panel.n_steps < cfg.lookback + 1:
        raise InvalidValue(
            f"panel length {panel.n_steps} < lookback+1 = {cfg.lookback + 1}")
    if model is None:
        model = GraphDFModel.initialize(variant, panel, graph,
                                        lookback=cfg.lookback, seed=cfg.seed)
    z_scaled = model.scale_targets(panel.targets)
    cov = panel.covariates
    t_end = panel.n_steps
    t_start = t_end - cfg.lookback

    # All parameters repacked as views into one buffer so the Adam update is
    # a single vectorized pass (elementwise: bit-identical to the per-tensor
    # form). Gradients are gathered in the same leaf order.
    buffer, views = pm.flatten_inplace(model.params)
    leaf_names = list(views)
    adam = AdamState()
    moment1 = np.zeros_like(buffer)
    moment2 = np.zeros_like(buffer)
    rng = np.random.default_rng(cfg.seed + 1)
    n = panel.n_nodes
    report = TrainReport()
    lr = cfg.lr
    best_loss = np.inf
    best_buffer = buffer.copy()
    non_improving = 0

    for epoch in range(cfg.epochs):
        tick = time.perf_counter()
        if cfg.batch is None or cfg.batch >= n:
            batches = [None]
        else:
            order = rng.permutation(n)
            batches = [np.sort(order[lo:lo + cfg.batch])
                       for lo in range(0, n, cfg.batch)]
        epoch_loss = 0.0
        for batch_no, subset in enumerate(batches):
            lifted = pm.lift(model.params)
            loss = window_loss(model, lifted, z_scaled, cov, t_start, t_end, subset)
            loss_value = float(ad.value_of(loss))
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, node batch {batch_no}")
            loss.backward()
            lifted_leaves = dict(pm.named_arrays(lifted))
            flat_grad = np.concatenate([
                (lifted_leaves[name].grad if lifted_leaves[name].grad is not None
                 else np.zeros_like(views[name])).reshape(-1)
                for name in leaf_names])
            if cfg.clip is not None:
                np.clip(flat_grad, -cfg.clip, cfg.clip, out=flat_grad)
            adam.t += 1
            moment1 *= adam.beta1
            moment1 += (1.0 - adam.beta1) * flat_grad
            moment2 *= adam.beta2
            moment2 += (1.0 - adam.beta2) * np.square(flat_grad)
            bc1 = 1.0 - adam.beta1 ** adam.t
            bc2 = 1.0 - adam.beta2 ** adam.t
            buffer -= lr * (moment1 / bc1) / (np.sqrt(moment2 / bc2) + adam.eps)
            epoch_loss += loss_value
        seconds = time.perf_counter() - tick

        report.losses.append(epoch_loss)
        report.lrs.append(lr)
        report.epoch_seconds.append(seconds)
        LOG.info("%d,%.6f,%.6g,%.3f", epoch, epoch_loss, lr, seconds)

        if improved(epoch_loss, best_loss):
            best_loss = epoch_loss
            best_buffer = buffer.copy()
            report.best_epoch = epoch
            non_improving = 0
        else:
            non_improving += 1
            lr = max(lr * cfg.lr_decay, cfg.min_lr)
            if non_improving >= cfg.patience:
                report.stop_reason = "EarlyStop"
                break
    else:
        report.stop_reason = "MaxEpochs"

    buffer[...] = best_buffer
    report.param_checksum = pm.checksum(model.params)
    return model, report


@dataclass
class FiniteDiffReport:
    """Per-parameter-group max relative error of analytic vs numeric grads."""

    errors: dict[str, float]
    step: float
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst(self, count: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:count]


def finite_diff_check(model: GraphDFModel, panel: TimeSeriesPanel,
                      step: float = 1e-5, tolerance: float = 1e-4) -> FiniteDiffReport:
    """Compare analytic gradients of the window NLL with central differences.

    Exhaustive over every element of every parameter tensor, so keep the
    instance tiny. The error per tensor group is the max absolute deviation
    over the max numeric-gradient magnitude (floored to dodge 0/0).
    """
    z_scaled = model.scale_targets(panel.targets)
    cov = panel.covariates
    t_start, t_end = 1, panel.n_steps

    lifted = pm.lift(model.params)
    loss = window_loss(model, lifted, z_scaled, cov, t_start, t_end)
    loss.backward()
    analytic_grads = {
        name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value))
        for name, tensor in pm.named_arrays(lifted)}

    def loss_value() -> float:
        # Forward pass on the stored (plain ndarray) parameters: no tape.
        return float(ad.value_of(
            window_loss(model, model.params, z_scaled, cov, t_start, t_end)))

    errors: dict[str, float] = {}
    for name, array in pm.named_arrays(model.params):
        analytic = analytic_grads[name]
        numeric = np.zeros_like(array)
        flat_value = array.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for idx in range(flat_value.size):
            original = flat_value[idx]
            flat_value[idx] = original + step
            hi = loss_value()
            flat_value[idx] = original - step
            lo = loss_value()
            flat_value[idx] = original
            flat_numeric[idx] = (hi - lo) / (2.0 * step)
        denom = max(float(np.abs(numeric).max()), 1e-6)
        errors[name] = float(np.abs(analytic - numeric).max()) / denom
    return FiniteDiffReport(errors=errors, step=step, tolerance=tolerance)
