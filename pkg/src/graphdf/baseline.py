"""Per-node local-only LSTM forecaster, the comparison point for the hybrid.

Each node gets its own small LSTM over (lagged target, covariates) with an
affine mean head and a softplus scale head, trained by the same Gaussian
likelihood on the same trailing window. No information crosses nodes, which
is exactly what the graph-factor model is supposed to beat.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import params as pm
from .errors import InvalidValue, TrainingDiverged
from .panel_io import TimeSeriesPanel
from .recurrent_cells import CellState, init_dense_lstm, lstm_step
from .training import AdamState, TrainConfig, TrainReport, adam_step, improved, nll_terms


@dataclass
class LocalOnlyParams:
    cells: list          # per-node DenseLstmParams
    mean_w: np.ndarray   # (N, R)
    mean_b: np.ndarray   # (N,)
    sigma_w: np.ndarray  # (N, R)
    sigma_b: np.ndarray  # (N,)


class LocalOnlyLstm:
    """Independent per-node probabilistic LSTM with min-max target scaling."""

    def __init__(self, params: LocalOnlyParams, hidden_size: int,
                 scale_offset: np.ndarray, scale_width: np.ndarray,
                 lookback: int, seed: int):
        self.params = params
        self.hidden_size = hidden_size
        self.scale_offset = scale_offset
        self.scale_width = scale_width
        self.lookback = lookback
        self.seed = seed

    @property
    def n_nodes(self) -> int:
        return self.params.mean_b.shape[0]

    @classmethod
    def initialize(cls, panel: TimeSeriesPanel, hidden_size: int, lookback: int,
                   seed: int) -> "LocalOnlyLstm":
        if panel.n_steps < lookback + 1:
            raise InvalidValue(
                f"panel length {panel.n_steps} < lookback+1 = {lookback + 1}")
        rng = np.random.default_rng(seed)
        p = panel.n_covariates + 1
        n = panel.n_nodes
        cells = [init_dense_lstm(rng, p, hidden_size) for _ in range(n)]
        limit = np.sqrt(6.0 / (hidden_size + 1))
        params = LocalOnlyParams(
            cells=cells,
            mean_w=limit * (2 * rng.random((n, hidden_size)) - 1),
            mean_b=np.zeros(n),
            sigma_w=limit * (2 * rng.random((n, hidden_size)) - 1),
            sigma_b=np.zeros(n),
        )
        window = panel.targets[:, panel.n_steps - (lookback + 1):]
        offset = window.min(axis=1)
        width = window.max(axis=1) - offset
        width = np.where(width > 1e-12, width, 1.0)
        return cls(params, hidden_size, offset, width, lookback, seed)

    def scale_targets(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return (z - self.scale_offset) / self.scale_width
        return (z - self.scale_offset[:, None]) / self.scale_width[:, None]

    def _zero_states(self):
        return [CellState.zeros(1, self.hidden_size) for _ in range(self.n_nodes)]

    def _step(self, params: LocalOnlyParams, states, z_lag_scaled, x_t):
        means, sigmas, new_states = [], [], []
        for i in range(self.n_nodes):
            row = np.concatenate([[ad.value_of(z_lag_scaled)[i]], x_t[i]])[None, :]
            state = lstm_step(params.cells[i], states[i], row)
            h_row = ad.getitem(state.hidden, 0)
            mean_i = ad.add(ad.ssum(ad.mul(ad.getitem(params.mean_w, i), h_row)),
                            ad.getitem(params.mean_b, i))
            sig_i = ad.softplus(
                ad.add(ad.ssum(ad.mul(ad.getitem(params.sigma_w, i), h_row)),
                       ad.getitem(params.sigma_b, i)))
            means.append(ad.reshape(mean_i, (1,)))
            sigmas.append(ad.reshape(sig_i, (1,)))
            new_states.append(state)
        return new_states, ad.concat(means, axis=0), ad.concat(sigmas, axis=0)

    def fit(self, panel: TimeSeriesPanel, cfg: TrainConfig) -> TrainReport:
        z_scaled = self.scale_targets(panel.targets)
        cov = panel.covariates
        t_end = panel.n_steps
        t_start = t_end - cfg.lookback
        arrays = dict(pm.named_arrays(self.params))
        adam = AdamState()
        report = TrainReport()
        lr = cfg.lr
        best_loss = np.inf
        best = {k: v.copy() for k, v in arrays.items()}
        non_improving = 0
        for epoch in range(cfg.epochs):
            tick = time.perf_counter()
            lifted = pm.lift(self.params)
            states = self._zero_states()
            loss = None
            for t in range(t_start, t_end):
                states, mean_vec, sigma_vec = self._step(
                    lifted, states, z_scaled[:, t - 1], cov[:, :, t])
                term = ad.ssum(nll_terms(z_scaled[:, t], mean_vec, sigma_vec))
                loss = term if loss is None else ad.add(loss, term)
            loss_value = float(ad.value_of(loss))
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite baseline loss at epoch {epoch}")
            loss.backward()
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
                     for name, t in pm.named_arrays(lifted)}
            adam_step(arrays, grads, adam, lr)
            report.losses.append(loss_value)
            report.lrs.append(lr)
            report.epoch_seconds.append(time.perf_counter() - tick)
            if improved(loss_value, best_loss):
                best_loss = loss_value
                best = {k: v.copy() for k, v in arrays.items()}
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
        for name, array in arrays.items():
            array[...] = best[name]
        report.param_checksum = pm.checksum(self.params)
        return report

    # Forecasting protocol shared with the hybrid model.

    def begin(self, panel: TimeSeriesPanel):
        z_scaled = self.scale_targets(panel.targets)
        states = self._zero_states()
        t_start = max(1, panel.n_steps - self.lookback)
        for t in range(t_start, panel.n_steps):
            states, _, _ = self._step(self.params, states,
                                      z_scaled[:, t - 1], panel.covariates[:, :, t])
        return states, panel.targets[:, -1].copy()

    def advance(self, states, z_lag_raw, x_t):
        new_states, mean_s, sigma_s = self._step(
            self.params, states, self.scale_targets(z_lag_raw), x_t)
        mean = self.scale_offset + self.scale_width * ad.value_of(mean_s)
        sigma = self.scale_width * ad.value_of(sigma_s)
        return new_states, mean, sigma
