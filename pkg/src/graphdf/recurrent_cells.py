"""Recurrent cells: graph-convolutional LSTM, diffusion-convolutional GRU,
and a plain dense LSTM for the non-relational variants.

Each step function is pure: (params, operator, state, input rows) -> new
state. Parameters may be plain ndarrays (inference) or autodiff Tensors
(training); the graph operator is a LaplacianBundle or a precomputed
neighborhood submatrix. Gate layouts:

  graph LSTM   i = s(conv_I[y,h] + W_I*c + b_I)     peephole on c_{t-1}
               f = s(conv_F[y,h] + W_F*c + b_F)
               c' = f*c + i*tanh(conv_C[y,h] + b_C)
               o = s(conv_O[y,h] + W_O*c' + b_O)    peephole on the new c
               h' = o*tanh(c')
  graph GRU    r = s(conv_R[y,h] + b_R)
               u = s(conv_U[y,h] + b_U)
               cand = tanh(conv_C[y, r*h] + b_C)
               h' = u*h + (1-u)*cand
               (filters are powers of the normalized adjacency)

The dense LSTM is the graph LSTM with the convolution replaced by a plain
matrix product and no peepholes, so an edgeless graph with a one-term
filter reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericOverflow
from .spectral import CHEBYSHEV, DIFFUSION, graph_conv_layer


@dataclass
class GcrnLstmParams:
    """Graph-convolutional LSTM parameters.

    Gate filter tensors are (P+Q, Q, L); peepholes are (M, Q) when tied to
    nodes or (1, Q) when shared across rows; biases are (Q,).
    """

    theta_i: np.ndarray
    theta_f: np.ndarray
    theta_c: np.ndarray
    theta_o: np.ndarray
    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self) -> int:
        return ad.value_of(self.b_i).shape[0]


@dataclass
class DcgruParams:
    """Diffusion-convolutional GRU parameters: filters (P+Q, Q, L), biases (Q,)."""

    theta_r: np.ndarray
    theta_u: np.ndarray
    theta_c: np.ndarray
    b_r: np.ndarray
    b_u: np.ndarray
    b_c: np.ndarray

    @property
    def hidden_size(self) -> int:
        return ad.value_of(self.b_r).shape[0]


@dataclass
class DenseLstmParams:
    """Plain LSTM parameters: gate weights (P+Q, Q), biases (Q,), no peepholes."""

    w_i: np.ndarray
    w_f: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self) -> int:
        return ad.value_of(self.b_i).shape[0]


@dataclass
class CellState:
    """Hidden and cell rows, (M, Q) each."""

    hidden: np.ndarray
    cell: np.ndarray

    @staticmethod
    def zeros(rows: int, hidden_size: int) -> "CellState":
        return CellState(hidden=np.zeros((rows, hidden_size)),
                         cell=np.zeros((rows, hidden_size)))


def _check_finite(value, label: str):
    if not np.isfinite(ad.value_of(value)).all():
        raise NumericOverflow(f"non-finite values in {label}")
    return value


def gcrn_lstm_step(params: GcrnLstmParams, bundle, state: CellState, y) -> CellState:
    """One graph-convolutional LSTM step over the rows of ``y``."""
    yh = ad.concat([y, state.hidden], axis=1)
    conv = lambda theta: graph_conv_layer(bundle, theta, yh, activation="none",
                                          family=CHEBYSHEV)
    gate_i = ad.sigmoid(_check_finite(
        ad.add(ad.add(conv(params.theta_i), ad.mul(params.w_i, state.cell)),
               params.b_i), "input gate"))
    gate_f = ad.sigmoid(_check_finite(
        ad.add(ad.add(conv(params.theta_f), ad.mul(params.w_f, state.cell)),
               params.b_f), "forget gate"))
    candidate = ad.tanh(_check_finite(
        ad.add(conv(params.theta_c), params.b_c), "candidate state"))
    new_cell = _check_finite(
        ad.add(ad.mul(gate_f, state.cell), ad.mul(gate_i, candidate)), "cell state")
    gate_o = ad.sigmoid(_check_finite(
        ad.add(ad.add(conv(params.theta_o), ad.mul(params.w_o, new_cell)),
               params.b_o), "output gate"))
    new_hidden = _check_finite(ad.mul(gate_o, ad.tanh(new_cell)), "hidden state")
    return CellState(hidden=new_hidden, cell=new_cell)


def dcgru_step(params: DcgruParams, bundle, hidden, y):
    """One diffusion-convolutional GRU step; returns the new hidden rows."""
    yh = ad.concat([y, hidden], axis=1)
    conv = lambda theta, signal: graph_conv_layer(bundle, theta, signal,
                                                  activation="none", family=DIFFUSION)
    gate_r = ad.sigmoid(_check_finite(
        ad.add(conv(params.theta_r, yh), params.b_r), "reset gate"))
    gate_u = ad.sigmoid(_check_finite(
        ad.add(conv(params.theta_u, yh), params.b_u), "update gate"))
    gated = ad.concat([y, ad.mul(gate_r, hidden)], axis=1)
    candidate = ad.tanh(_check_finite(
        ad.add(conv(params.theta_c, gated), params.b_c), "candidate state"))
    new_hidden = ad.add(ad.mul(gate_u, hidden),
                        ad.mul(ad.sub(1.0, gate_u), candidate))
    return _check_finite(new_hidden, "hidden state")


def lstm_step(params: DenseLstmParams, state: CellState, x) -> CellState:
    """One plain LSTM step applied independently to each row of ``x``."""
    xh = ad.concat([x, state.hidden], axis=1)
    gate_i = ad.sigmoid(_check_finite(
        ad.add(ad.matmul(xh, params.w_i), params.b_i), "input gate"))
    gate_f = ad.sigmoid(_check_finite(
        ad.add(ad.matmul(xh, params.w_f), params.b_f), "forget gate"))
    candidate = ad.tanh(_check_finite(
        ad.add(ad.matmul(xh, params.w_c), params.b_c), "candidate state"))
    new_cell = _check_finite(
        ad.add(ad.mul(gate_f, state.cell), ad.mul(gate_i, candidate)), "cell state")
    gate_o = ad.sigmoid(_check_finite(
        ad.add(ad.matmul(xh, params.w_o), params.b_o), "output gate"))
    new_hidden = _check_finite(ad.mul(gate_o, ad.tanh(new_cell)), "hidden state")
    return CellState(hidden=new_hidden, cell=new_cell)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_gcrn_lstm(rng: np.random.Generator, in_channels: int, hidden_size: int,
                   order: int, n_rows: int, node_indexed_peepholes: bool = True,
                   forget_bias: float = 1.0) -> GcrnLstmParams:
    """Xavier-uniform gate filters, zero peepholes, zero biases except the
    forget gate (positive so cells start by remembering)."""
    p = in_channels + hidden_size
    shape = (p, hidden_size, order)
    theta = lambda: xavier_uniform(rng, shape, p * order, hidden_size)
    peep_rows = n_rows if node_indexed_peepholes else 1
    zeros_q = lambda: np.zeros(hidden_size)
    return GcrnLstmParams(
        theta_i=theta(), theta_f=theta(), theta_c=theta(), theta_o=theta(),
        w_i=np.zeros((peep_rows, hidden_size)),
        w_f=np.zeros((peep_rows, hidden_size)),
        w_o=np.zeros((peep_rows, hidden_size)),
        b_i=zeros_q(), b_f=np.full(hidden_size, forget_bias),
        b_c=zeros_q(), b_o=zeros_q(),
    )


def init_dcgru(rng: np.random.Generator, in_channels: int, hidden_size: int,
               order: int) -> DcgruParams:
    p = in_channels + hidden_size
    shape = (p, hidden_size, order)
    theta = lambda: xavier_uniform(rng, shape, p * order, hidden_size)
    return DcgruParams(
        theta_r=theta(), theta_u=theta(), theta_c=theta(),
        b_r=np.zeros(hidden_size), b_u=np.zeros(hidden_size), b_c=np.zeros(hidden_size),
    )


def init_dense_lstm(rng: np.random.Generator, in_dim: int, hidden_size: int,
                    forget_bias: float = 1.0) -> DenseLstmParams:
    p = in_dim + hidden_size
    weight = lambda: xavier_uniform(rng, (p, hidden_size), p, hidden_size)
    zeros_q = lambda: np.zeros(hidden_size)
    return DenseLstmParams(
        w_i=weight(), w_f=weight(), w_c=weight(), w_o=weight(),
        b_i=zeros_q(), b_f=np.full(hidden_size, forget_bias),
        b_c=zeros_q(), b_o=zeros_q(),
    )
