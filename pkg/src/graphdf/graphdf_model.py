"""Hybrid forecasting model: shared factor dynamics plus per-node noise scales.

The global side runs one recurrent cell over all node rows (or a pooled
plain LSTM), projects its hidden state to K factor values per node, and
combines them with per-node embeddings into the prediction mean. The local
side runs a small per-node cell over the node's graph neighborhood and maps
its hidden row through a softplus head to the node's Gaussian scale.

Variant axes: the global and local cells are each either graph-convolutional
(LSTM-style on the scaled Laplacian, or GRU-style on the normalized
adjacency) or a plain LSTM; `gg`, `gr`, `rg` name the usual combinations.
Targets are min-max scaled per node over the fitted window; the scaling is
recorded on the model and inverted at the outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import params as pm
from .errors import InvalidValue, NoLag, ShapeError
from .graph_build import Graph, LaplacianBundle, laplacian_bundle, node_neighborhood
from .panel_io import TimeSeriesPanel, atomic_write_text
from .recurrent_cells import (
    CellState,
    DcgruParams,
    DenseLstmParams,
    GcrnLstmParams,
    dcgru_step,
    gcrn_lstm_step,
    init_dcgru,
    init_dense_lstm,
    init_gcrn_lstm,
    lstm_step,
)
from .spectral import GraphSignal

GRAPH_GCRN = "graph_gcrn"
GRAPH_DCGRU = "graph_dcgru"
PLAIN_RNN = "plain_rnn"
_KINDS = (GRAPH_GCRN, GRAPH_DCGRU, PLAIN_RNN)

MODEL_FORMAT = "graphdf-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class VariantConfig:
    """Which cell family drives each side, and the width knobs."""

    global_kind: str = GRAPH_GCRN
    local_kind: str = GRAPH_GCRN
    k_factors: int = 10
    q_hidden: int = 50
    r_hidden: int = 5
    hops: int = 1
    cheb_order: int = 1
    shared_local: bool = False
    node_indexed_peepholes: bool = True

    def __post_init__(self):
        if self.global_kind not in _KINDS or self.local_kind not in _KINDS:
            raise InvalidValue(f"unknown cell kind in {self.global_kind!r}/{self.local_kind!r}")
        if min(self.k_factors, self.q_hidden, self.r_hidden,
               self.hops, self.cheb_order) < 1:
            raise InvalidValue("width/order knobs must be >= 1")

    @classmethod
    def from_name(cls, name: str, cell: str = "gcrn", **overrides) -> "VariantConfig":
        """gg / gr / rg with the graph sides using `cell` (gcrn or dcgru)."""
        graph_kind = {"gcrn": GRAPH_GCRN, "dcgru": GRAPH_DCGRU}.get(cell)
        if graph_kind is None:
            raise InvalidValue(f"unknown cell family {cell!r}")
        table = {
            "gg": (graph_kind, graph_kind),
            "gr": (graph_kind, PLAIN_RNN),
            "rg": (PLAIN_RNN, graph_kind),
        }
        if name not in table:
            raise InvalidValue(f"unknown variant {name!r}")
        global_kind, local_kind = table[name]
        return cls(global_kind=global_kind, local_kind=local_kind, **overrides)

    @property
    def uses_graph(self) -> bool:
        return GRAPH_GCRN in (self.global_kind, self.local_kind) or \
            GRAPH_DCGRU in (self.global_kind, self.local_kind)


@dataclass
class GraphDFParams:
    """Every trainable tensor: global cell, factor projection, embeddings,
    per-node local cells and their softplus heads."""

    global_cell: object
    factor_w: np.ndarray      # (Q, K)
    factor_b: np.ndarray      # (K,)
    embeddings: np.ndarray    # (N, K)
    local_cells: list
    head_w: np.ndarray        # (N, R)
    head_b: np.ndarray        # (N,)


@dataclass(frozen=True)
class NodeContext:
    """Precomputed neighborhood of one node: row order and sub-operators."""

    indices: tuple[int, ...]
    sub_scaled: np.ndarray | None
    sub_nadj: np.ndarray | None


@dataclass
class RolloutState:
    """Recurrent state carried across steps for the whole model."""

    global_state: object
    local_states: list


def fixed_effect(s_t, embeddings, i: int) -> float:
    """Dot product of node i's embedding with its row of factor values."""
    s_v = ad.value_of(s_t)
    emb = ad.value_of(embeddings)
    row = s_v[i] if s_v.shape[0] > 1 else s_v[0]
    return float(emb[i] @ row)


def local_input_signal(panel: TimeSeriesPanel, i: int, indices, t: int) -> GraphSignal:
    """Neighborhood input rows at step t: (lagged target, covariates_t).

    Row order follows ``indices`` (node i first). The first step has no lag.
    """
    if t < 1:
        raise NoLag(f"step {t} has no lagged target")
    if t >= panel.n_steps:
        raise InvalidValue(f"step {t} outside panel of length {panel.n_steps}")
    idx = np.asarray(indices, dtype=int)
    if idx[0] != i:
        raise InvalidValue("neighborhood indices must start with the node itself")
    lag = panel.targets[idx, t - 1][:, None]
    cov = panel.covariates[idx, :, t]
    return GraphSignal(np.concatenate([lag, cov], axis=1))


def _build_signal(z_lag_scaled: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """(M,) lags and (M, D) covariates -> (M, D+1) input rows."""
    return np.concatenate([np.asarray(z_lag_scaled)[:, None], np.asarray(x_t)], axis=1)


def global_factors(params: GraphDFParams, bundle, state, y):
    """One global recurrent step followed by the factor projection.

    Returns (new state, S_t) where S_t is (N, K) for graph cells and (1, K)
    for the pooled plain cell (every node shares the pooled factor row).
    """
    cell = params.global_cell
    if isinstance(cell, GcrnLstmParams):
        new_state = gcrn_lstm_step(cell, bundle, state, y)
        hidden = new_state.hidden
    elif isinstance(cell, DcgruParams):
        new_state = dcgru_step(cell, bundle, state, y)
        hidden = new_state
    elif isinstance(cell, DenseLstmParams):
        pooled = ad.smean(y, axis=0, keepdims=True)
        new_state = lstm_step(cell, state, pooled)
        hidden = new_state.hidden
    else:
        raise InvalidValue(f"unknown global cell type {type(cell)!r}")
    s_t = ad.add(ad.matmul(hidden, params.factor_w), params.factor_b)
    return new_state, s_t


def local_sigma(cell, head_w, head_b, operator, state, y):
    """One local step on the neighborhood; softplus head on the node's row.

    Returns (new local state, sigma) with sigma a positive scalar.
    """
    if isinstance(cell, GcrnLstmParams):
        new_state = gcrn_lstm_step(cell, operator, state, y)
        h_row = ad.getitem(new_state.hidden, 0)
    elif isinstance(cell, DcgruParams):
        new_state = dcgru_step(cell, operator, state, y)
        h_row = ad.getitem(new_state, 0)
    elif isinstance(cell, DenseLstmParams):
        new_state = lstm_step(cell, state, y)
        h_row = ad.getitem(new_state.hidden, 0)
    else:
        raise InvalidValue(f"unknown local cell type {type(cell)!r}")
    pre = ad.add(ad.ssum(ad.mul(head_w, h_row)), head_b)
    return new_state, ad.softplus(pre)


class GraphDFModel:
    """A variant configuration bound to a graph, parameters, and a scaler."""

    def __init__(self, variant: VariantConfig, params: GraphDFParams, graph: Graph,
                 bundle: LaplacianBundle, contexts: list[NodeContext],
                 scale_offset: np.ndarray, scale_width: np.ndarray,
                 d_covariates: int, lookback: int, seed: int,
                 lambda_mode: str = "exact"):
        self.variant = variant
        self.params = params
        self.graph = graph
        self.bundle = bundle
        self.contexts = contexts
        self.scale_offset = np.asarray(scale_offset, dtype=np.float64)
        self.scale_width = np.asarray(scale_width, dtype=np.float64)
        self.d_covariates = d_covariates
        self.lookback = lookback
        self.seed = seed
        self.lambda_mode = lambda_mode

    @property
    def n_nodes(self) -> int:
        return self.graph.n

    # -- construction -----------------------------------------------------

    @staticmethod
    def build_contexts(variant: VariantConfig, graph: Graph,
                       bundle: LaplacianBundle) -> list[NodeContext]:
        contexts = []
        graph_local = variant.local_kind in (GRAPH_GCRN, GRAPH_DCGRU)
        for i in range(graph.n):
            if graph_local:
                indices, _ = node_neighborhood(bundle, graph, i, hops=variant.hops)
                sel = np.ix_(indices, indices)
                contexts.append(NodeContext(
                    indices=tuple(indices),
                    sub_scaled=bundle.scaled_laplacian[sel].copy(),
                    sub_nadj=bundle.normalized_adjacency[sel].copy(),
                ))
            else:
                contexts.append(NodeContext(indices=(i,), sub_scaled=None, sub_nadj=None))
        return contexts

    @staticmethod
    def init_params(variant: VariantConfig, n_nodes: int, d_covariates: int,
                    contexts: list[NodeContext], rng: np.random.Generator) -> GraphDFParams:
        p = d_covariates + 1
        q, r, k, order = (variant.q_hidden, variant.r_hidden,
                          variant.k_factors, variant.cheb_order)
        if variant.global_kind == GRAPH_GCRN:
            global_cell = init_gcrn_lstm(rng, p, q, order, n_nodes,
                                         variant.node_indexed_peepholes)
        elif variant.global_kind == GRAPH_DCGRU:
            global_cell = init_dcgru(rng, p, q, order)
        else:
            global_cell = init_dense_lstm(rng, p, q)

        factor_w = np.sqrt(6.0 / (q + k)) * (2 * rng.random((q, k)) - 1)
        factor_b = np.zeros(k)
        emb_limit = np.sqrt(6.0 / (k + 1))
        embeddings = emb_limit * (2 * rng.random((n_nodes, k)) - 1)

        def one_local(rows: int, shared_rows: bool):
            if variant.local_kind == GRAPH_GCRN:
                return init_gcrn_lstm(rng, p, r, order, rows,
                                      node_indexed_peepholes=not shared_rows
                                      and variant.node_indexed_peepholes)
            if variant.local_kind == GRAPH_DCGRU:
                return init_dcgru(rng, p, r, order)
            return init_dense_lstm(rng, p, r)

        if variant.shared_local:
            local_cells = [one_local(1, shared_rows=True)]
        else:
            local_cells = [one_local(len(ctx.indices), shared_rows=False)
                           for ctx in contexts]

        head_limit = np.sqrt(6.0 / (r + 1))
        head_w = head_limit * (2 * rng.random((n_nodes, r)) - 1)
        head_b = np.zeros(n_nodes)
        return GraphDFParams(global_cell=global_cell, factor_w=factor_w,
                             factor_b=factor_b, embeddings=embeddings,
                             local_cells=local_cells, head_w=head_w, head_b=head_b)

    @classmethod
    def initialize(cls, variant: VariantConfig, panel: TimeSeriesPanel, graph: Graph,
                   lookback: int, seed: int, lambda_mode: str = "exact") -> "GraphDFModel":
        """Untrained model wired to a panel's shape and scaling window."""
        if graph.n != panel.n_nodes:
            raise ShapeError(f"graph has {graph.n} nodes, panel {panel.n_nodes}")
        if panel.n_steps < lookback + 1:
            raise InvalidValue(
                f"panel length {panel.n_steps} shorter than lookback+1 = {lookback + 1}")
        bundle = laplacian_bundle(graph, lambda_mode=lambda_mode)
        contexts = cls.build_contexts(variant, graph, bundle)
        rng = np.random.default_rng(seed)
        params = cls.init_params(variant, panel.n_nodes, panel.n_covariates, contexts, rng)
        window = panel.targets[:, panel.n_steps - (lookback + 1):]
        offset = window.min(axis=1)
        width = window.max(axis=1) - offset
        width = np.where(width > 1e-12, width, 1.0)
        return cls(variant=variant, params=params, graph=graph, bundle=bundle,
                   contexts=contexts, scale_offset=offset, scale_width=width,
                   d_covariates=panel.n_covariates, lookback=lookback, seed=seed,
                   lambda_mode=lambda_mode)

    # -- scaling -----------------------------------------------------------

    def scale_targets(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return (z - self.scale_offset) / self.scale_width
        return (z - self.scale_offset[:, None]) / self.scale_width[:, None]

    def unscale_mean(self, c_scaled: np.ndarray) -> np.ndarray:
        return self.scale_offset + self.scale_width * np.asarray(c_scaled)

    def unscale_sigma(self, sigma_scaled: np.ndarray) -> np.ndarray:
        return self.scale_width * np.asarray(sigma_scaled)

    # -- recurrent machinery ------------------------------------------------

    def zero_state(self, params: GraphDFParams | None = None) -> RolloutState:
        variant = self.variant
        n, q, r = self.n_nodes, variant.q_hidden, variant.r_hidden
        if variant.global_kind == GRAPH_DCGRU:
            global_state = np.zeros((n, q))
        elif variant.global_kind == PLAIN_RNN:
            global_state = CellState.zeros(1, q)
        else:
            global_state = CellState.zeros(n, q)
        local_states = []
        for ctx in self.contexts:
            rows = len(ctx.indices)
            if variant.local_kind == GRAPH_DCGRU:
                local_states.append(np.zeros((rows, r)))
            elif variant.local_kind == PLAIN_RNN:
                local_states.append(CellState.zeros(1, r))
            else:
                local_states.append(CellState.zeros(rows, r))
        return RolloutState(global_state=global_state, local_states=local_states)

    def _local_cell(self, params: GraphDFParams, i: int):
        return params.local_cells[0] if self.variant.shared_local else params.local_cells[i]

    def _local_operator(self, ctx: NodeContext):
        if self.variant.local_kind == GRAPH_DCGRU:
            return ctx.sub_nadj
        return ctx.sub_scaled

    def step(self, params: GraphDFParams, state: RolloutState,
             z_lag_scaled: np.ndarray, x_t: np.ndarray):
        """Advance every cell one step on scaled inputs.

        Returns (new state, c_scaled, sigma_scaled); the last two are (N,)
        vectors, Tensors when ``params`` is lifted, arrays otherwise.
        """
        y_global = _build_signal(z_lag_scaled, x_t)
        new_global, s_t = global_factors(params, self.bundle, state.global_state, y_global)
        c_vec = ad.ssum(ad.mul(params.embeddings, s_t), axis=1)

        new_locals = []
        sigmas = []
        for i, ctx in enumerate(self.contexts):
            idx = np.asarray(ctx.indices, dtype=int)
            y_local = _build_signal(z_lag_scaled[idx], x_t[idx])
            new_local, sigma_i = local_sigma(
                self._local_cell(params, i),
                ad.getitem(params.head_w, i), ad.getitem(params.head_b, i),
                self._local_operator(ctx), state.local_states[i], y_local)
            new_locals.append(new_local)
            sigmas.append(ad.reshape(sigma_i, (1,)))
        sigma_vec = ad.concat(sigmas, axis=0)
        return RolloutState(new_global, new_locals), c_vec, sigma_vec

    def unroll(self, params: GraphDFParams, z_scaled: np.ndarray, cov: np.ndarray,
               t_start: int, t_end: int, state: RolloutState | None = None):
        """Run steps for targets t in [t_start, t_end); lags come from t-1.

        Returns (final state, [(t, c_scaled, sigma_scaled), ...]).
        """
        if t_start < 1:
            raise NoLag("unroll must start at t >= 1 (first step has no lag)")
        state = state if state is not None else self.zero_state()
        outputs = []
        for t in range(t_start, t_end):
            state, c_vec, sigma_vec = self.step(params, state,
                                                z_scaled[:, t - 1], cov[:, :, t])
            outputs.append((t, c_vec, sigma_vec))
        return state, outputs

    # -- forecasting protocol ------------------------------------------------

    def begin(self, panel: TimeSeriesPanel) -> tuple[RolloutState, np.ndarray]:
        """Warm up states over the trailing fitted window of ``panel``.

        Returns (state, last observed raw targets); ready for `advance`.
        """
        t_end = panel.n_steps
        t_start = max(1, t_end - self.lookback)
        z_scaled = self.scale_targets(panel.targets)
        state, _ = self.unroll(self.params, z_scaled, panel.covariates, t_start, t_end)
        return state, panel.targets[:, -1].copy()

    def advance(self, state: RolloutState, z_lag_raw: np.ndarray, x_t: np.ndarray):
        """One forecast step on raw-unit lags; returns raw mean and sigma."""
        new_state, c_scaled, sigma_scaled = self.step(
            self.params, state, self.scale_targets(z_lag_raw), x_t)
        return (new_state,
                self.unscale_mean(ad.value_of(c_scaled)),
                self.unscale_sigma(ad.value_of(sigma_scaled)))


def predict_step(model: GraphDFModel, state: RolloutState, z_lag_raw: np.ndarray,
                 x_t: np.ndarray, rng: np.random.Generator | None = None,
                 force_sigma_zero: bool = False):
    """Advance one step and optionally draw one sample per node.

    Without an rng this is the point forecast (the predictive mean and the
    scale, no sampling). With ``force_sigma_zero`` the distribution is
    degenerate and the sample equals the mean bit for bit.
    """
    new_state, mean, sigma = model.advance(state, z_lag_raw, x_t)
    if force_sigma_zero:
        sigma = np.zeros_like(sigma)
    sample = None
    if rng is not None:
        if force_sigma_zero:
            sample = mean.copy()
        else:
            sample = mean + sigma * rng.standard_normal(mean.shape[0])
    return new_state, mean, sigma, sample


# -- checkpointing ----------------------------------------------------------


def _cell_to_payload(cell) -> dict:
    kind = {GcrnLstmParams: "gcrn", DcgruParams: "dcgru", DenseLstmParams: "lstm"}[type(cell)]
    data = {f.name: ad.value_of(getattr(cell, f.name)).tolist() for f in fields(cell)}
    return {"kind": kind, "data": data}


def _cell_from_payload(payload: dict):
    cls = {"gcrn": GcrnLstmParams, "dcgru": DcgruParams, "lstm": DenseLstmParams}[payload["kind"]]
    return cls(**{name: np.asarray(value, dtype=np.float64)
                  for name, value in payload["data"].items()})


def save_model(model: GraphDFModel, path: str) -> None:
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": {f.name: getattr(model.variant, f.name) for f in fields(VariantConfig)},
        "seed": model.seed,
        "lookback": model.lookback,
        "lambda_mode": model.lambda_mode,
        "d_covariates": model.d_covariates,
        "graph": {"n": model.graph.n, "edges": [list(e) for e in model.graph.edges]},
        "scaler": {"offset": model.scale_offset.tolist(),
                   "width": model.scale_width.tolist()},
        "params": {
            "global_cell": _cell_to_payload(model.params.global_cell),
            "factor_w": model.params.factor_w.tolist(),
            "factor_b": model.params.factor_b.tolist(),
            "embeddings": model.params.embeddings.tolist(),
            "local_cells": [_cell_to_payload(c) for c in model.params.local_cells],
            "head_w": model.params.head_w.tolist(),
            "head_b": model.params.head_b.tolist(),
        },
        "param_checksum": pm.checksum(model.params),
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_model(path: str) -> GraphDFModel:
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get("format") != MODEL_FORMAT:
        raise InvalidValue(f"{path!r} is not a model checkpoint")
    if payload.get("version") != MODEL_VERSION:
        raise InvalidValue(f"unsupported checkpoint version {payload.get('version')!r}")
    variant = VariantConfig(**payload["variant"])
    graph = Graph(n=payload["graph"]["n"],
                  edges=tuple((int(i), int(j), float(w))
                              for i, j, w in payload["graph"]["edges"]))
    bundle = laplacian_bundle(graph, lambda_mode=payload["lambda_mode"])
    contexts = GraphDFModel.build_contexts(variant, graph, bundle)
    raw = payload["params"]
    params = GraphDFParams(
        global_cell=_cell_from_payload(raw["global_cell"]),
        factor_w=np.asarray(raw["factor_w"], dtype=np.float64),
        factor_b=np.asarray(raw["factor_b"], dtype=np.float64),
        embeddings=np.asarray(raw["embeddings"], dtype=np.float64),
        local_cells=[_cell_from_payload(c) for c in raw["local_cells"]],
        head_w=np.asarray(raw["head_w"], dtype=np.float64),
        head_b=np.asarray(raw["head_b"], dtype=np.float64),
    )
    model = GraphDFModel(
        variant=variant, params=params, graph=graph, bundle=bundle, contexts=contexts,
        scale_offset=np.asarray(payload["scaler"]["offset"], dtype=np.float64),
        scale_width=np.asarray(payload["scaler"]["width"], dtype=np.float64),
        d_covariates=int(payload["d_covariates"]), lookback=int(payload["lookback"]),
        seed=int(payload["seed"]), lambda_mode=payload["lambda_mode"],
    )
    if pm.checksum(params) != payload.get("param_checksum"):
        raise InvalidValue(f"checkpoint {path!r} failed its parameter checksum")
    return model
