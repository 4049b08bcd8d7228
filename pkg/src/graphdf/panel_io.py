"""Panel ingestion, calendar covariates, and synthetic workload generation.

A panel holds N aligned usage series plus per-node covariate series on a
fixed-period timestamp grid. Trace CSVs are aligned onto the union grid of
their timestamps; gaps are an error, not imputed.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import InvalidValue, IrregularGrid, MissingObservation

PANEL_FORMAT = "graphdf-panel"
PANEL_VERSION = 1

N_TIME_FEATURES = 5


@dataclass(frozen=True)
class TimeSeriesPanel:
    """N usage series with D covariate series over T evenly spaced steps.

    targets are resource-usage fractions (>= 0); covariates sit in [0, 1].
    Immutable after construction and safe to share across threads.
    """

    node_ids: tuple[str, ...]
    targets: np.ndarray        # (N, T)
    covariates: np.ndarray     # (N, D, T)
    timestamps: np.ndarray     # (T,) int64 epoch seconds
    period_seconds: int

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        covariates = np.asarray(self.covariates, dtype=np.float64)
        timestamps = np.asarray(self.timestamps, dtype=np.int64)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "timestamps", timestamps)
        n, t = targets.shape
        if len(self.node_ids) != n:
            raise InvalidValue("node_ids length does not match target rows")
        if covariates.shape[0] != n or covariates.shape[2] != t:
            raise InvalidValue(
                f"covariates shape {covariates.shape} incompatible with targets {targets.shape}")
        if timestamps.shape != (t,):
            raise InvalidValue("timestamps length does not match target columns")
        if self.period_seconds <= 0:
            raise InvalidValue("period_seconds must be positive")
        if t > 1:
            diffs = np.diff(timestamps)
            if not np.all(diffs == self.period_seconds):
                raise IrregularGrid("timestamps are not evenly spaced at period_seconds")
        if np.isnan(targets).any() or np.isnan(covariates).any():
            raise InvalidValue("panel contains NaN entries")
        if (targets < 0).any():
            raise InvalidValue("negative usage value in panel")
        targets.setflags(write=False)
        covariates.setflags(write=False)
        timestamps.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.targets.shape[0]

    @property
    def n_steps(self) -> int:
        return self.targets.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def slice_steps(self, start: int, stop: int) -> "TimeSeriesPanel":
        """Sub-panel over the step range [start, stop)."""
        return TimeSeriesPanel(
            node_ids=self.node_ids,
            targets=self.targets[:, start:stop].copy(),
            covariates=self.covariates[:, :, start:stop].copy(),
            timestamps=self.timestamps[start:stop].copy(),
            period_seconds=self.period_seconds,
        )


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the community-sinusoid test-data generator."""

    n_nodes: int = 40
    n_steps: int = 300
    n_communities: int = 2
    factor_period_steps: int = 24
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes <= 0 or self.n_steps <= 0 or self.n_communities <= 0:
            raise InvalidValue("counts must be positive")
        if self.n_communities > self.n_nodes:
            raise InvalidValue("more communities than nodes")
        if self.factor_period_steps <= 0:
            raise InvalidValue("factor_period_steps must be positive")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise InvalidValue("noise_sigma must be in [0, 1)")


def _parse_timestamp(raw: str) -> int:
    """ISO-8601 or integer epoch seconds -> epoch seconds (UTC)."""
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        parsed = dt.datetime.fromisoformat(text)
    except ValueError as exc:
        raise InvalidValue(f"unparseable timestamp {raw!r}") from exc
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=dt.timezone.utc)
    return int(parsed.timestamp())


def make_time_covariates(timestamps: np.ndarray, d: int = N_TIME_FEATURES) -> np.ndarray:
    """Calendar features for each timestamp, as a (d, T) block in [0, 1].

    Feature order: minute-of-hour/59, hour-of-day/23, day-of-week/6,
    (day-of-month - 1)/30, position t/(T-1). Timestamps are interpreted in
    UTC. The block is node-independent; callers replicate it per node.
    """
    if not 1 <= d <= N_TIME_FEATURES:
        raise InvalidValue(f"covariate count d={d} outside 1..{N_TIME_FEATURES}")
    timestamps = np.asarray(timestamps, dtype=np.int64)
    t_count = timestamps.shape[0]
    features = np.zeros((N_TIME_FEATURES, t_count), dtype=np.float64)
    for idx, epoch in enumerate(timestamps):
        moment = dt.datetime.fromtimestamp(int(epoch), tz=dt.timezone.utc)
        features[0, idx] = moment.minute / 59.0
        features[1, idx] = moment.hour / 23.0
        features[2, idx] = moment.weekday() / 6.0
        features[3, idx] = (moment.day - 1) / 30.0
    if t_count > 1:
        features[4, :] = np.arange(t_count) / (t_count - 1)
    return features[:d, :]


def future_time_covariates(panel: TimeSeriesPanel, horizon: int) -> np.ndarray:
    """Covariates for the `horizon` steps after the panel ends, (D, horizon).

    Calendar features extend naturally; the position feature saturates at
    1.0 beyond the panel (it is defined relative to the panel length).
    """
    last = int(panel.timestamps[-1])
    future = np.array([last + panel.period_seconds * (h + 1) for h in range(horizon)],
                      dtype=np.int64)
    d = panel.n_covariates
    if d > N_TIME_FEATURES:
        raise InvalidValue("future covariates only derivable for calendar covariate panels")
    block = make_time_covariates(future, d=d)
    if d == N_TIME_FEATURES:
        block[N_TIME_FEATURES - 1, :] = 1.0
    return block


def load_trace(path: str, period_seconds: int, percent: str = "auto") -> TimeSeriesPanel:
    """Load a `node_id,timestamp,usage` CSV into an aligned panel.

    Rows may arrive unsorted; nodes are sorted lexicographically and
    timestamps form the union grid. Any missing (node, timestamp) cell is a
    MissingObservation; uneven spacing is an IrregularGrid. ``percent``
    controls the unit: "true" divides by 100, "false" keeps values as-is,
    "auto" divides when any value exceeds 1.5.
    """
    if period_seconds <= 0:
        raise InvalidValue("period_seconds must be positive")
    if percent not in ("auto", "true", "false"):
        raise InvalidValue(f"percent must be auto/true/false, got {percent!r}")
    cells: dict[tuple[str, int], float] = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "timestamp", "usage"]:
            raise InvalidValue(f"unexpected trace header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InvalidValue(f"line {lineno}: expected 3 fields, got {len(row)}")
            node, raw_ts, raw_usage = row
            ts = _parse_timestamp(raw_ts)
            try:
                usage = float(raw_usage)
            except ValueError as exc:
                raise InvalidValue(f"line {lineno}: bad usage {raw_usage!r}") from exc
            if usage < 0:
                raise InvalidValue(f"line {lineno}: negative usage for node {node!r}")
            key = (node, ts)
            if key in cells:
                raise InvalidValue(f"duplicate observation for node {node!r} at {ts}")
            cells[key] = usage
    if not cells:
        raise InvalidValue(f"trace {path!r} contains no observations")

    node_ids = tuple(sorted({node for node, _ in cells}))
    grid = np.array(sorted({ts for _, ts in cells}), dtype=np.int64)
    if grid.shape[0] > 1:
        diffs = np.diff(grid)
        if not np.all(diffs == period_seconds):
            raise IrregularGrid(
                f"timestamp spacing {sorted(set(diffs.tolist()))} != period {period_seconds}")

    targets = np.empty((len(node_ids), grid.shape[0]), dtype=np.float64)
    for i, node in enumerate(node_ids):
        for j, ts in enumerate(grid):
            try:
                targets[i, j] = cells[(node, int(ts))]
            except KeyError:
                raise MissingObservation(
                    f"node {node!r} has no observation at timestamp {int(ts)}") from None

    if percent == "true" or (percent == "auto" and targets.max() > 1.5):
        targets = targets / 100.0

    block = make_time_covariates(grid)
    covariates = np.broadcast_to(block, (len(node_ids),) + block.shape).copy()
    return TimeSeriesPanel(node_ids=node_ids, targets=targets, covariates=covariates,
                           timestamps=grid, period_seconds=period_seconds)


def synth_panel(cfg: SynthConfig, period_seconds: int = 300, start_epoch: int = 0):
    """Community-structured synthetic panel plus its ground-truth graph.

    Nodes are split into near-equal contiguous communities; each community
    shares a sinusoid with a distinct phase, scaled into [0.1, 0.9], plus
    i.i.d. Gaussian noise, clamped below at 0. The graph densely connects
    nodes within a community (weight 1.0) and nothing across communities.
    Deterministic for a given seed.
    """
    from .graph_build import Graph  # local import to avoid a cycle

    rng = np.random.default_rng(cfg.seed)
    timestamps = start_epoch + period_seconds * np.arange(cfg.n_steps, dtype=np.int64)
    steps = np.arange(cfg.n_steps, dtype=np.float64)

    sizes = [cfg.n_nodes // cfg.n_communities + (1 if c < cfg.n_nodes % cfg.n_communities else 0)
             for c in range(cfg.n_communities)]
    community_of = np.repeat(np.arange(cfg.n_communities), sizes)

    targets = np.empty((cfg.n_nodes, cfg.n_steps), dtype=np.float64)
    for c in range(cfg.n_communities):
        phase = 2.0 * np.pi * c / cfg.n_communities
        base = 0.5 + 0.4 * np.sin(2.0 * np.pi * steps / cfg.factor_period_steps + phase)
        members = np.flatnonzero(community_of == c)
        noise = cfg.noise_sigma * rng.standard_normal((members.size, cfg.n_steps))
        targets[members] = np.maximum(0.0, base[None, :] + noise)

    edges = []
    for c in range(cfg.n_communities):
        members = np.flatnonzero(community_of == c)
        for a_pos in range(members.size):
            for b_pos in range(a_pos + 1, members.size):
                edges.append((int(members[a_pos]), int(members[b_pos]), 1.0))
    graph = Graph(n=cfg.n_nodes, edges=tuple(edges))

    block = make_time_covariates(timestamps)
    covariates = np.broadcast_to(block, (cfg.n_nodes,) + block.shape).copy()
    node_ids = tuple(f"node{{:0{len(str(cfg.n_nodes - 1))}d}}".format(i)
                     for i in range(cfg.n_nodes))
    panel = TimeSeriesPanel(node_ids=node_ids, targets=targets, covariates=covariates,
                            timestamps=timestamps, period_seconds=period_seconds)
    return panel, graph


def atomic_write_text(path: str, text: str) -> None:
    """Write via temp file + rename so partial files never appear."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_panel(panel: TimeSeriesPanel, path: str) -> None:
    """Versioned JSON serialization; float64 round-trips exactly via repr."""
    payload = {
        "format": PANEL_FORMAT,
        "version": PANEL_VERSION,
        "node_ids": list(panel.node_ids),
        "period_seconds": panel.period_seconds,
        "timestamps": [int(t) for t in panel.timestamps],
        "targets": panel.targets.tolist(),
        "covariates": panel.covariates.tolist(),
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_panel(path: str) -> TimeSeriesPanel:
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get("format") != PANEL_FORMAT:
        raise InvalidValue(f"{path!r} is not a panel file")
    if payload.get("version") != PANEL_VERSION:
        raise InvalidValue(f"unsupported panel version {payload.get('version')!r}")
    return TimeSeriesPanel(
        node_ids=tuple(payload["node_ids"]),
        targets=np.asarray(payload["targets"], dtype=np.float64),
        covariates=np.asarray(payload["covariates"], dtype=np.float64),
        timestamps=np.asarray(payload["timestamps"], dtype=np.int64),
        period_seconds=int(payload["period_seconds"]),
    )
