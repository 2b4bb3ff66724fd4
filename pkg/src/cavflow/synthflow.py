"""Synthetic crowd-flow timelines from agents random-walking on the grid.

Every agent either stays or hops to a cell inside its n-neighborhood, so the
recorded inflow/outflow matrices are valid and consistent by construction.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, SeriesTooShort, ShapeMismatch, TruncatedFile
from .flowgrid import GridShape, HistoryWindow, IntegerFlowState, neighbor_offsets, transform


@dataclass(frozen=True)
class GeneratorConfig:
    shape: GridShape = field(default_factory=lambda: GridShape(16, 16, 2))
    agents: int = 20_000
    steps: int = 2_000
    move_prob: float = 0.3
    hotspot_count: int = 3
    seed: int = 0
    # attraction profile: weight(cell) = 1 + gain * exp(-d / radius), d = Chebyshev distance
    hotspot_gain: float = 4.0
    hotspot_radius: float = 3.0
    # relative amplitude of the daily (48-step) modulation of move_prob
    cycle_amplitude: float = 0.3

    def __post_init__(self):
        if self.agents < 0:
            raise ValueError("agents must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.move_prob <= 1.0:
            raise ValueError("move_prob must be in [0, 1]")
        if self.hotspot_count < 0:
            raise ValueError("hotspot_count must be >= 0")
        if not 0.0 <= self.cycle_amplitude <= 1.0:
            raise ValueError("cycle_amplitude must be in [0, 1]")


@dataclass(frozen=True)
class FlowSeries:
    """Integer inflow/outflow counts, ``counts[s] = (inflow, outflow)`` at time ``start + s``."""

    shape: GridShape
    counts: np.ndarray
    start: int = 0

    def __post_init__(self):
        if self.counts.ndim != 4 or self.counts.shape[1:] != self.shape.state_shape:
            raise ShapeMismatch(
                f"counts shape {self.counts.shape} does not match grid {self.shape.state_shape}")

    def __len__(self) -> int:
        return self.counts.shape[0]

    @property
    def states(self) -> list[IntegerFlowState]:
        return [IntegerFlowState(c[0], c[1], self.start + s) for s, c in enumerate(self.counts)]

    def transformed(self) -> np.ndarray:
        return transform(self.counts)


def _transition_tables(cfg: GeneratorConfig, rng: np.random.Generator):
    shape = cfg.shape
    l1, l2 = shape.l1, shape.l2
    rows, cols = np.divmod(np.arange(l1 * l2), l2)
    attraction = np.ones(l1 * l2)
    if cfg.hotspot_count:
        hot = rng.choice(l1 * l2, size=cfg.hotspot_count, replace=False)
        hr, hc = np.divmod(hot, l2)
        dist = np.maximum(np.abs(rows[:, None] - hr[None]), np.abs(cols[:, None] - hc[None])).min(axis=1)
        attraction = 1.0 + cfg.hotspot_gain * np.exp(-dist / cfg.hotspot_radius)
    offsets = np.array(neighbor_offsets(shape.n))
    nr = rows[:, None] + offsets[None, :, 0]
    nc = cols[:, None] + offsets[None, :, 1]
    inside = (nr >= 0) & (nr < l1) & (nc >= 0) & (nc < l2)
    dest = np.where(inside, nr * l2 + nc, 0)
    weights = np.where(inside, attraction[dest], 0.0)
    cum = np.cumsum(weights, axis=1)
    cum /= cum[:, -1:]
    return dest, cum


def generate(config: GeneratorConfig, return_positions: bool = False):
    """Simulate ``config.steps`` half-hour steps and record per-step flows.

    An agent that stays contributes nothing; a mover adds one outflow at its
    origin and one inflow at its destination. With ``return_positions`` the
    ``(steps + 1, agents)`` cell trajectories are returned alongside.
    """
    shape = config.shape
    cells = shape.l1 * shape.l2
    rng = np.random.default_rng(config.seed)
    dest, cum = _transition_tables(config, rng)
    pos = rng.integers(0, cells, size=config.agents)
    counts = np.zeros((config.steps, 2, shape.l1, shape.l2), dtype=np.int64)
    track = [pos.copy()] if return_positions else None
    for s in range(config.steps):
        p = config.move_prob * (1.0 + config.cycle_amplitude * np.sin(2 * np.pi * s / 48))
        movers = np.flatnonzero(rng.random(config.agents) < min(max(p, 0.0), 1.0))
        u = rng.random(movers.size)
        origin = pos[movers]
        slot = (cum[origin] < u[:, None]).sum(axis=1)
        slot = np.minimum(slot, cum.shape[1] - 1)
        target = dest[origin, slot]
        pos[movers] = target
        counts[s, 0] = np.bincount(target, minlength=cells).reshape(shape.l1, shape.l2)
        counts[s, 1] = np.bincount(origin, minlength=cells).reshape(shape.l1, shape.l2)
        if track is not None:
            track.append(pos.copy())
    series = FlowSeries(shape, counts, 0)
    if return_positions:
        return series, np.stack(track)
    return series


# -- history windows ------------------------------------------------------------

@dataclass(frozen=True)
class WindowSet:
    """An ordered stream of history windows stored as stacked arrays.

    ``inputs`` is ``(W, h + 1, 2, l1, l2)``, ``targets`` ``(W, 2, l1, l2)`` and
    ``t`` the newest timestamp of each window. Windows sliced from one series
    are views of the same buffer, so shared states are bit-identical.
    """

    inputs: np.ndarray
    targets: np.ndarray
    t: np.ndarray
    shape: GridShape

    @property
    def h(self) -> int:
        return self.inputs.shape[1] - 1

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return WindowSet(self.inputs[idx], self.targets[idx], self.t[idx], self.shape)
        return HistoryWindow(self.inputs[idx], self.targets[idx], int(self.t[idx]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def with_inputs(self, inputs: np.ndarray) -> "WindowSet":
        if inputs.shape != self.inputs.shape:
            raise ShapeMismatch(f"inputs {inputs.shape} != {self.inputs.shape}")
        return WindowSet(inputs, self.targets, self.t, self.shape)

    def split(self, train_fraction: float) -> tuple["WindowSet", "WindowSet"]:
        """Chronological split, no shuffling."""
        if not 0.0 < train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        cut = int(round(len(self) * train_fraction))
        return self[:cut], self[cut:]


def slice_windows(series: FlowSeries, h: int) -> WindowSet:
    """Overlapping stride-1 windows of ``h + 1`` transformed states with next-state targets."""
    if h < 0:
        raise ValueError("history length must be >= 0")
    steps = len(series)
    if steps < h + 2:
        raise SeriesTooShort(f"series of {steps} steps cannot supply a window with h={h}")
    x = series.transformed()
    count = steps - h - 1
    inputs = np.moveaxis(sliding_window_view(x, h + 1, axis=0), -1, 1)[:count]
    return WindowSet(inputs, x[h + 1:], series.start + h + np.arange(count), series.shape)


def window_counts(series: FlowSeries, h: int) -> np.ndarray:
    """Integer-count counterpart of ``slice_windows(series, h).inputs``."""
    if len(series) < h + 2:
        raise SeriesTooShort(f"series of {len(series)} steps cannot supply a window with h={h}")
    count = len(series) - h - 1
    return np.moveaxis(sliding_window_view(series.counts, h + 1, axis=0), -1, 1)[:count]


# -- FLOWBIN v1 -------------------------------------------------------------------

FLOWBIN_MAGIC = b"CFPB"
FLOWBIN_VERSION = 1
_HEADER = struct.Struct("<4sHHHHIq")


def save(series: FlowSeries, path) -> None:
    counts = series.counts
    if counts.min(initial=0) < 0 or counts.max(initial=0) > 0xFFFFFFFF:
        raise ValueError("counts do not fit in u32")
    s = series.shape
    header = _HEADER.pack(FLOWBIN_MAGIC, FLOWBIN_VERSION, s.l1, s.l2, s.n, len(series), series.start)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(counts.astype("<u4").tobytes(order="C"))


def load(path) -> FlowSeries:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if not data.startswith(FLOWBIN_MAGIC[:len(data)]):
            raise FormatError(f"{path}: not a FLOWBIN file")
        raise TruncatedFile(f"{path}: header truncated ({len(data)} bytes)")
    magic, version, l1, l2, n, steps, start = _HEADER.unpack_from(data)
    if magic != FLOWBIN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FLOWBIN_VERSION:
        raise FormatError(f"{path}: unsupported FLOWBIN version {version}")
    try:
        shape = GridShape(l1, l2, n)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from None
    need = steps * 2 * l1 * l2 * 4
    body = data[_HEADER.size:]
    if len(body) < need:
        raise TruncatedFile(f"{path}: expected {need} data bytes, found {len(body)}")
    if len(body) > need:
        raise FormatError(f"{path}: {len(body) - need} trailing bytes")
    counts = np.frombuffer(body, dtype="<u4").reshape(steps, 2, l1, l2).astype(np.int64)
    return FlowSeries(shape, counts, start)


def export_stats_csv(series: FlowSeries, path) -> None:
    """Per-step aggregates for plotting: timestep, total_inflow, total_outflow, max_cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "total_inflow", "total_outflow", "max_cell"])
        for s, c in enumerate(series.counts):
            w.writerow([series.start + s, int(c[0].sum()), int(c[1].sum()), int(c.max())])
