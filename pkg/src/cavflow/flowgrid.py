"""Grid crowd-flow domain types and the consistency/validity mathematics.

Arrays follow one layout everywhere: a single state is ``(2, l1, l2)`` with
channel 0 the inflow and channel 1 the outflow; a history window stacks
``h + 1`` states oldest first, ``(h + 1, 2, l1, l2)``; batches prepend axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientHistory, OutOfGrid, ShapeMismatch

SCALE = 1000.0
INFLOW, OUTFLOW = 0, 1


@dataclass(frozen=True)
class GridShape:
    l1: int = 32
    l2: int = 32
    n: int = 2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"neighborhood radius must be >= 1, got {self.n}")
        side = 2 * self.n + 1
        if self.l1 < side or self.l2 < side:
            raise ValueError(
                f"grid {self.l1}x{self.l2} too small for radius {self.n} (needs {side}x{side})")

    @property
    def slices(self) -> int:
        """Number of neighbor slots per cell, (2n+1)^2 - 1."""
        return (2 * self.n + 1) ** 2 - 1

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (2, self.l1, self.l2)

    def contains(self, p) -> bool:
        return 0 <= p[0] < self.l1 and 0 <= p[1] < self.l2


@dataclass(frozen=True)
class IntegerFlowState:
    inflow: np.ndarray
    outflow: np.ndarray
    timestamp: int = 0

    def as_array(self) -> np.ndarray:
        return np.stack([self.inflow, self.outflow])


@dataclass(frozen=True)
class FlowState:
    inflow: np.ndarray
    outflow: np.ndarray
    timestamp: int = 0

    def as_array(self) -> np.ndarray:
        return np.stack([self.inflow, self.outflow])

    @classmethod
    def from_array(cls, arr, timestamp: int = 0) -> "FlowState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[INFLOW], arr[OUTFLOW], timestamp)


@dataclass(frozen=True)
class HistoryWindow:
    """Model input X_h(t) plus the ground-truth state at t + 1.

    ``states`` is ``(h + 1, 2, l1, l2)`` oldest first; ``t`` is the timestamp
    of the newest state, so slot ``i`` holds time ``t - h + i``.
    """

    states: np.ndarray
    target: np.ndarray
    t: int = 0

    def __post_init__(self):
        if self.states.ndim != 4 or self.states.shape[1] != 2:
            raise ShapeMismatch(f"window states must be (h+1, 2, l1, l2), got {self.states.shape}")
        if self.target.shape != self.states.shape[1:]:
            raise ShapeMismatch(
                f"target shape {self.target.shape} does not match states {self.states.shape[1:]}")

    @property
    def h(self) -> int:
        return self.states.shape[0] - 1

    @property
    def timestamps(self) -> list[int]:
        return list(range(self.t - self.h, self.t + 1))

    def flow_states(self) -> list[FlowState]:
        return [FlowState.from_array(s, ts) for s, ts in zip(self.states, self.timestamps)]

    def target_state(self) -> FlowState:
        return FlowState.from_array(self.target, self.t + 1)

    @classmethod
    def from_states(cls, states: Sequence[FlowState], target: FlowState) -> "HistoryWindow":
        ts = [s.timestamp for s in states]
        if any(b - a != 1 for a, b in zip(ts, ts[1:])) or target.timestamp != ts[-1] + 1:
            raise ValueError(f"timestamps must be consecutive, got {ts} -> {target.timestamp}")
        return cls(np.stack([s.as_array() for s in states]), target.as_array(), ts[-1])


# -- transformation T -------------------------------------------------------

def transform(n_state):
    """Map device counts to model space with ``min(count / 1000, 1)``.

    Accepts an IntegerFlowState (returns a FlowState) or any count array.
    """
    if isinstance(n_state, IntegerFlowState):
        return FlowState(transform(n_state.inflow), transform(n_state.outflow), n_state.timestamp)
    counts = np.asarray(n_state)
    if np.any(counts < 0):
        raise ValueError("device counts must be non-negative")
    return np.minimum(counts / SCALE, 1.0)


def inverse_transform(x_state):
    """Round model-space values back to counts.

    Returns ``(counts, saturated)``; ``saturated`` marks entries equal to 1,
    whose true count is only known to be >= 1000.
    """
    if isinstance(x_state, FlowState):
        cin, sin = inverse_transform(x_state.inflow)
        cout, sout = inverse_transform(x_state.outflow)
        return IntegerFlowState(cin, cout, x_state.timestamp), np.stack([sin, sout])
    x = np.asarray(x_state, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("model-space values must lie in [0, 1]")
    return np.rint(x * SCALE).astype(np.int64), x >= 1.0


# -- adjacency ----------------------------------------------------------------

def neighbor_offsets(n: int) -> list[tuple[int, int]]:
    """All (i, j) in [-n, n]^2 except (0, 0), ordered by :func:`k_index`."""
    return [(i, j) for i in range(-n, n + 1) for j in range(-n, n + 1) if (i, j) != (0, 0)]


def k_index(i: int, j: int, n: int) -> int:
    """Slice index of offset (i, j): row-major over the (2n+1)^2 box, center skipped."""
    if (i, j) == (0, 0) or abs(i) > n or abs(j) > n:
        raise ValueError(f"offset ({i}, {j}) is not a neighbor for radius {n}")
    m = (2 * n + 1) * (i + n) + (j + n)
    return m if m < 2 * n * (n + 1) else m - 1


def adjacency(p, shape: GridShape) -> set[tuple[int, int]]:
    """Cells within Chebyshev distance n of ``p``, excluding ``p``, clipped to the grid."""
    if not shape.contains(p):
        raise OutOfGrid(f"point {tuple(p)} outside {shape.l1}x{shape.l2} grid")
    p1, p2 = int(p[0]), int(p[1])
    out = set()
    for i, j in neighbor_offsets(shape.n):
        q = (p1 - i, p2 - j)
        if shape.contains(q):
            out.add(q)
    return out


def shift2d(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    """``out[..., r, c] = a[..., r - di, c - dj]`` with zeros shifted in."""
    out = np.zeros_like(a)
    l1, l2 = a.shape[-2:]
    rs, rd = (slice(0, l1 - di), slice(di, l1)) if di >= 0 else (slice(-di, l1), slice(0, l1 + di))
    cs, cd = (slice(0, l2 - dj), slice(dj, l2)) if dj >= 0 else (slice(-dj, l2), slice(0, l2 + dj))
    out[..., rd, cd] = a[..., rs, cs]
    return out


def neighborhood_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum over A_n(p) at every cell: ``a`` convolved with the (1 - f) filter, zero padded.

    Works on the last two axes. The operator is self-adjoint, so the same
    function propagates gradients.
    """
    a = np.asarray(a, dtype=np.float64)
    l1, l2 = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(n, n), (n, n)]
    padded = np.pad(a, pad)
    out = np.zeros_like(a)
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            if i or j:
                out += padded[..., n + i:n + i + l1, n + j:n + j + l2]
    return out


# -- validity -----------------------------------------------------------------

def _as_state_array(state) -> np.ndarray:
    if isinstance(state, (FlowState, IntegerFlowState)):
        return state.as_array().astype(np.float64)
    return np.asarray(state, dtype=np.float64)


def validity_scores(state, shape: GridShape):
    """Inflow and outflow invalidity scores ``(gamma_vi, gamma_vo)``.

    ``gamma_vi(p) = inflow(p) - sum of outflow over A_n(p)`` and symmetrically
    for ``gamma_vo``; both are <= 0 on a valid state. Batched over leading axes.
    """
    x = _as_state_array(state)
    if x.shape[-3:] != shape.state_shape:
        raise ShapeMismatch(f"state shape {x.shape[-3:]} does not match grid {shape.state_shape}")
    inflow, outflow = x[..., INFLOW, :, :], x[..., OUTFLOW, :, :]
    gvi = inflow - neighborhood_sum(outflow, shape.n)
    gvo = outflow - neighborhood_sum(inflow, shape.n)
    return gvi, gvo


def validity_indicator(state, shape: GridShape, strict: bool = False) -> np.ndarray:
    """Per-cell invalidity ``relu(gamma_vi + gamma_vo)``.

    ``strict=True`` rectifies each score before summing, so an inflow excess
    cannot be hidden by a large outflow margin at the same cell.
    """
    gvi, gvo = validity_scores(state, shape)
    if strict:
        return np.maximum(gvi, 0.0) + np.maximum(gvo, 0.0)
    return np.maximum(gvi + gvo, 0.0)


def invalidity(state, shape: GridShape, strict: bool = False):
    """Scalar invalidity: the cell sum of :func:`validity_indicator` (per leading index)."""
    return validity_indicator(state, shape, strict).sum(axis=(-2, -1))


def valid_under_transform(n_state, shape: GridShape) -> bool:
    x = transform(n_state)
    return bool(invalidity(x, shape) == 0.0)


def integer_valid(n_state, shape: GridShape) -> bool:
    """Check the validity inequalities directly on device counts (exact integer arithmetic)."""
    c = n_state.as_array() if isinstance(n_state, IntegerFlowState) else np.asarray(n_state)
    c = c.astype(np.int64)
    n = shape.n
    l1, l2 = c.shape[-2:]
    padded = np.pad(c, [(0, 0), (n, n), (n, n)])
    box = np.zeros_like(c)
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            if i or j:
                box += padded[:, n + i:n + i + l1, n + j:n + j + l2]
    return bool(np.all(c[INFLOW] <= box[OUTFLOW]) and np.all(c[OUTFLOW] <= box[INFLOW]))


# -- consistency --------------------------------------------------------------

def _window_array(w) -> np.ndarray:
    return w.states if isinstance(w, HistoryWindow) else np.asarray(w)


def consistency_score(current, previous: Sequence) -> float:
    """Inconsistency of ``current`` against the inputs received at t-1 .. t-h.

    ``previous[k - 1]`` is the window received at time ``t - k``. For each k
    the states t-h .. t-k appear in both windows (slots ``0 .. h-k`` here and
    ``k .. h`` there); the score sums their absolute differences.
    """
    cur = _window_array(current)
    h = cur.shape[0] - 1
    if len(previous) < h:
        raise InsufficientHistory(f"need {h} previous windows, got {len(previous)}")
    total = 0.0
    for k in range(1, h + 1):
        prev = _window_array(previous[k - 1])
        if prev.shape != cur.shape:
            raise ShapeMismatch(f"previous window shape {prev.shape} != {cur.shape}")
        total += float(np.abs(cur[:h - k + 1] - prev[k:]).sum())
    return total


__all__ = [
    "GridShape", "IntegerFlowState", "FlowState", "HistoryWindow", "SCALE",
    "transform", "inverse_transform", "adjacency", "neighbor_offsets", "k_index",
    "shift2d", "neighborhood_sum", "validity_scores", "validity_indicator", "invalidity",
    "valid_under_transform", "integer_valid", "consistency_score",
]
