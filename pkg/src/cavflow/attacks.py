"""Perturbation generators against crowd-flow predictors.

Per-window attacks (FGSM, i-FGSM, PGD and their detector-aware variants)
perturb every state of every window independently. Universal attacks
(adaptive-* and CVPR) learn one per-timestep perturbation added to every
state of every window, which keeps overlapping history windows identical.

All steps are signed-gradient descent on the squared distance between the
model output and the attacker's target. ``sign(0) = 0``, and the [0, 1]
clip of the perturbed input is treated as straight-through inside the range
and as a zero gradient outside it.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetZeroWarning, EmptyDataset, FormatError, SaturationWarning, ShapeMismatch, TruncatedFile
from .flowgrid import GridShape, SCALE, neighbor_offsets, neighborhood_sum, shift2d, transform
from .synthflow import FlowSeries

DIGITAL, PHYSICAL = "digital", "physical"
BASES = ("fgsm", "ifgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    steps: int = 200
    alpha: float | None = None  # PGD step; None means 2.5 * epsilon / steps
    lam: float = 1e10
    mode: str = DIGITAL
    target: np.ndarray | None = field(default=None, compare=False)  # None: all-ones state

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.mode not in (DIGITAL, PHYSICAL):
            raise ValueError(f"mode must be {DIGITAL!r} or {PHYSICAL!r}, got {self.mode!r}")

    @property
    def pgd_step(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / max(self.steps, 1)

    @property
    def lower(self) -> float:
        return 0.0 if self.mode == PHYSICAL else -self.epsilon

    def target_for(self, shape: GridShape) -> np.ndarray:
        if self.target is None:
            return np.ones(shape.state_shape)
        t = np.asarray(self.target, dtype=np.float64)
        if t.shape != shape.state_shape:
            raise ShapeMismatch(f"target shape {t.shape} != {shape.state_shape}")
        return t


@dataclass(frozen=True)
class PhysicalBudget:
    b_d: int
    query_limit: int = 20

    def __post_init__(self):
        if self.b_d < 0:
            raise ValueError("device budget must be >= 0")
        if self.query_limit < 1:
            raise ValueError("query_limit must be >= 1")


def clip_input(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class PerturbationSet:
    """Per-window perturbations aligned with a window stream, ``(W, h + 1, 2, l1, l2)``."""

    deltas: np.ndarray
    epsilon: float
    mode: str = DIGITAL

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        if inputs.shape != self.deltas.shape:
            raise ShapeMismatch(f"inputs {inputs.shape} != perturbation {self.deltas.shape}")
        return clip_input(inputs + self.deltas)


class _Objective:
    """Adversarial loss on a batch of perturbed windows and its input gradient."""

    def __init__(self, model, target):
        self.model = model
        self.target = target

    def __call__(self, inputs, delta):
        raw = inputs + delta
        x = clip_input(raw)
        loss, grad = self.model.input_grad(x, self.target)
        grad = np.where((raw >= 0.0) & (raw <= 1.0), grad, 0.0)
        return x, loss, grad


# -- per-window attacks -------------------------------------------------------------

def _sign_descent(model, inputs, config: AttackConfig, step: float, n_steps: int,
                  penalty=None, trace: list | None = None) -> np.ndarray:
    objective = _Objective(model, config.target_for(_grid_of(model, inputs)))
    delta = np.zeros_like(inputs, dtype=np.float64)
    for _ in range(n_steps):
        x, loss, grad = objective(inputs, delta)
        if trace is not None:
            trace.append(float(loss.mean()))
        if penalty is not None:
            pgrad = penalty(x)
            grad = grad + config.lam * np.where(
                (inputs + delta >= 0.0) & (inputs + delta <= 1.0), pgrad, 0.0)
        delta = np.clip(delta - step * np.sign(grad), config.lower, config.epsilon)
    if trace is not None:
        trace.append(float(objective(inputs, delta)[1].mean()))
    return delta


def _grid_of(model, inputs) -> GridShape:
    shape = getattr(model, "shape", None)
    if shape is None or inputs.shape[-3:] != shape.state_shape:
        raise ShapeMismatch(f"inputs {inputs.shape} do not match the model grid")
    return shape


def _inputs_of(windows) -> np.ndarray:
    arr = getattr(windows, "inputs", None)
    if arr is None:
        arr = getattr(windows, "states", windows)
    return np.asarray(arr, dtype=np.float64)


def fgsm(model, windows, config: AttackConfig, trace: list | None = None) -> PerturbationSet:
    """Single signed step of size epsilon (``config.steps`` is ignored)."""
    inputs = _inputs_of(windows)
    delta = _sign_descent(model, inputs, config, config.epsilon, 1, trace=trace)
    return PerturbationSet(delta, config.epsilon, config.mode)


def ifgsm(model, windows, config: AttackConfig, trace: list | None = None) -> PerturbationSet:
    """``steps`` signed steps of size epsilon / steps, clipped to the ball after each."""
    if config.steps < 1:
        raise ValueError("i-FGSM needs steps >= 1")
    inputs = _inputs_of(windows)
    delta = _sign_descent(model, inputs, config, config.epsilon / config.steps, config.steps, trace=trace)
    return PerturbationSet(delta, config.epsilon, config.mode)


def pgd(model, windows, config: AttackConfig, trace: list | None = None) -> PerturbationSet:
    """``steps`` signed steps of size alpha, projected onto the ball after each."""
    if config.steps < 1:
        raise ValueError("PGD needs steps >= 1")
    inputs = _inputs_of(windows)
    delta = _sign_descent(model, inputs, config, config.pgd_step, config.steps, trace=trace)
    return PerturbationSet(delta, config.epsilon, config.mode)


def _base_schedule(base: str, config: AttackConfig) -> tuple[float, int]:
    if base == "fgsm":
        return config.epsilon, 1
    if config.steps < 1:
        raise ValueError(f"{base} needs steps >= 1")
    if base == "ifgsm":
        return config.epsilon / config.steps, config.steps
    if base == "pgd":
        return config.pgd_step, config.steps
    raise ValueError(f"unknown base attack {base!r}; expected one of {BASES}")


def validity_gradient(x: np.ndarray, shape: GridShape) -> np.ndarray:
    """Gradient of the summed default (non-strict) invalidity ``sum relu(gamma_vi + gamma_vo)``.

    ``gamma_vi + gamma_vo = s - B(s)`` with ``s = inflow + outflow`` and ``B``
    the neighborhood sum, so both channels share the gradient ``m - B(m)``
    where ``m`` marks the rectified-positive cells.
    """
    s = x[..., 0, :, :] + x[..., 1, :, :]
    m = (s - neighborhood_sum(s, shape.n) > 0).astype(np.float64)
    g = m - neighborhood_sum(m, shape.n)
    return np.stack([g, g], axis=-3)


def consistency_gradient(x: np.ndarray, previous: Sequence[np.ndarray]) -> np.ndarray:
    """Subgradient of the inconsistency score wrt the current window; previous windows are constants."""
    h = x.shape[0] - 1
    g = np.zeros_like(x)
    for k in range(1, h + 1):
        g[:h - k + 1] += np.sign(x[:h - k + 1] - previous[k - 1][k:])
    return g


def aware_variant(base: str, model, windows, config: AttackConfig,
                  memory: Sequence[np.ndarray] = ()) -> PerturbationSet:
    """Detector-aware attack: minimize ``L_adv + lam * (gamma_c + gamma_v)`` window by window.

    Windows are attacked in stream order. The consistency term compares each
    window against the perturbed windows already emitted (the detector's
    memory), seeded with ``memory`` (most recent last); it is skipped until h
    previous windows exist.
    """
    step, n_steps = _base_schedule(base, config)
    inputs = _inputs_of(windows)
    single = inputs.ndim == 4
    if single:
        inputs = inputs[None]
    shape = _grid_of(model, inputs)
    h = inputs.shape[1] - 1
    emitted = [np.asarray(m, dtype=np.float64) for m in memory]
    deltas = np.zeros_like(inputs)
    for w in range(inputs.shape[0]):
        prev = emitted[::-1][:h] if len(emitted) >= h else None

        def penalty(x, prev=prev):
            g = validity_gradient(x, shape)
            if prev is not None:
                g = g + consistency_gradient(x[0], prev)[None]
            return g

        # a batch of one keeps the arithmetic identical to the base attack on that window
        deltas[w] = _sign_descent(model, inputs[w:w + 1], config, step, n_steps, penalty=penalty)[0]
        emitted.append(clip_input(inputs[w] + deltas[w]))
    return PerturbationSet(deltas[0] if single else deltas, config.epsilon, config.mode)


# -- universal perturbations ---------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def distribution_weights(W: np.ndarray) -> np.ndarray:
    """Normalize logits over the slice axis: ``sigmoid(W) / sum_k sigmoid(W)[..., k]``."""
    s = _sigmoid(np.asarray(W, dtype=np.float64))
    return s / s.sum(axis=-1, keepdims=True)


def distribute(delta_in: np.ndarray, W: np.ndarray, shape: GridShape):
    """Spread each cell's inflow perturbation over its neighbors' outflows.

    Slice ``k(i, j)`` of cell q carries the share sent to cell ``q + (i, j)``;
    shares leaving the grid are dropped. Returns ``(delta_star, delta_out)``
    with shapes ``(l1, l2, K)`` and ``(l1, l2)``.
    """
    delta_in = np.asarray(delta_in, dtype=np.float64)
    if delta_in.shape != (shape.l1, shape.l2) or np.shape(W) != (shape.l1, shape.l2, shape.slices):
        raise ShapeMismatch(
            f"delta_in {delta_in.shape} / W {np.shape(W)} do not match grid "
            f"{(shape.l1, shape.l2)} with {shape.slices} slices")
    star = delta_in[..., None] * distribution_weights(W)
    out = np.zeros_like(delta_in)
    for k, (i, j) in enumerate(neighbor_offsets(shape.n)):
        out += shift2d(star[..., k], i, j)
    return star, out


def distribute_backward(g_out: np.ndarray, delta_in: np.ndarray, W: np.ndarray, shape: GridShape):
    """Gradients wrt ``delta_in`` and ``W`` given ``g_out = dL/d delta_out``."""
    s = _sigmoid(W)
    total = s.sum(axis=-1, keepdims=True)
    weights = s / total
    g_star = np.stack([shift2d(g_out, -i, -j) for i, j in neighbor_offsets(shape.n)], axis=-1)
    g_in = (g_star * weights).sum(axis=-1)
    g_w = g_star * delta_in[..., None]
    g_s = (g_w - (g_w * weights).sum(axis=-1, keepdims=True)) / total
    return g_in, g_s * s * (1.0 - s)


class UniversalPerturbation:
    """One per-timestep perturbation ``(delta_in, delta_out)`` shared by every state.

    With a distribution matrix ``W`` the outflow part is always derived via
    :func:`distribute`; adaptive attacks learn ``delta_out`` freely and carry
    ``W = None``.
    """

    def __init__(self, delta_in, shape: GridShape, W=None, delta_out=None,
                 epsilon: float = 0.0, mode: str = DIGITAL, steps: int = 0):
        self.shape = shape
        self.delta_in = np.asarray(delta_in, dtype=np.float64)
        self.W = None if W is None else np.asarray(W, dtype=np.float64)
        if self.W is not None:
            if delta_out is not None:
                raise ValueError("delta_out is derived from W and cannot be set")
            _, self.delta_out = distribute(self.delta_in, self.W, shape)
        else:
            if delta_out is None:
                raise ValueError("delta_out is required when W is None")
            self.delta_out = np.asarray(delta_out, dtype=np.float64)
        if self.delta_in.shape != (shape.l1, shape.l2) or self.delta_out.shape != (shape.l1, shape.l2):
            raise ShapeMismatch("perturbation matrices do not match the grid")
        self.epsilon = epsilon
        self.mode = mode
        self.steps = steps

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([self.delta_in, self.delta_out])

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        """Add the perturbation to every state of every window and clip to [0, 1]."""
        return clip_input(np.asarray(inputs) + self.stacked)

    def as_perturbation_set(self, inputs: np.ndarray) -> PerturbationSet:
        deltas = np.broadcast_to(self.stacked, np.shape(inputs)).copy()
        return PerturbationSet(deltas, self.epsilon, self.mode)


def _universal_grad(model, inputs, delta, target):
    """Mean loss over windows and the window-averaged gradient wrt a shared (2, l1, l2) offset."""
    _, loss, grad = _Objective(model, target)(inputs, delta)
    lead = tuple(range(grad.ndim - 3))
    return loss.mean(), grad.sum(axis=lead) / inputs.shape[0]


def adaptive_universal(base: str, model, windows, config: AttackConfig,
                       trace: list | None = None) -> UniversalPerturbation:
    """Universal variant of a base attack minimizing ``L_adv + lam * gamma_v``.

    One ``(delta_in, delta_out)`` pair is learned over all windows; gradients
    are averaged over the full pass before each signed step.
    """
    inputs = _inputs_of(windows)
    if inputs.ndim != 5 or inputs.shape[0] == 0:
        raise EmptyDataset("adaptive attack needs a non-empty window stream")
    shape = _grid_of(model, inputs)
    target = config.target_for(shape)
    step, n_steps = _base_schedule(base, config)
    delta = np.zeros(shape.state_shape)
    for _ in range(n_steps):
        loss, grad = _universal_grad(model, inputs, delta, target)
        if trace is not None:
            trace.append(loss)
        x = clip_input(inputs + delta)
        raw = inputs + delta
        vgrad = np.where((raw >= 0.0) & (raw <= 1.0), validity_gradient(x, shape), 0.0)
        grad = grad + config.lam * vgrad.sum(axis=(0, 1)) / inputs.shape[0]
        delta = np.clip(delta - step * np.sign(grad), config.lower, config.epsilon)
    if trace is not None:
        trace.append(_universal_grad(model, inputs, delta, target)[0])
    return UniversalPerturbation(delta[0], shape, delta_out=delta[1], epsilon=config.epsilon,
                                 mode=config.mode, steps=n_steps)


CVPR_INIT_LOGIT = -5.0


def cvpr(model, windows, config: AttackConfig, budget: PhysicalBudget | None = None,
         trace: list | None = None) -> UniversalPerturbation:
    """Consistent, valid, physically-realizable universal attack.

    Starts from ``delta_in = 0`` and ``W = -5``; each iteration derives
    ``delta_out`` from ``(delta_in, W)``, takes a signed step of size
    ``5 * epsilon / N`` on both, and clips ``delta_in`` to ``[-eps, eps]``
    (digital) or ``[0, eps]`` (physical). In physical mode the iteration
    count is capped by the budget's query limit.
    """
    inputs = _inputs_of(windows)
    if inputs.ndim != 5 or inputs.shape[0] == 0:
        raise EmptyDataset("CVPR needs a non-empty window stream")
    shape = _grid_of(model, inputs)
    target = config.target_for(shape)
    n_steps = config.steps
    if config.mode == PHYSICAL and budget is not None:
        n_steps = min(n_steps, budget.query_limit)
    eta = 5.0 * config.epsilon / n_steps if n_steps else 0.0
    delta_in = np.zeros((shape.l1, shape.l2))
    W = np.full((shape.l1, shape.l2, shape.slices), CVPR_INIT_LOGIT)
    for _ in range(n_steps):
        _, delta_out = distribute(delta_in, W, shape)
        loss, grad = _universal_grad(model, inputs, np.stack([delta_in, delta_out]), target)
        if trace is not None:
            trace.append(loss)
        g_in, g_w = distribute_backward(grad[1], delta_in, W, shape)
        g_in = g_in + grad[0]
        delta_in = delta_in - eta * np.sign(g_in)
        W = W - eta * np.sign(g_w)
        delta_in = np.clip(delta_in, config.lower, config.epsilon)
    result = UniversalPerturbation(delta_in, shape, W=W, epsilon=config.epsilon,
                                   mode=config.mode, steps=n_steps)
    if trace is not None:
        trace.append(_universal_grad(model, inputs, result.stacked, target)[0])
    return result


# -- physical realization -------------------------------------------------------------

def budget_round(devices: np.ndarray, b_d: int) -> np.ndarray:
    """Round non-negative real device counts to integers with total <= ``b_d``.

    Counts are rounded to nearest; if the total exceeds the budget they are
    rescaled to sum to ``b_d`` and apportioned by the largest-remainder method
    (ties broken by flat index), which hits ``b_d`` exactly.
    """
    devices = np.maximum(np.asarray(devices, dtype=np.float64), 0.0)
    rounded = np.rint(devices).astype(np.int64)
    total = int(rounded.sum())
    if total <= b_d:
        return rounded
    quota = rounded.ravel() * (b_d / total)
    base = np.floor(quota).astype(np.int64)
    short = b_d - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(quota.size), -(quota - base)))
        base[order[:short]] += 1
    return base.reshape(rounded.shape)


def device_perturbation(delta: np.ndarray, budget: PhysicalBudget) -> np.ndarray:
    """Integer devices ``round(1000 * delta)`` (negatives dropped) rounded into the budget."""
    if budget.b_d == 0:
        warnings.warn("device budget is zero; returning a zero perturbation", BudgetZeroWarning, stacklevel=3)
        return np.zeros(np.shape(delta), dtype=np.int64)
    return budget_round(np.asarray(delta, dtype=np.float64) * SCALE, budget.b_d)


@dataclass(frozen=True)
class PhysicalRealization:
    devices: np.ndarray          # added device counts, (2, l1, l2) or per-window
    series: FlowSeries | None    # base + devices, for universal perturbations
    saturated: np.ndarray        # cells where base + devices reached the clamp

    def realized_states(self) -> np.ndarray:
        return transform(self.series.counts)


def physical_project(delta: np.ndarray, base: FlowSeries, budget: PhysicalBudget) -> PhysicalRealization:
    """Turn a model-space perturbation into added devices under a budget.

    ``delta`` is ``(2, l1, l2)`` and is added at every timestep of ``base``;
    negative entries cannot be realized by adding devices and become 0.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != base.shape.state_shape:
        raise ShapeMismatch(f"delta {delta.shape} != {base.shape.state_shape}")
    devices = device_perturbation(delta, budget)
    counts = base.counts + devices
    saturated = counts >= SCALE
    if np.any(saturated & (devices > 0)):
        warnings.warn("added devices push some cells past the 1000-device clamp",
                      SaturationWarning, stacklevel=2)
    return PhysicalRealization(devices, FlowSeries(base.shape, counts, base.start), saturated)


def physical_project_windows(deltas: np.ndarray, window_counts: np.ndarray,
                             budget: PhysicalBudget) -> tuple[np.ndarray, np.ndarray]:
    """Per-window realization for non-universal attacks: each window gets its own budget.

    Returns ``(devices, realized_inputs)``, both shaped like ``deltas``.
    """
    if deltas.shape != window_counts.shape:
        raise ShapeMismatch(f"deltas {deltas.shape} != window counts {window_counts.shape}")
    devices = np.zeros(deltas.shape, dtype=np.int64)
    if budget.b_d:
        for w in range(deltas.shape[0]):
            devices[w] = budget_round(deltas[w] * SCALE, budget.b_d)
    return devices, transform(window_counts + devices)


# -- FLOWPERT v1 ------------------------------------------------------------------------

FLOWPERT_MAGIC = b"CFPP"
FLOWPERT_VERSION = 1
FLAG_PHYSICAL = 0x01
FLAG_FREE_OUTFLOW = 0x02
_PERT_HEADER = struct.Struct("<4sHBdIHHH")


def save_perturbation(pert: UniversalPerturbation, path) -> None:
    s = pert.shape
    flags = (FLAG_PHYSICAL if pert.mode == PHYSICAL else 0) | (FLAG_FREE_OUTFLOW if pert.W is None else 0)
    W = pert.W if pert.W is not None else np.zeros((s.l1, s.l2, s.slices))
    with open(path, "wb") as fh:
        fh.write(_PERT_HEADER.pack(FLOWPERT_MAGIC, FLOWPERT_VERSION, flags, float(pert.epsilon),
                                   pert.steps, s.l1, s.l2, s.n))
        for arr in (pert.delta_in, W, pert.delta_out):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_perturbation(path) -> UniversalPerturbation:
    data = Path(path).read_bytes()
    if len(data) < _PERT_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, flags, eps, steps, l1, l2, n = _PERT_HEADER.unpack_from(data)
    if magic != FLOWPERT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FLOWPERT_VERSION:
        raise FormatError(f"{path}: unsupported FLOWPERT version {version}")
    try:
        shape = GridShape(l1, l2, n)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from None
    cells = l1 * l2
    need = (2 * cells + cells * shape.slices) * 8
    body = data[_PERT_HEADER.size:]
    if len(body) < need:
        raise TruncatedFile(f"{path}: expected {need} data bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f8", count=need // 8)
    d_in = vals[:cells].reshape(l1, l2).copy()
    W = vals[cells:cells + cells * shape.slices].reshape(l1, l2, shape.slices).copy()
    d_out = vals[cells + cells * shape.slices:].reshape(l1, l2).copy()
    mode = PHYSICAL if flags & FLAG_PHYSICAL else DIGITAL
    if flags & FLAG_FREE_OUTFLOW:
        return UniversalPerturbation(d_in, shape, delta_out=d_out, epsilon=eps, mode=mode, steps=steps)
    pert = UniversalPerturbation(d_in, shape, W=W, epsilon=eps, mode=mode, steps=steps)
    if not np.array_equal(pert.delta_out, d_out):
        raise FormatError(f"{path}: stored outflow perturbation does not match its distribution matrix")
    return pert


def save_perturbation_set(pset: PerturbationSet, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, deltas=pset.deltas, epsilon=pset.epsilon, mode=pset.mode)


def load_perturbation_set(path) -> PerturbationSet:
    try:
        with np.load(path, allow_pickle=False) as z:
            return PerturbationSet(z["deltas"].copy(), float(z["epsilon"]), str(z["mode"]))
    except (ValueError, KeyError, OSError) as exc:
        raise FormatError(f"{path}: not a perturbation archive: {exc}") from None
