"""Reference crowd-flow predictor: a plain MLP with hand-written backprop.

Attacks only need two things from a model, ``predict`` and ``input_grad``;
anything providing those (same array layout) can stand in for MlpModel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, FormatError, ShapeMismatch, TruncatedFile
from .flowgrid import FlowState, GridShape, HistoryWindow


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class MlpModel:
    """Fully connected net: ReLU hidden layers, logistic output.

    Input is a flattened ``(h + 1, 2, l1, l2)`` window, output a flattened
    ``(2, l1, l2)`` state.
    """

    def __init__(self, shape: GridShape, h: int, weights: list, biases: list):
        self.shape = shape
        self.h = h
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        dims = self.layer_dims
        if dims[0] != self.input_size or dims[-1] != self.output_size:
            raise ShapeMismatch(f"layer dims {dims} do not fit h={h} on {shape.l1}x{shape.l2}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch(f"bias {b.shape} does not match weight {w.shape}")

    @property
    def input_size(self) -> int:
        return 2 * (self.h + 1) * self.shape.l1 * self.shape.l2

    @property
    def output_size(self) -> int:
        return 2 * self.shape.l1 * self.shape.l2

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _flatten(self, inputs) -> tuple[np.ndarray, tuple]:
        x = np.asarray(inputs, dtype=np.float64)
        win = (self.h + 1,) + self.shape.state_shape
        if x.shape[-4:] != win:
            raise ShapeMismatch(f"input shape {x.shape} does not end with {win}")
        lead = x.shape[:-4]
        return x.reshape(-1, self.input_size), lead

    def _forward(self, x):
        acts = [x]
        pre = []
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(_sigmoid(z) if li == len(self.weights) - 1 else np.maximum(z, 0.0))
        return acts, pre

    def _backward(self, acts, pre, d_out, want_params: bool):
        """Back-propagate ``d_out`` (gradient wrt the logistic outputs)."""
        y = acts[-1]
        delta = d_out * y * (1.0 - y)
        gw, gb = [], []
        for li in range(len(self.weights) - 1, -1, -1):
            if want_params:
                gw.append(acts[li].T @ delta)
                gb.append(delta.sum(axis=0))
            delta = delta @ self.weights[li].T
            if li > 0:
                delta = delta * (pre[li - 1] > 0)
        return delta, gw[::-1], gb[::-1]

    def predict(self, inputs) -> np.ndarray:
        x, lead = self._flatten(inputs)
        acts, _ = self._forward(x)
        return acts[-1].reshape(lead + self.shape.state_shape)

    def input_grad(self, inputs, targets):
        """Per-window loss ``mean((F(x) - y)^2)`` and its gradient wrt each input entry."""
        x, lead = self._flatten(inputs)
        y = np.broadcast_to(np.asarray(targets, dtype=np.float64),
                            lead + self.shape.state_shape).reshape(-1, self.output_size)
        acts, pre = self._forward(x)
        err = acts[-1] - y
        loss = np.mean(err * err, axis=1)
        d_x, _, _ = self._backward(acts, pre, 2.0 * err / self.output_size, want_params=False)
        return loss.reshape(lead), d_x.reshape(np.shape(inputs))

    def copy(self) -> "MlpModel":
        return MlpModel(self.shape, self.h, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])


def init_mlp(shape: GridShape, h: int, hidden: Sequence[int] = (512, 512, 512),
             seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [2 * (h + 1) * shape.l1 * shape.l2, *hidden, 2 * shape.l1 * shape.l2]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(shape, h, weights, biases)


def _check_window(model: MlpModel, window: HistoryWindow):
    if window.h != model.h or window.states.shape[1:] != model.shape.state_shape:
        raise ShapeMismatch(
            f"window (h={window.h}, {window.states.shape[1:]}) does not match model "
            f"(h={model.h}, {model.shape.state_shape})")


def forward(model: MlpModel, window: HistoryWindow) -> FlowState:
    _check_window(model, window)
    return FlowState.from_array(model.predict(window.states), window.t + 1)


def input_gradient(model: MlpModel, window: HistoryWindow, target) -> np.ndarray:
    """Gradient of ``mean((F(X) - target)^2)`` wrt the window states."""
    _check_window(model, window)
    y = target.as_array() if isinstance(target, FlowState) else np.asarray(target)
    _, grad = model.input_grad(window.states, y)
    return grad


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 5e-2
    momentum: float = 0.9
    seed: int = 0
    train_fraction: float = 0.8
    hidden: tuple[int, ...] = (512, 512, 512)

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def mse(model: MlpModel, inputs, targets, chunk: int = 1024) -> float:
    """Mean over windows and output entries of the squared prediction error."""
    n = len(inputs)
    if n == 0:
        raise EmptyDataset("no windows to evaluate")
    total = 0.0
    for s in range(0, n, chunk):
        err = model.predict(inputs[s:s + chunk]) - targets[s:s + chunk]
        total += float(np.sum(err * err))
    return total / (n * model.output_size)


def train(data, config: TrainConfig = TrainConfig(), history: list | None = None,
          model: MlpModel | None = None):
    """Fit an MLP by momentum SGD on the chronological train split.

    ``data`` is a WindowSet. The step minimizes the per-window summed squared
    error averaged over the batch. Returns ``(model, test_loss)`` where the
    test loss is the mean squared error on the held-out tail. Per-epoch mean
    training losses are appended to ``history`` when given.
    """
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    train_set, test_set = data.split(config.train_fraction)
    if len(train_set) == 0 or len(test_set) == 0:
        raise EmptyDataset(f"split {config.train_fraction} of {len(data)} windows leaves a side empty")
    if model is None:
        model = init_mlp(data.shape, data.h, config.hidden, config.seed)
        # start the logistic output at the mean target; from 0.5 the first
        # steps saturate it and training stalls
        mean = float(np.clip(train_set.targets.mean(), 1e-6, 1 - 1e-6))
        model.biases[-1][:] = np.log(mean / (1.0 - mean))
    rng = np.random.default_rng(config.seed + 1)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    x_all = train_set.inputs.reshape(len(train_set), -1)
    y_all = train_set.targets.reshape(len(train_set), -1)
    for _ in range(config.epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            acts, pre = model._forward(x)
            err = acts[-1] - y
            epoch_loss += float(np.sum(err * err))
            _, gw, gb = model._backward(acts, pre, 2.0 * err / len(idx), want_params=True)
            for li in range(len(model.weights)):
                vel_w[li] = config.momentum * vel_w[li] - config.learning_rate * gw[li]
                vel_b[li] = config.momentum * vel_b[li] - config.learning_rate * gb[li]
                model.weights[li] += vel_w[li]
                model.biases[li] += vel_b[li]
        if history is not None:
            history.append(epoch_loss / (len(order) * model.output_size))
    return model, mse(model, test_set.inputs, test_set.targets)


# -- FLOWNET v1 -------------------------------------------------------------------

FLOWNET_MAGIC = b"CFPN"
FLOWNET_VERSION = 1
_NET_HEADER = struct.Struct("<4sHHHHHH")


def save_model(model: MlpModel, path) -> None:
    dims = model.layer_dims
    s = model.shape
    with open(path, "wb") as fh:
        fh.write(_NET_HEADER.pack(FLOWNET_MAGIC, FLOWNET_VERSION, s.l1, s.l2, s.n, model.h, len(dims)))
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f8").tobytes(order="C"))
            fh.write(b.astype("<f8").tobytes())


def load_model(path) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < _NET_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, l1, l2, n, h, ndims = _NET_HEADER.unpack_from(data)
    if magic != FLOWNET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FLOWNET_VERSION:
        raise FormatError(f"{path}: unsupported FLOWNET version {version}")
    off = _NET_HEADER.size
    if len(data) < off + 4 * ndims:
        raise TruncatedFile(f"{path}: layer table truncated")
    dims = np.frombuffer(data, dtype="<u4", count=ndims, offset=off).astype(int)
    off += 4 * ndims
    need = sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) * 8
    if len(data) - off < need:
        raise TruncatedFile(f"{path}: expected {need} parameter bytes, found {len(data) - off}")
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(data, "<f8", a * b, off).reshape(a, b).copy())
        off += 8 * a * b
        biases.append(np.frombuffer(data, "<f8", b, off).copy())
        off += 8 * b
    try:
        return MlpModel(GridShape(l1, l2, n), h, weights, biases)
    except (ValueError, ShapeMismatch) as exc:
        raise FormatError(f"{path}: inconsistent header: {exc}") from None
