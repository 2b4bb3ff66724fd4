"""Loss metrics on clean and perturbed window streams."""

from __future__ import annotations

import numpy as np

from ..errors import EmptyDataset


def eval_clean(model, windows) -> float:
    """Mean over windows of the mean squared error between prediction and ground truth."""
    inputs = np.asarray(windows.inputs)
    if inputs.shape[0] == 0:
        raise EmptyDataset("no windows to evaluate")
    return _mean_sq(model.predict(inputs), windows.targets)


def eval_adversarial(model, perturbed_inputs, y_target) -> float:
    """Mean squared distance from predictions on perturbed inputs to the attacker's target.

    Smaller means the attack pulled the predictions closer to its target.
    ``y_target`` is a single state or one state per window.
    """
    x = np.asarray(perturbed_inputs)
    if x.ndim < 5 or x.shape[0] == 0:
        raise EmptyDataset("no windows to evaluate")
    return _mean_sq(model.predict(x), y_target)


def _mean_sq(pred, target) -> float:
    err = pred - np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    return float(np.mean(err * err))
