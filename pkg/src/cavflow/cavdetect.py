"""Runtime consistency-and-validity detector for history-window inputs.

The detector never looks at the predictor. It remembers the last h windows
it was shown and flags an input when its overlap with those windows differs
(inconsistency) or when any of its states has more inflow or outflow than
its neighborhood can account for (invalidity).
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NoLabeledSamples, ShapeMismatch, StreamTooShort
from .flowgrid import GridShape, HistoryWindow, consistency_score, invalidity

MIN_CALIBRATION = 200


@dataclass(frozen=True)
class DetectionVerdict:
    gamma_c: float
    gamma_v: float
    consistent: bool
    valid: bool
    adversarial: bool
    warmup: bool
    timestep: int = 0


def window_invalidity(states: np.ndarray, shape: GridShape, strict: bool = False) -> float:
    """Worst per-state invalidity over the states of one window."""
    return float(np.max(invalidity(states, shape, strict)))


class CavDetector:
    """Stateful detector; one instance per input stream.

    ``observe`` is not thread-safe: calls for one stream must be serialized.
    A gap in timestamps (or a rewind) clears the memory, so the next h
    windows are warm-up again.
    """

    def __init__(self, shape: GridShape, h: int, tau_c: float = 0.0, tau_v: float = 0.0,
                 strict: bool = False):
        if h < 1:
            raise ValueError("detector needs h >= 1")
        if tau_c < 0 or tau_v < 0:
            raise ValueError("thresholds must be non-negative")
        self.shape = shape
        self.h = h
        self.tau_c = float(tau_c)
        self.tau_v = float(tau_v)
        self.strict = strict
        self.memory: deque = deque(maxlen=h)
        self._last_t: int | None = None

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.tau_c, self.tau_v

    def reset(self) -> None:
        self.memory.clear()
        self._last_t = None

    def scores(self, window: HistoryWindow) -> tuple[float | None, float]:
        """``(gamma_c, gamma_v)`` for ``window`` against the current memory, without updating it.

        ``gamma_c`` is None while the memory is not yet full.
        """
        self._check(window)
        gamma_v = window_invalidity(window.states, self.shape, self.strict)
        if len(self.memory) < self.h or self._last_t is None or window.t != self._last_t + 1:
            return None, gamma_v
        previous = [m.states for m in reversed(self.memory)]
        return consistency_score(window.states, previous), gamma_v

    def observe(self, window: HistoryWindow) -> DetectionVerdict:
        gamma_c, gamma_v = self.scores(window)
        if self._last_t is not None and window.t != self._last_t + 1:
            self.memory.clear()
        self.memory.append(window)
        self._last_t = window.t
        if gamma_c is None:
            return DetectionVerdict(0.0, gamma_v, True, True, False, True, window.t)
        consistent = gamma_c <= self.tau_c
        valid = gamma_v <= self.tau_v
        return DetectionVerdict(gamma_c, gamma_v, consistent, valid,
                                not (consistent and valid), False, window.t)

    def observe_stream(self, windows: Iterable[HistoryWindow]) -> list[DetectionVerdict]:
        return [self.observe(w) for w in windows]

    def _check(self, window: HistoryWindow) -> None:
        if window.h != self.h or window.states.shape[1:] != self.shape.state_shape:
            raise ShapeMismatch(
                f"window (h={window.h}, {window.states.shape[1:]}) does not match detector "
                f"(h={self.h}, {self.shape.state_shape})")


def calibrate(windows: Sequence[HistoryWindow], shape: GridShape, h: int,
              target_frr: float, strict: bool = False) -> tuple[float, float]:
    """Thresholds giving each check half of ``target_frr`` on a clean stream.

    Each threshold is the empirical ``1 - target_frr / 2`` quantile (an
    observed score, never interpolated) of the clean scores. A target of 1
    or more places both thresholds at the minimum observed score.
    """
    if target_frr <= 0:
        raise ValueError("target_frr must be > 0")
    det = CavDetector(shape, h, strict=strict)
    verdicts = [v for v in det.observe_stream(windows) if not v.warmup]
    if len(verdicts) < MIN_CALIBRATION:
        raise StreamTooShort(
            f"calibration needs {MIN_CALIBRATION} post-warm-up windows, got {len(verdicts)}")
    gc = np.array([v.gamma_c for v in verdicts])
    gv = np.array([v.gamma_v for v in verdicts])
    if target_frr >= 1.0:
        return float(gc.min()), float(gv.min())
    q = 1.0 - target_frr / 2.0
    return float(np.quantile(gc, q, method="higher")), float(np.quantile(gv, q, method="higher"))


def far_frr(labeled: Iterable[tuple[DetectionVerdict, bool]]) -> tuple[float, float]:
    """``(FAR, FRR)`` over post-warm-up verdicts.

    A rate whose class has no samples is NaN; if neither class has samples
    :class:`NoLabeledSamples` is raised.
    """
    adv_total = adv_accepted = clean_total = clean_rejected = 0
    for verdict, is_adv in labeled:
        if verdict.warmup:
            continue
        if is_adv:
            adv_total += 1
            adv_accepted += not verdict.adversarial
        else:
            clean_total += 1
            clean_rejected += verdict.adversarial
    if adv_total == 0 and clean_total == 0:
        raise NoLabeledSamples("no post-warm-up verdicts to score")
    far = adv_accepted / adv_total if adv_total else float("nan")
    frr = clean_rejected / clean_total if clean_total else float("nan")
    return far, frr


LOG_COLUMNS = ("timestep", "gamma_c", "gamma_v", "consistent", "valid", "adversarial", "warmup")


def write_verdict_log(verdicts: Sequence[DetectionVerdict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for v in verdicts:
            w.writerow([v.timestep, repr(v.gamma_c), repr(v.gamma_v),
                        int(v.consistent), int(v.valid), int(v.adversarial), int(v.warmup)])


def read_verdict_log(path) -> list[DetectionVerdict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [DetectionVerdict(float(r["gamma_c"]), float(r["gamma_v"]), r["consistent"] == "1",
                             r["valid"] == "1", r["adversarial"] == "1", r["warmup"] == "1",
                             int(r["timestep"])) for r in rows]
