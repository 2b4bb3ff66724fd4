"""Experiment specs, the sweep runner and plot-data reports.

A spec file is an INI-style text file (``key = value`` lines under
``[section]`` headers). Recognized sections and keys:

``[experiment]``  seed (int, default 0), out (output directory, default
    ``results``), stream (windows of the test split to attack, 0 = all),
    train_fraction (default 0.8)
``[data]``        path to a FLOWBIN file; mutually exclusive with ``[generator]``
``[generator]``   l1, l2, n, agents, steps, move_prob, hotspot_count,
    hotspot_gain, hotspot_radius, cycle_amplitude (seed comes from ``[experiment]``)
``[model]``       path to a FLOWNET file; mutually exclusive with ``[train]``
``[train]``       hidden (comma list), epochs, batch_size, learning_rate, momentum
``[attack]``      name (fgsm, ifgsm, pgd, aware-<base>, adaptive-<base>, cvpr),
    mode (digital | physical), alpha, lam, query_limit (default 20),
    target (optional ``.npy`` file holding a ``(2, l1, l2)`` state)
``[detector]``    enabled (bool, default true), frr (optional calibration
    target), strict (bool)
``[sweep]``       epsilon, steps, budget, history: comma lists; budget only
    applies in physical mode
"""

from __future__ import annotations

import configparser
import csv
import itertools
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import attacks as atk
from ..cavdetect import CavDetector, calibrate, far_frr, write_verdict_log
from ..errors import ShapeMismatch
from ..flowgrid import GridShape, transform
from ..gradnet import TrainConfig, load_model, train
from ..synthflow import FlowSeries, GeneratorConfig, generate, load, slice_windows, window_counts
from .metrics import eval_adversarial, eval_clean

DEFAULT_BUDGETS = (500, 1000, 5000, 10000, 15000)
ATTACKS = ("fgsm", "ifgsm", "pgd", "cvpr") + tuple(
    f"{kind}-{base}" for kind in ("aware", "adaptive") for base in atk.BASES)


class SpecError(ValueError):
    """The experiment spec is malformed or contradictory."""


@dataclass(frozen=True)
class ExperimentSpec:
    attack: str
    epsilons: tuple[float, ...]
    steps: tuple[int, ...]
    histories: tuple[int, ...]
    budgets: tuple[int, ...] = DEFAULT_BUDGETS
    data_path: str | None = None
    generator: GeneratorConfig | None = None
    model_path: str | None = None
    train: TrainConfig | None = None
    mode: str = atk.DIGITAL
    alpha: float | None = None
    lam: float = 1e10
    query_limit: int = 20
    target_path: str | None = None
    detector: bool = True
    frr: float | None = None
    strict: bool = False
    out_dir: str = "results"
    seed: int = 0
    stream: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if (self.data_path is None) == (self.generator is None):
            raise SpecError("exactly one data source (data path or generator) is required")
        if (self.model_path is None) == (self.train is None):
            raise SpecError("exactly one model source (model path or train config) is required")
        if self.attack not in ATTACKS:
            raise SpecError(f"unknown attack {self.attack!r}; choose from {', '.join(ATTACKS)}")
        if self.mode not in (atk.DIGITAL, atk.PHYSICAL):
            raise SpecError(f"mode must be digital or physical, got {self.mode!r}")
        for name in ("epsilons", "steps", "histories", "budgets"):
            if not getattr(self, name):
                raise SpecError(f"sweep list {name} must be non-empty")
        if self.stream < 0:
            raise SpecError("stream must be >= 0")

    @property
    def points(self) -> list[tuple[int, float, int, int | None]]:
        """Sweep coordinates ``(h, epsilon, steps, budget)`` in output order."""
        budgets = self.budgets if self.mode == atk.PHYSICAL else (None,)
        return list(itertools.product(self.histories, self.epsilons, self.steps, budgets))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def parse_spec(path) -> ExperimentSpec:
    """Read an experiment spec file; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"spec file {path} not found")
    base = path.parent
    try:
        return _from_parser(cp, base)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"{path}: {exc}") from None


def _resolve(base: Path, value: str) -> str:
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _from_parser(cp: configparser.ConfigParser, base: Path) -> ExperimentSpec:
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    seed = int(exp.get("seed", 0))
    kw: dict = dict(seed=seed, out_dir=_resolve(base, exp.get("out", "results")),
                    stream=int(exp.get("stream", 0)),
                    train_fraction=float(exp.get("train_fraction", 0.8)))
    if cp.has_section("data"):
        kw["data_path"] = _resolve(base, cp["data"]["path"])
    if cp.has_section("generator"):
        kw["generator"] = generator_config(cp["generator"], seed)
    if cp.has_section("model"):
        kw["model_path"] = _resolve(base, cp["model"]["path"])
    if cp.has_section("train"):
        t = cp["train"]
        defaults = TrainConfig()
        kw["train"] = TrainConfig(
            epochs=t.getint("epochs", defaults.epochs),
            batch_size=t.getint("batch_size", defaults.batch_size),
            learning_rate=t.getfloat("learning_rate", defaults.learning_rate),
            momentum=t.getfloat("momentum", defaults.momentum),
            seed=seed, train_fraction=kw["train_fraction"],
            hidden=_ints(t.get("hidden", ",".join(map(str, defaults.hidden)))))
    if not cp.has_section("attack"):
        raise SpecError("missing [attack] section")
    a = cp["attack"]
    kw.update(attack=a["name"].strip(), mode=a.get("mode", atk.DIGITAL).strip(),
              lam=a.getfloat("lam", 1e10), query_limit=a.getint("query_limit", 20))
    if a.get("alpha", "").strip():
        kw["alpha"] = a.getfloat("alpha")
    if a.get("target", "").strip():
        kw["target_path"] = _resolve(base, a["target"])
    if cp.has_section("detector"):
        d = cp["detector"]
        kw["detector"] = d.getboolean("enabled", True)
        kw["strict"] = d.getboolean("strict", False)
        if d.get("frr", "").strip():
            kw["frr"] = d.getfloat("frr")
    sw = cp["sweep"] if cp.has_section("sweep") else {}
    kw["epsilons"] = _floats(sw.get("epsilon", "0.05"))
    kw["steps"] = _ints(sw.get("steps", "200"))
    kw["histories"] = _ints(sw.get("history", "5"))
    if "budget" in sw:
        kw["budgets"] = _ints(sw["budget"])
    return ExperimentSpec(**kw)


def generator_config(section, seed: int | None = None) -> GeneratorConfig:
    """Build a GeneratorConfig from a mapping of string values."""
    d = GeneratorConfig()
    shape = GridShape(int(section.get("l1", d.shape.l1)), int(section.get("l2", d.shape.l2)),
                      int(section.get("n", d.shape.n)))
    return GeneratorConfig(
        shape=shape,
        agents=int(section.get("agents", d.agents)),
        steps=int(section.get("steps", d.steps)),
        move_prob=float(section.get("move_prob", d.move_prob)),
        hotspot_count=int(section.get("hotspot_count", d.hotspot_count)),
        seed=int(section.get("seed", d.seed)) if seed is None else seed,
        hotspot_gain=float(section.get("hotspot_gain", d.hotspot_gain)),
        hotspot_radius=float(section.get("hotspot_radius", d.hotspot_radius)),
        cycle_amplitude=float(section.get("cycle_amplitude", d.cycle_amplitude)))


# -- running ---------------------------------------------------------------------------

RESULT_COLUMNS = ("point", "attack", "mode", "h", "epsilon", "steps", "budget", "clean_loss",
                  "adv_loss", "far", "frr", "tau_c", "tau_v", "error")


@dataclass
class ResultRow:
    point: int
    attack: str
    mode: str
    h: int
    epsilon: float
    steps: int
    budget: int | None
    clean_loss: float = math.nan
    adv_loss: float = math.nan
    far: float = math.nan
    frr: float = math.nan
    tau_c: float = math.nan
    tau_v: float = math.nan
    error: str = ""
    seconds: float = 0.0  # wall clock, written to timings.csv only
    trace: list = field(default_factory=list, repr=False)

    def as_record(self) -> list[str]:
        vals = [self.point, self.attack, self.mode, self.h, self.epsilon, self.steps,
                "" if self.budget is None else self.budget, self.clean_loss, self.adv_loss,
                self.far, self.frr, self.tau_c, self.tau_v, self.error]
        return [repr(v) if isinstance(v, float) else str(v) for v in vals]


def _perturb(spec: ExperimentSpec, model, stream, counts, config: atk.AttackConfig,
             budget: int | None, trace: list) -> np.ndarray:
    """Run the configured attack on ``stream`` and return realized perturbed inputs."""
    name = spec.attack
    phys = budget is not None
    pb = atk.PhysicalBudget(budget, spec.query_limit) if phys else None
    if phys:
        config = replace(config, steps=min(config.steps, spec.query_limit))
    if name == "cvpr":
        u = atk.cvpr(model, stream, config, budget=pb, trace=trace)
        delta = u.stacked
    elif name.startswith("adaptive-"):
        u = atk.adaptive_universal(name.split("-", 1)[1], model, stream, config, trace=trace)
        delta = u.stacked
    else:
        if name.startswith("aware-"):
            pset = atk.aware_variant(name.split("-", 1)[1], model, stream.inputs, config)
            trace.append(eval_adversarial(model, stream.inputs, config.target_for(stream.shape)))
            trace.append(eval_adversarial(model, pset.apply(stream.inputs), config.target_for(stream.shape)))
        else:
            pset = {"fgsm": atk.fgsm, "ifgsm": atk.ifgsm, "pgd": atk.pgd}[name](
                model, stream.inputs, config, trace=trace)
        if phys:
            return atk.physical_project_windows(pset.deltas, counts, pb)[1]
        return pset.apply(stream.inputs)
    if phys:
        return transform(counts + atk.device_perturbation(delta, pb))
    return atk.clip_input(stream.inputs + delta)


def _run_point(spec: ExperimentSpec, row: ResultRow, model, windows, counts, target, out: Path):
    train_set, test_set = windows.split(spec.train_fraction)
    n = len(test_set) if spec.stream == 0 else min(spec.stream, len(test_set))
    stream = test_set[:n]
    stream_counts = counts[len(train_set):len(train_set) + n]
    cfg = atk.AttackConfig(epsilon=row.epsilon, steps=row.steps, alpha=spec.alpha, lam=spec.lam,
                           mode=spec.mode, target=target)
    row.clean_loss = eval_clean(model, stream)
    adv_inputs = _perturb(spec, model, stream, stream_counts, cfg, row.budget, row.trace)
    row.adv_loss = eval_adversarial(model, adv_inputs, cfg.target_for(stream.shape))
    if not spec.detector:
        return
    tau = (0.0, 0.0)
    if spec.frr is not None:
        tau = calibrate(list(train_set), windows.shape, windows.h, spec.frr, spec.strict)
    row.tau_c, row.tau_v = tau
    clean_v = CavDetector(windows.shape, windows.h, *tau, strict=spec.strict).observe_stream(stream)
    adv_v = CavDetector(windows.shape, windows.h, *tau, strict=spec.strict).observe_stream(
        stream.with_inputs(adv_inputs))
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    write_verdict_log(clean_v, logs / f"point{row.point:03d}_clean.csv")
    write_verdict_log(adv_v, logs / f"point{row.point:03d}_adv.csv")
    row.far, _ = far_frr((v, True) for v in adv_v)
    _, row.frr = far_frr((v, False) for v in clean_v)


def _load_target(spec: ExperimentSpec):
    if spec.target_path is None:
        return None
    return np.load(spec.target_path, allow_pickle=False)


def run(spec: ExperimentSpec) -> list[ResultRow]:
    """Execute every sweep point in order and write ``results.csv``, ``traces.csv``,
    ``timings.csv`` and per-point verdict logs under ``spec.out_dir``.

    A failing point gets its error message in the ``error`` column; the sweep
    carries on.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: FlowSeries = load(spec.data_path) if spec.data_path else generate(spec.generator)
    target = _load_target(spec)
    rows: list[ResultRow] = []
    models: dict[int, object] = {}
    for idx, (h, eps, steps, budget) in enumerate(spec.points):
        row = ResultRow(idx, spec.attack, spec.mode, h, eps, steps, budget)
        t0 = time.perf_counter()
        try:
            windows = slice_windows(series, h)
            if h not in models:
                models[h] = _model_for(spec, windows)
            model = models[h]
            _run_point(spec, row, model, windows, window_counts(series, h), target, out)
        except Exception as exc:  # noqa: BLE001 - recorded per point by design
            row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        row.seconds = time.perf_counter() - t0
        rows.append(row)
    write_results(rows, out / "results.csv")
    write_traces(rows, out / "traces.csv")
    with open(out / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "seconds"])
        for r in rows:
            w.writerow([r.point, f"{r.seconds:.3f}"])
    return rows


def _model_for(spec: ExperimentSpec, windows):
    if spec.model_path is not None:
        model = load_model(spec.model_path)
        if model.h != windows.h or model.shape != windows.shape:
            raise ShapeMismatch(
                f"model (h={model.h}, {model.shape}) does not fit data (h={windows.h}, {windows.shape})")
        return model
    return train(windows, spec.train)[0]


def write_results(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow(r.as_record())


def write_traces(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "attack", "epsilon", "iteration", "adv_loss"])
        for r in rows:
            for it, loss in enumerate(r.trace):
                w.writerow([r.point, r.attack, repr(r.epsilon), it, repr(float(loss))])


def _num(text: str, kind=float):
    return None if text == "" else kind(text)


def read_results(path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        recs = list(csv.DictReader(fh))
    rows = []
    for r in recs:
        rows.append(ResultRow(
            int(r["point"]), r["attack"], r["mode"], int(r["h"]), float(r["epsilon"]),
            int(r["steps"]), _num(r["budget"], int), float(r["clean_loss"]), float(r["adv_loss"]),
            float(r["far"]), float(r["frr"]), float(r["tau_c"]), float(r["tau_v"]), r["error"]))
    return rows


def read_traces(path) -> dict[int, list[float]]:
    traces: dict[int, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            traces.setdefault(int(r["point"]), []).append(float(r["adv_loss"]))
    return traces


# -- reporting ---------------------------------------------------------------------------

def report(rows, out_dir, traces: dict[int, list[float]] | None = None) -> list[Path]:
    """Write the plot-data CSVs for a set of result rows; returns the files written.

    Traces default to those carried on the rows (as returned by :func:`run`).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if traces is None:
        traces = {r.point: r.trace for r in rows if r.trace}
    ok = [r for r in rows if not r.error]

    def by(*keys):
        return sorted(ok, key=lambda r: tuple(-1 if getattr(r, k) is None else getattr(r, k) for k in keys))

    def fmt(v):
        return "" if v is None else (repr(v) if isinstance(v, float) else str(v))
    tables = {
        "loss_vs_eps.csv": (("attack", "mode", "h", "steps", "budget", "epsilon", "clean_loss", "adv_loss"),
                            by("attack", "h", "steps", "budget", "epsilon")),
        "far_vs_eps.csv": (("attack", "mode", "h", "steps", "budget", "epsilon", "far", "frr"),
                           by("attack", "h", "steps", "budget", "epsilon")),
        "loss_vs_budget.csv": (("attack", "h", "epsilon", "steps", "budget", "adv_loss"),
                               [r for r in by("attack", "h", "epsilon", "steps", "budget") if r.budget is not None]),
        "loss_vs_history.csv": (("attack", "mode", "epsilon", "steps", "budget", "h", "clean_loss", "adv_loss"),
                                by("attack", "epsilon", "steps", "budget", "h")),
    }
    written = []
    for name, (cols, selected) in tables.items():
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in selected:
                w.writerow([fmt(getattr(r, c)) for c in cols])
        written.append(out / name)
    with open(out / "loss_vs_iteration.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "attack", "epsilon", "steps", "iteration", "adv_loss"])
        for r in ok:
            for it, loss in enumerate(traces.get(r.point, [])):
                w.writerow([r.point, r.attack, repr(r.epsilon), r.steps, it, repr(float(loss))])
    written.append(out / "loss_vs_iteration.csv")
    return written
