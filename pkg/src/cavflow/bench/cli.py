"""Command-line entry point: ``cavflow <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 internal failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from .. import attacks as atk
from ..cavdetect import CavDetector, calibrate, far_frr, write_verdict_log
from ..errors import EmptyDataset, FormatError, SeriesTooShort, ShapeMismatch, StreamTooShort
from ..flowgrid import transform
from ..gradnet import TrainConfig, load_model, save_model, train
from ..synthflow import export_stats_csv, generate, load, save, slice_windows, window_counts
from .experiment import SpecError, generator_config, parse_spec, read_results, read_traces, report, run
from .metrics import eval_adversarial, eval_clean

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (FormatError, FileNotFoundError, IsADirectoryError, ShapeMismatch, SeriesTooShort,
               EmptyDataset, StreamTooShort)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cavflow", description="Crowd-flow attack and detection toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a synthetic crowd-flow series")
    g.add_argument("--config", required=True, help="config file with a [generator] section")
    g.add_argument("--out", required=True, help="FLOWBIN output path")
    g.add_argument("--stats", help="optional per-step statistics CSV")

    t = sub.add_parser("train", help="train the reference MLP predictor")
    t.add_argument("--data", required=True)
    t.add_argument("--history", type=int, required=True)
    t.add_argument("--layers", type=_int_list, default=TrainConfig().hidden, help="hidden widths, e.g. 512,512,512")
    t.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    t.add_argument("--lr", type=float, default=TrainConfig().learning_rate)
    t.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    a = sub.add_parser("attack", help="compute a perturbation against the test split")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--attack", required=True, choices=("fgsm", "ifgsm", "pgd", "cvpr")
                   + tuple(f"{k}-{b}" for k in ("aware", "adaptive") for b in atk.BASES))
    a.add_argument("--eps", type=float, required=True)
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--alpha", type=float)
    a.add_argument("--lam", type=float, default=1e10)
    a.add_argument("--mode", choices=(atk.DIGITAL, atk.PHYSICAL), default=atk.DIGITAL)
    a.add_argument("--budget", type=int)
    a.add_argument("--query-limit", type=int, default=20)
    a.add_argument("--stream", type=int, default=0, help="test windows to attack (0 = all)")
    a.add_argument("--out", required=True)

    d = sub.add_parser("detect", help="stream the test split through the detector")
    d.add_argument("--data", required=True)
    d.add_argument("--pert", help="perturbation file written by 'attack'")
    d.add_argument("--history", type=int, required=True)
    d.add_argument("--frr", type=float, help="calibrate thresholds on the train split to this FRR")
    d.add_argument("--strict", action="store_true")
    d.add_argument("--stream", type=int, default=0)
    d.add_argument("--log", required=True)

    r = sub.add_parser("run", help="run an experiment sweep")
    r.add_argument("--spec", required=True)

    rp = sub.add_parser("report", help="write plot-data CSVs from a results file")
    rp.add_argument("--rows", required=True)
    rp.add_argument("--out", required=True)
    return p


def _test_stream(series, h: int, limit: int, fraction: float = 0.8):
    windows = slice_windows(series, h)
    train_set, test_set = windows.split(fraction)
    n = len(test_set) if limit == 0 else min(limit, len(test_set))
    counts = window_counts(series, h)[len(train_set):len(train_set) + n]
    return train_set, test_set[:n], counts


def cmd_generate(args) -> int:
    cp = configparser.ConfigParser()
    if not cp.read(args.config, encoding="utf-8"):
        raise FileNotFoundError(f"config file {args.config} not found")
    if not cp.has_section("generator"):
        raise UsageError(f"{args.config}: missing [generator] section")
    series = generate(generator_config(cp["generator"]))
    save(series, args.out)
    if args.stats:
        export_stats_csv(series, args.stats)
    print(f"wrote {len(series)} steps on a {series.shape.l1}x{series.shape.l2} grid to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    series = load(args.data)
    windows = slice_windows(series, args.history)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      seed=args.seed, hidden=args.layers)
    history: list[float] = []
    model, test_loss = train(windows, cfg, history)
    save_model(model, args.out)
    for epoch, loss in enumerate(history, 1):
        print(f"epoch {epoch}: train loss {loss:.6g}")
    print(f"test loss {test_loss:.6g}; model written to {args.out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.mode == atk.PHYSICAL and args.budget is None:
        raise UsageError("--mode physical requires --budget")
    model = load_model(args.model)
    series = load(args.data)
    _, stream, counts = _test_stream(series, model.h, args.stream)
    if model.shape != stream.shape:
        raise ShapeMismatch(f"model grid {model.shape} does not match data grid {stream.shape}")
    budget = atk.PhysicalBudget(args.budget, args.query_limit) if args.mode == atk.PHYSICAL else None
    steps = min(args.steps, args.query_limit) if budget else args.steps
    cfg = atk.AttackConfig(epsilon=args.eps, steps=steps, alpha=args.alpha, lam=args.lam, mode=args.mode)
    name = args.attack
    if name == "cvpr" or name.startswith("adaptive-"):
        if name == "cvpr":
            pert = atk.cvpr(model, stream, cfg, budget=budget)
        else:
            pert = atk.adaptive_universal(name.split("-", 1)[1], model, stream, cfg)
        if budget:
            devices = atk.device_perturbation(pert.stacked, budget) / 1000.0
            pert = atk.UniversalPerturbation(devices[0], stream.shape, delta_out=devices[1],
                                             epsilon=cfg.epsilon, mode=cfg.mode, steps=steps)
        atk.save_perturbation(pert, args.out)
        adv = _apply_universal(pert, stream, counts)
    else:
        if name.startswith("aware-"):
            pset = atk.aware_variant(name.split("-", 1)[1], model, stream.inputs, cfg)
        else:
            pset = {"fgsm": atk.fgsm, "ifgsm": atk.ifgsm, "pgd": atk.pgd}[name](model, stream.inputs, cfg)
        if budget:
            devices, _ = atk.physical_project_windows(pset.deltas, counts, budget)
            pset = atk.PerturbationSet(devices / 1000.0, cfg.epsilon, cfg.mode)
        atk.save_perturbation_set(pset, args.out)
        adv = _apply_set(pset, stream, counts)
    target = cfg.target_for(stream.shape)
    print(f"windows {len(stream)}: clean loss {eval_clean(model, stream):.6g}, "
          f"loss to target {eval_adversarial(model, stream.inputs, target):.6g} -> "
          f"{eval_adversarial(model, adv, target):.6g}")
    print(f"perturbation written to {args.out}")
    return EXIT_OK


def _apply_universal(pert, stream, counts):
    if pert.mode == atk.PHYSICAL:
        return transform(counts + np.rint(pert.stacked * 1000.0).astype(np.int64))
    return pert.apply(stream.inputs)


def _apply_set(pset, stream, counts):
    if pset.deltas.shape != stream.inputs.shape:
        raise ShapeMismatch(f"perturbation {pset.deltas.shape} does not match stream {stream.inputs.shape}")
    if pset.mode == atk.PHYSICAL:
        return transform(counts + np.rint(pset.deltas * 1000.0).astype(np.int64))
    return pset.apply(stream.inputs)


def load_any_perturbation(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == atk.FLOWPERT_MAGIC:
        return atk.load_perturbation(path)
    return atk.load_perturbation_set(path)


def cmd_detect(args) -> int:
    series = load(args.data)
    train_set, stream, counts = _test_stream(series, args.history, args.stream)
    tau = (0.0, 0.0)
    if args.frr is not None:
        tau = calibrate(list(train_set), stream.shape, args.history, args.frr, args.strict)
    inputs = stream.inputs
    if args.pert:
        pert = load_any_perturbation(args.pert)
        if isinstance(pert, atk.UniversalPerturbation):
            if pert.shape != stream.shape:
                raise ShapeMismatch(f"perturbation grid {pert.shape} does not match data grid {stream.shape}")
            inputs = _apply_universal(pert, stream, counts)
        else:
            inputs = _apply_set(pert, stream, counts)
    det = CavDetector(stream.shape, args.history, *tau, strict=args.strict)
    verdicts = det.observe_stream(stream.with_inputs(inputs))
    write_verdict_log(verdicts, args.log)
    scored = [v for v in verdicts if not v.warmup]
    flagged = sum(v.adversarial for v in scored)
    print(f"thresholds tau_c={tau[0]!r} tau_v={tau[1]!r}")
    if args.pert:
        far, _ = far_frr((v, True) for v in verdicts)
        print(f"{len(scored)} perturbed windows, {flagged} flagged, FAR {far:.4f}")
    else:
        _, frr = far_frr((v, False) for v in verdicts)
        print(f"{len(scored)} clean windows, {flagged} flagged, FRR {frr:.4f}")
    print(f"verdict log written to {args.log}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = parse_spec(args.spec)
    rows = run(spec)
    failed = [r for r in rows if r.error]
    for r in rows:
        status = f"error: {r.error}" if r.error else (
            f"L={r.clean_loss:.6g} L*={r.adv_loss:.6g} FAR={r.far:.4f} FRR={r.frr:.4f}")
        print(f"point {r.point} (h={r.h}, eps={r.epsilon}, N={r.steps}, b_d={r.budget}): {status}")
    print(f"results written to {Path(spec.out_dir) / 'results.csv'}")
    return EXIT_INTERNAL if failed and len(failed) == len(rows) else EXIT_OK


def cmd_report(args) -> int:
    rows = read_results(args.rows)
    if not rows:
        raise EmptyDataset(f"{args.rows} has no result rows")
    traces_path = Path(args.rows).with_name("traces.csv")
    traces = read_traces(traces_path) if traces_path.exists() else {}
    for path in report(rows, args.out, traces):
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "attack": cmd_attack,
            "detect": cmd_detect, "run": cmd_run, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SpecError, ValueError, configparser.Error) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
