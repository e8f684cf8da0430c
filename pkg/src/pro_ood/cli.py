"""Command-line interface.

Every command writes its outputs plus a ``manifest.json`` echoing the resolved
configuration into ``--out``. Failures print one JSON line on stderr and exit
with 2 (validation), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    claim1_check,
    landscape,
    model_scale_shift,
    render_histogram_svg,
    render_landscape_svg,
    shift_histogram,
)
from .datasets import load_dataset, make_desk_data
from .errors import DataIOError, ProOodError, SchemaError, ValidationError
from .evaluation import DETECTOR_NAMES, PRESETS, SweepGrid, build_detectors
from .model import TrainConfig, load_weights
from .pipeline import (
    PipelineOptions,
    dumps_json,
    eval_stage,
    load_suite,
    run_pipeline,
    save_desk_data,
    sweep_stage,
    train_stage,
    write_manifest,
    write_text,
)
from .scores import KINDS, ScoreFn

log = logging.getLogger("pro_ood")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on its own; route through our error path instead
    def error(self, message):
        raise ValidationError(message, field="argv")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("PRO_OOD_THREADS")
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ValidationError(f"PRO_OOD_THREADS must be an integer, got {env!r}", field="PRO_OOD_THREADS") from None
    if n < 1:
        raise ValidationError("PRO_OOD_THREADS must be >= 1", field="PRO_OOD_THREADS")
    return n


def _score_from_args(args) -> ScoreFn:
    return ScoreFn(args.score, T=args.temp, gamma=args.gamma, M=args.m_top)


def _check_detectors(names) -> list[str]:
    bad = [n for n in names if n not in DETECTOR_NAMES]
    if bad:
        raise ValidationError(
            f"unknown detector(s) {', '.join(bad)}; valid: {', '.join(DETECTOR_NAMES)}", field="detectors"
        )
    return list(names)


def _resolved(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    return json.loads(dumps_json(cfg))


def _read_json(path, field):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc.msg}", field=field) from exc


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    save_desk_data(make_desk_data(args.seed), out, csv=args.csv)
    write_manifest(out, "gen-data", _resolved(args))


def cmd_train(args) -> None:
    suite, sets = load_suite(args.data)
    if "ind_train" not in sets:
        raise ValidationError("suite has no ind_train set", field="data")
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        mode=args.mode,
        eps_adv=args.eps_adv,
        pgd_steps=args.pgd_steps,
        hidden=tuple(args.hidden),
        activation=args.activation,
    )
    out = Path(args.out)
    train_stage(sets["ind_train"], cfg, out, suite.ind_test)
    write_manifest(out, "train", _resolved(args))


def cmd_sweep(args) -> None:
    net = load_weights(args.weights)
    suite, _ = load_suite(args.data)
    if suite.ind_val is None or suite.ood_val is None:
        raise ValidationError("suite needs ind_val and ood_val for a sweep", field="data")
    names = _check_detectors(args.detectors)
    grid = SweepGrid(
        tuple(args.eps_list),
        tuple(args.k_list),
        tuple(args.t_list) if args.t_list else None,
        tuple(args.gamma_list) if args.gamma_list else None,
        tuple(args.m_list) if args.m_list else None,
    )
    out = Path(args.out)
    sweep_stage(net, names, grid, suite.ind_val, suite.ood_val, out, _clamp(args))
    write_manifest(out, "sweep", _resolved(args))


def cmd_eval(args) -> None:
    names = _check_detectors(args.detectors)
    net = load_weights(args.weights)
    suite, _ = load_suite(args.data)
    tuned = _read_json(args.best_config, "best_config") if args.best_config else None
    overrides = {"eps": args.eps, "k": args.k, "t": args.temp, "gamma": args.gamma, "m": args.m_top}
    detectors = build_detectors(names, net.class_count, args.preset, tuned, overrides, _clamp(args))
    out = Path(args.out)
    report = eval_stage(net, detectors, suite, out, _threads(args))
    write_manifest(out, "eval", _resolved(args))
    print(report.to_table(), end="")


def _clamp(args):
    if not args.clamp:
        return None
    lo, hi = args.clamp
    if not lo <= hi:
        raise ValidationError(f"--clamp needs lo <= hi, got {lo} > {hi}", field="clamp")
    return (lo, hi)


def _pick_sample(path, index: int) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".oodd":
        ds = load_dataset(path)
    else:
        ds = load_suite(path)[0].ind_test
    if not 0 <= index < len(ds):
        raise ValidationError(f"index {index} outside [0, {len(ds)})", field="index")
    return ds.X[index]


def cmd_landscape(args) -> None:
    net = load_weights(args.weights)
    x = _pick_sample(args.data, args.index)
    grid = landscape(net, _score_from_args(args), x, args.half_range, args.grid_n, args.seed)
    out = Path(args.out)
    write_text(out / "landscape.csv", grid.to_csv())
    if args.svg:
        render_landscape_svg(grid, out / "landscape.svg")
    write_manifest(out, "landscape", _resolved(args))


def cmd_shift(args) -> None:
    net = load_weights(args.weights)
    suite, _ = load_suite(args.data)
    sets = {"ind": suite.ind_test, **suite.ood}
    hist = shift_histogram(net, _score_from_args(args), sets, args.eps_list)
    out = Path(args.out)
    for eps in hist.eps_list:
        write_text(out / f"shift_eps{eps:g}.csv", hist.to_csv(eps))
        if args.svg:
            render_histogram_svg(hist, eps, out / f"shift_eps{eps:g}.svg")
    write_manifest(out, "shift", _resolved(args))


def cmd_bound_check(args) -> None:
    net = load_weights(args.weights)
    suite, _ = load_suite(args.data)
    rep = claim1_check(net, suite.ind_test, args.eps, args.pgd_steps, args.step_size)
    out = Path(args.out)
    write_text(out / "bound_check.json", dumps_json(rep.as_dict()))
    write_manifest(out, "bound-check", _resolved(args))
    print(json.dumps(rep.as_dict(), sort_keys=True))


def cmd_scale_shift(args) -> None:
    shifts = model_scale_shift(args.class_counts, args.eps, args.seed, args.per_class_n, args.epochs)
    lines = ["class_count,mean_shift,median_shift,min_shift,max_shift"]
    for C, s in shifts.items():
        lines.append(f"{C},{np.mean(s):.9g},{np.median(s):.9g},{np.min(s):.9g},{np.max(s):.9g}")
    out = Path(args.out)
    write_text(out / "scale_shift.csv", "\n".join(lines) + "\n")
    write_manifest(out, "scale-shift", _resolved(args))


def cmd_pipeline(args) -> None:
    opts = PipelineOptions(
        seed=args.seed,
        epochs=args.epochs,
        eps_adv=args.eps_adv,
        pgd_steps=args.pgd_steps,
        preset=args.preset,
        svg=args.svg,
        threads=_threads(args),
    )
    summary = run_pipeline(args.out, opts)
    print(summary["report"].to_table(), end="")
    log.info("pipeline finished in %.2fs", summary["elapsed_seconds"])


# -- parser --------------------------------------------------------------------


def _add_score_args(p) -> None:
    p.add_argument("--score", choices=KINDS, default="MSP")
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--m-top", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pro-ood", description="OOD detection scores with adversarial score rectification.")
    parser.add_argument("--version", action="version", version=f"pro-ood {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of flag values (keys are flag names with underscores)")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate the desk dataset suite")
    p.add_argument("--preset", choices=("desk",), default="desk")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--csv", action="store_true", help="also write CSV copies")

    p = add("train", cmd_train, "train an MLP on a suite's ind_train set")
    p.add_argument("--data", required=True, help="suite directory or suite.json")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--mode", choices=("standard", "adversarial"), default="adversarial")
    p.add_argument("--eps-adv", type=float, default=0.1)
    p.add_argument("--pgd-steps", type=int, default=5)
    p.add_argument("--hidden", type=int, nargs="+", default=[32, 32])
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")

    p = add("sweep", cmd_sweep, "tune detector hyperparameters on validation data")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--detectors", nargs="+", default=list(DETECTOR_NAMES))
    p.add_argument("--eps-list", type=float, nargs="+", default=list(SweepGrid().eps_list))
    p.add_argument("--k-list", type=int, nargs="+", default=list(SweepGrid().k_list))
    p.add_argument("--t-list", type=float, nargs="+", default=None)
    p.add_argument("--gamma-list", type=float, nargs="+", default=None)
    p.add_argument("--m-list", type=int, nargs="+", default=None)
    p.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"), default=None)

    p = add("eval", cmd_eval, "evaluate detectors on the test suite")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--detectors", nargs="+", default=list(DETECTOR_NAMES))
    p.add_argument("--preset", choices=tuple(PRESETS), default="cifar10-like")
    p.add_argument("--best-config", default=None, help="best_config.json written by sweep")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--m-top", type=int, default=None)
    p.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"), default=None,
                   help="box for perturbed inputs (PRO and ODIN); default unbounded")
    p.add_argument("--threads", type=int, default=None)

    p = add("landscape", cmd_landscape, "score landscape on two random directions")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True, help=".oodd file or suite (uses ind_test)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--half-range", type=float, default=0.5)
    p.add_argument("--grid-n", type=int, default=21)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--svg", action="store_true")
    _add_score_args(p)

    p = add("shift", cmd_shift, "one-step score shift histograms")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps-list", type=float, nargs="+", default=[0.001, 0.01])
    p.add_argument("--svg", action="store_true")
    _add_score_args(p)

    p = add("bound-check", cmd_bound_check, "compare PRO-minimised IND MSP with exp(-E_hat)")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--pgd-steps", type=int, default=5)
    p.add_argument("--step-size", type=float, default=None)

    p = add("scale-shift", cmd_scale_shift, "IND MSP shifts of blob models with different class counts")
    p.add_argument("--class-counts", type=int, nargs="+", default=[2, 10, 100])
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--per-class-n", type=int, default=30)
    p.add_argument("--epochs", type=int, default=40)

    p = add("pipeline", cmd_pipeline, "gen-data, train, sweep, eval and analyses in one go")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--eps-adv", type=float, default=0.1)
    p.add_argument("--pgd-steps", type=int, default=5)
    p.add_argument("--preset", choices=tuple(PRESETS), default="cifar10-like")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--threads", type=int, default=None)

    return parser


def _subparsers(parser) -> argparse._SubParsersAction:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))


def _subparser(parser, command):
    return _subparsers(parser).choices[command]


def _check_config_value(action, key, value):
    if action.nargs in ("+", "*"):
        if not isinstance(value, list) or not value:
            raise ValidationError(f"config field {key!r} must be a non-empty list", field=key)
        items = value
    else:
        items = [value]
    for v in items:
        if action.type is int and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ValidationError(f"config field {key!r} must be an integer, got {v!r}", field=key)
        if action.type is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ValidationError(f"config field {key!r} must be a number, got {v!r}", field=key)
        if isinstance(action, argparse._StoreTrueAction) and not isinstance(v, bool):
            raise ValidationError(f"config field {key!r} must be true or false", field=key)
        if action.choices is not None and v not in action.choices:
            raise ValidationError(
                f"config field {key!r} must be one of {', '.join(map(str, action.choices))}, got {v!r}", field=key
            )


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise ValidationError("--config needs a path", field="config")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv) -> None:
    """Install ``--config`` values as subcommand defaults so explicit flags still win."""
    path = _config_path(argv)
    if path is None:
        return
    commands = [tok for tok in argv if tok in _subparsers(parser).choices]
    if not commands:
        return
    doc = _read_json(path, "config")
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object", field="config")
    sp = _subparser(parser, commands[0])
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config", "func")}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ValidationError(f"unknown config field {key!r} for {commands[0]}", field=key)
        _check_config_value(actions[dest], key, value)
        actions[dest].required = False
    sp.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})


def _report(exc: ProOodError) -> str:
    doc = {"error": exc.kind, "message": str(exc)}
    for attr in ("field", "offset", "epoch"):
        if getattr(exc, attr, None) is not None:
            doc[attr] = getattr(exc, attr)
    return json.dumps(doc, sort_keys=True)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args)
    except ProOodError as exc:
        print(_report(exc), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_report(DataIOError(str(exc))), file=sys.stderr)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
