"""End-to-end desk run: data -> adversarial training -> sweep -> evaluation -> analyses.

Every artifact is a pure function of the seed and the options, so two runs
with the same arguments write byte-identical files.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import claim1_check, landscape, render_histogram_svg, render_landscape_svg, score_distributions, score_distributions_csv, shift_histogram
from .datasets import DESK_GROUPS, LabeledDataset, OodSuite, desk_suite, export_csv, load_dataset, make_desk_data, save_dataset
from .errors import DataIOError, SchemaError
from .evaluation import (
    DETECTOR_NAMES,
    PRO_KINDS,
    SweepGrid,
    build_detectors,
    evaluate,
    sweep,
    tune_base,
)
from .model import Classifier, TrainConfig, accuracy, save_weights, train
from .pro import robustness_gap
from .scores import ScoreFn

log = logging.getLogger(__name__)

SUITE_FILE = "suite.json"
BASE_OF = {"PRO-MSP": "MSP", "PRO-MSP-T": "MSP-T", "PRO-ENT": "ENT", "PRO-GEN": "GEN"}


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (tuple, set)):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not serialisable: {type(v).__name__}")


def write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(text.encode("utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def write_manifest(out: Path, command: str, config: dict) -> None:
    write_text(out / "manifest.json", dumps_json({"tool": "pro-ood", "version": __version__, "command": command, "config": config}))


# -- suite files ---------------------------------------------------------------


def save_desk_data(data: dict[str, LabeledDataset], out: Path, csv: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in data.items():
        save_dataset(ds, out / f"{name}.oodd")
        if csv:
            export_csv(ds, out / f"{name}.csv")
    doc = {
        "ind_train": "ind_train.oodd",
        "ind_val": "ind_val.oodd",
        "ind_test": "ind_test.oodd",
        "ood_val": "ood_val.oodd",
        "ood": [{"name": n, "group": g, "file": f"{n}.oodd"} for n, g in DESK_GROUPS.items()],
    }
    write_text(out / SUITE_FILE, dumps_json(doc))


def load_suite(path) -> tuple[OodSuite, dict[str, LabeledDataset]]:
    """Read ``suite.json`` (or a directory holding it) and every file it lists."""
    path = Path(path)
    index = path / SUITE_FILE if path.is_dir() else path
    try:
        doc = json.loads(index.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot read suite index {index}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"suite index {index} is not valid JSON: {exc.msg}", field="suite") from exc
    root = index.parent
    try:
        files = {key: doc[key] for key in ("ind_test",)}
        files.update({key: doc[key] for key in ("ind_train", "ind_val", "ood_val") if key in doc})
        entries = doc["ood"]
        groups = {e["name"]: e["group"] for e in entries}
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"suite index is missing field {exc}", field=str(exc).strip("'")) from exc
    sets = {key: load_dataset(root / f, split=key.split("_")[-1]) for key, f in files.items()}
    ood = {e["name"]: load_dataset(root / e["file"]) for e in entries}
    suite = OodSuite(sets["ind_test"], ood, groups, sets.get("ood_val"), sets.get("ind_val"))
    return suite, {**sets, **ood}


# -- stages --------------------------------------------------------------------


def train_stage(train_set: LabeledDataset, cfg: TrainConfig, out: Path, test_set=None) -> tuple[Classifier, dict]:
    t0 = time.perf_counter()
    net, loss = train(train_set, cfg)
    save_weights(net, out / "weights.json")
    info = {"final_train_loss": loss, "train_accuracy": accuracy(net, train_set.X, train_set.y)}
    if test_set is not None and test_set.labeled:
        info["test_accuracy"] = accuracy(net, test_set.X, test_set.y)
    log_lines = [f"{k} {v!r}" for k, v in sorted(info.items())]
    write_text(out / "train_log.txt", "\n".join(log_lines) + "\n")
    log.info("trained in %.2fs: %s", time.perf_counter() - t0, info)
    return net, info


def sweep_stage(net: Classifier, names, grid: SweepGrid, ind_val, ood_val, out: Path, clamp=None) -> dict:
    """Tune every PRO variant in ``names`` plus the plain scores' own T / (gamma, M)."""
    tuned: dict[str, dict] = {}
    for name in names:
        if name in PRO_KINDS:
            res = sweep(net, ScoreFn(PRO_KINDS[name]), grid, ind_val, ood_val, clamp)
            tuned[name] = {k: v for k, v in res.best.items() if k in ("eps", "k", "t", "gamma", "m") and v is not None}
            write_text(out / f"sweep_{name}.csv", res.table_csv())
        elif name in ("MSP-T", "GEN", "EBO"):
            kind = {"MSP-T": "MSP_T", "GEN": "GEN", "EBO": "EBO"}[name]
            tuned[name] = tune_base(net, ScoreFn(kind), grid, ind_val, ood_val)
    write_text(out / "best_config.json", dumps_json(tuned))
    return tuned


def eval_stage(net: Classifier, detectors, suite: OodSuite, out: Path, threads: int = 1):
    report = evaluate(net, detectors, suite, threads)
    write_text(out / "report.csv", report.to_csv())
    write_text(out / "report.txt", report.to_table())
    return report


@dataclass
class PipelineOptions:
    seed: int = 7
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    eps_adv: float = 0.1
    pgd_steps: int = 5
    hidden: tuple = (32, 32)
    detectors: tuple = DETECTOR_NAMES
    preset: str = "cifar10-like"
    eps_list: tuple = SweepGrid().eps_list
    k_list: tuple = SweepGrid().k_list
    shift_eps: tuple = (0.001, 0.01)
    landscape_half_range: float = 0.5
    landscape_grid_n: int = 21
    svg: bool = False
    threads: int = 1
    extra: dict = field(default_factory=dict)


def run_pipeline(out, opts: PipelineOptions | None = None) -> dict:
    """Run every stage into ``out`` and return the summary that is also written to ``summary.json``."""
    opts = opts or PipelineOptions()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    data = make_desk_data(opts.seed)
    save_desk_data(data, out / "data")
    suite = desk_suite(data)

    cfg = TrainConfig(
        epochs=opts.epochs,
        batch_size=opts.batch_size,
        learning_rate=opts.learning_rate,
        seed=opts.seed,
        mode="adversarial",
        eps_adv=opts.eps_adv,
        pgd_steps=opts.pgd_steps,
        hidden=tuple(opts.hidden),
    )
    net, train_info = train_stage(data["ind_train"], cfg, out / "model", data["ind_test"])

    grid = SweepGrid(tuple(opts.eps_list), tuple(opts.k_list))
    tuned = sweep_stage(net, opts.detectors, grid, data["ind_val"], data["ood_val"], out / "sweep")
    detectors = build_detectors(opts.detectors, net.class_count, opts.preset, tuned)
    report = eval_stage(net, detectors, suite, out / "eval", opts.threads)

    analysis_dir = out / "analysis"
    msp_fn = ScoreFn("MSP")
    tuned_eps = tuned.get("PRO-MSP", {}).get("eps", opts.shift_eps[0])
    gaps = {}
    for name, ds in suite.ood.items():
        g = robustness_gap(net, msp_fn, data["ind_test"], ds, tuned_eps)
        gaps[name] = {"mean_dz_ind": g.mean_dz_ind, "mean_dz_ood": g.mean_dz_ood, "gap": g.gap}

    eps_list = sorted({float(tuned_eps), *map(float, opts.shift_eps)})
    sets = {"ind": data["ind_test"], **suite.ood}
    hist = shift_histogram(net, msp_fn, sets, eps_list)
    for eps in eps_list:
        write_text(analysis_dir / f"shift_msp_eps{eps:g}.csv", hist.to_csv(eps))
        if opts.svg:
            render_histogram_svg(hist, eps, analysis_dir / f"shift_msp_eps{eps:g}.svg")
    positive_ood_shifts = {
        f"{n}@{eps:g}": int(np.count_nonzero(hist.shifts[(n, eps)] > 0)) for n in suite.ood for eps in eps_list
    }

    for label, X in (("ind", data["ind_test"].X[0]), ("near_shift", data["near_shift"].X[0]), ("far_ring", data["far_ring"].X[0])):
        grid_ = landscape(net, msp_fn, X, opts.landscape_half_range, opts.landscape_grid_n, opts.seed)
        write_text(analysis_dir / f"landscape_msp_{label}.csv", grid_.to_csv())
        if opts.svg:
            render_landscape_svg(grid_, analysis_dir / f"landscape_msp_{label}.svg", label)

    pairs = [(d, p) for p in detectors for d in detectors if p.name in BASE_OF and d.name == BASE_OF[p.name]]
    dists = score_distributions(net, pairs, sets)
    write_text(analysis_dir / "score_distributions.csv", score_distributions_csv(dists))

    claim = claim1_check(net, data["ind_test"], opts.eps_adv, opts.pgd_steps)
    claim0 = claim1_check(net, data["ind_test"], 0.0, 1)
    write_text(analysis_dir / "bound_check.json", dumps_json({"eps_adv": claim.as_dict(), "eps_zero": claim0.as_dict()}))

    summary = {
        "train": train_info,
        "tuned": tuned,
        "metrics": {f"{r.detector}/{r.dataset}": {"auroc": r.auroc, "fpr95": r.fpr95} for r in report.rows},
        "robustness_gap_msp": {"eps": tuned_eps, **gaps},
        "positive_ood_shifts": positive_ood_shifts,
        "claim1": claim.as_dict(),
        "claim1_eps0": claim0.as_dict(),
    }
    write_text(out / "summary.json", dumps_json(summary))
    write_manifest(out, "pipeline", asdict(opts))
    summary["elapsed_seconds"] = time.perf_counter() - t0
    summary["report"] = report
    return summary
