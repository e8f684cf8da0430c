"""Detector registry, evaluation reports and the validation sweep for PRO hyperparameters."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import OodSuite
from .errors import ValidationError
from .metrics import auroc, fpr_at_tpr
from .model import Classifier
from .pro import ProConfig, odin_preprocess_score, perturbation_path, pro_score
from .scores import ScoreFn

log = logging.getLogger(__name__)

BASE_KINDS = {"MSP": "MSP", "MSP-T": "MSP_T", "ENT": "ENT", "GEN": "GEN", "EBO": "EBO"}
PRO_KINDS = {"PRO-MSP": "MSP", "PRO-MSP-T": "MSP_T", "PRO-ENT": "ENT", "PRO-GEN": "GEN"}
DETECTOR_NAMES = ("MSP", "MSP-T", "ENT", "GEN", "EBO", "ODIN", "PRO-MSP", "PRO-MSP-T", "PRO-ENT", "PRO-GEN")

# ODIN's customary settings; used unless overridden
ODIN_DEFAULTS = {"eps": 0.0014, "t": 1000.0}

# Example settings per PRO variant: (eps, k) plus T for MSP-T and (gamma, M) for GEN
PRESETS = {
    "cifar10-like": {
        "PRO-MSP": {"eps": 0.0003, "k": 3},
        "PRO-MSP-T": {"eps": 0.001, "k": 5, "t": 1000.0},
        "PRO-ENT": {"eps": 0.001, "k": 1},
        "PRO-GEN": {"gamma": 0.1, "m": 10, "eps": 0.001, "k": 5},
    },
    "cifar100-like": {
        "PRO-MSP": {"eps": 0.001, "k": 5},
        "PRO-MSP-T": {"eps": 0.001, "k": 5, "t": 10.0},
        "PRO-ENT": {"eps": 0.0005, "k": 7},
        "PRO-GEN": {"gamma": 0.01, "m": 100, "eps": 0.0008, "k": 5},
    },
    "imagenet-like": {
        "PRO-MSP": {"eps": 0.0005, "k": 3},
        "PRO-MSP-T": {"eps": 1.0e-05, "k": 1, "t": 10.0},
        "PRO-ENT": {"eps": 5.0e-05, "k": 7},
        "PRO-GEN": {"gamma": 0.1, "m": 100, "eps": 0.0003, "k": 1},
    },
}


@dataclass(frozen=True)
class Detector:
    """A base score, optionally wrapped by PRO (``method='pro'``) or ODIN (``method='odin'``)."""

    name: str
    score: ScoreFn
    method: str = "plain"
    eps: float | None = None
    k: int | None = None
    clamp: tuple | None = None  # optional per-feature (lo, hi) box for perturbed inputs

    def scores(self, net: Classifier, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.method == "pro":
            g_star, _ = pro_score(net, self.score, X, ProConfig(self.eps, self.k, clamp=self.clamp))
            return np.atleast_1d(g_star)
        if self.method == "odin":
            return np.atleast_1d(odin_preprocess_score(net, self.score, X, self.eps, self.clamp))
        return np.atleast_1d(self.score(net(X)))

    def params(self) -> dict:
        return {"eps": self.eps, "k": self.k, **self.score.params()}


def _score_for(kind: str, p: dict, class_count: int) -> ScoreFn:
    m = p.get("m")
    if m is not None:
        m = min(int(m), class_count)
    elif kind == "GEN":
        m = class_count
    return ScoreFn(kind, T=float(p.get("t") or 1.0), gamma=float(p.get("gamma") or 0.1), M=m)


def default_params(name: str, preset: str = "cifar10-like") -> dict:
    """Hyperparameters a detector takes from a named preset.

    Plain MSP-T / GEN reuse the T / (gamma, M) of their PRO counterpart.
    """
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}", field="preset")
    table = PRESETS[preset]
    if name in table:
        return dict(table[name])
    if name == "ODIN":
        return dict(ODIN_DEFAULTS)
    if name in ("MSP-T", "GEN"):
        src = table["PRO-" + name]
        return {key: src[key] for key in ("t", "gamma", "m") if key in src}
    if name in BASE_KINDS:
        return {}
    raise ValidationError(f"unknown detector {name!r}; valid: {', '.join(DETECTOR_NAMES)}", field="detector")


def build_detector(name: str, params: dict, class_count: int, clamp=None) -> Detector:
    if name in PRO_KINDS:
        score = _score_for(PRO_KINDS[name], params, class_count)
        return Detector(name, score, "pro", float(params["eps"]), int(params["k"]), clamp)
    if name == "ODIN":
        score = ScoreFn("MSP_T", T=float(params.get("t", ODIN_DEFAULTS["t"])))
        return Detector(name, score, "odin", float(params.get("eps", ODIN_DEFAULTS["eps"])), None, clamp)
    if name in BASE_KINDS:
        return Detector(name, _score_for(BASE_KINDS[name], params, class_count))
    raise ValidationError(f"unknown detector {name!r}; valid: {', '.join(DETECTOR_NAMES)}", field="detector")


def build_detectors(
    names, class_count: int, preset: str = "cifar10-like", tuned=None, overrides=None, clamp=None
) -> list[Detector]:
    """Resolve parameters as preset < tuned (sweep output) < explicit overrides."""
    out = []
    for name in names:
        p = default_params(name, preset)
        p.update((tuned or {}).get(name, {}))
        p.update({key: v for key, v in (overrides or {}).items() if v is not None and _uses(name, key)})
        out.append(build_detector(name, p, class_count, clamp))
    return out


def _uses(name: str, key: str) -> bool:
    kind = PRO_KINDS.get(name) or BASE_KINDS.get(name)
    if key in ("eps", "k"):
        return name in PRO_KINDS or (name == "ODIN" and key == "eps")
    if key == "t":
        return kind in ("MSP_T", "EBO") or name == "ODIN"
    return kind == "GEN"


# -- reports -------------------------------------------------------------------


CSV_FIELDS = ("detector", "dataset", "group", "auroc", "fpr95", "eps", "k", "t", "gamma", "m", "n_ind", "n_ood")


@dataclass
class EvalRow:
    detector: str
    dataset: str
    group: str
    auroc: float
    fpr95: float
    n_ind: int
    n_ood: int
    params: dict = field(default_factory=dict)
    ind_scores: np.ndarray | None = field(default=None, repr=False)
    ood_scores: np.ndarray | None = field(default=None, repr=False)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def detectors(self) -> list[str]:
        return list(dict.fromkeys(r.detector for r in self.rows))

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r.dataset for r in self.rows))

    def row(self, detector: str, dataset: str) -> EvalRow:
        for r in self.rows:
            if r.detector == detector and r.dataset == dataset:
                return r
        raise KeyError((detector, dataset))

    def average(self, detector: str, group: str) -> tuple[float, float] | None:
        """Unweighted mean (auroc, fpr95) over the detector's datasets in ``group``."""
        rows = [r for r in self.rows if r.detector == detector and r.group == group]
        if not rows:
            return None
        return float(np.mean([r.auroc for r in rows])), float(np.mean([r.fpr95 for r in rows]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_FIELDS) + "\n")
        for r in self.rows:
            p = r.params
            vals = [r.detector, r.dataset, r.group, _fmt(r.auroc), _fmt(r.fpr95)]
            vals += [_fmt(p.get("eps")), _fmt(p.get("k")), _fmt(p.get("t")), _fmt(p.get("gamma")), _fmt(p.get("m"))]
            vals += [str(r.n_ind), str(r.n_ood)]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()

    def to_table(self) -> str:
        """FPR@95 / AUROC in percent, one line per detector, with near/far averages."""
        sets = self.datasets()
        groups = [g for g in ("near", "far") if any(r.group == g for r in self.rows)]
        head = ["detector"] + sets + [f"{g}-avg" for g in groups]
        lines = []
        for det in self.detectors():
            cells = [det]
            for ds in sets:
                try:
                    r = self.row(det, ds)
                    cells.append(f"{100 * r.fpr95:.2f}/{100 * r.auroc:.2f}")
                except KeyError:
                    cells.append("-")
            for g in groups:
                avg = self.average(det, g)
                cells.append("-" if avg is None else f"{100 * avg[1]:.2f}/{100 * avg[0]:.2f}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in [head, *lines]) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
        out = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
        return "FPR@95 / AUROC (%)\n" + "\n".join(out) + "\n"


def evaluate_detector(net: Classifier, detector, suite: OodSuite) -> list[EvalRow]:
    """Score IND once, then every OOD set once, and compute both metrics per set.

    ``detector`` is anything with a ``name`` and a ``scores(net, X)`` method.
    """
    ind = np.asarray(detector.scores(net, suite.ind_test.X), dtype=np.float64)
    params = detector.params() if hasattr(detector, "params") else {}
    rows = []
    for name, ds in suite.ood.items():
        ood = np.asarray(detector.scores(net, ds.X), dtype=np.float64)
        rows.append(
            EvalRow(
                detector.name,
                name,
                suite.groups[name],
                auroc(ind, ood),
                fpr_at_tpr(ind, ood),
                len(ind),
                len(ood),
                params,
                ind,
                ood,
            )
        )
    return rows


def evaluate(net: Classifier, detectors, suite: OodSuite, threads: int = 1) -> EvalReport:
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(lambda d: evaluate_detector(net, d, suite), detectors))
    else:
        chunks = [evaluate_detector(net, d, suite) for d in detectors]
    return EvalReport([row for chunk in chunks for row in chunk])


# -- hyperparameter sweep --------------------------------------------------------


DEFAULT_EPS = (5e-05, 0.0001, 0.0003, 0.0005, 0.001, 0.003, 0.005, 0.01)
DEFAULT_K = (1, 3, 5, 7)
DEFAULT_T = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_GAMMA = (0.01, 0.1)


@dataclass(frozen=True)
class SweepGrid:
    eps_list: tuple = DEFAULT_EPS
    k_list: tuple = DEFAULT_K
    t_list: tuple | None = None
    gamma_list: tuple | None = None
    m_list: tuple | None = None

    def __post_init__(self):
        if not self.eps_list or not self.k_list:
            raise ValidationError("sweep grid needs at least one eps and one k", field="eps_list")
        if any(int(k) < 1 for k in self.k_list):
            raise ValidationError("every k in a sweep grid must be >= 1", field="k_list")
        if any(not e > 0 for e in self.eps_list):
            raise ValidationError("every eps in a sweep grid must be > 0", field="eps_list")


@dataclass
class SweepResult:
    best: dict
    table: list[dict]

    def table_csv(self) -> str:
        keys = ("eps", "k", "t", "gamma", "m", "auroc", "fpr95")
        lines = [",".join(keys)]
        for row in self.table:
            lines.append(",".join(_fmt(row.get(key)) for key in keys))
        return "\n".join(lines) + "\n"


def _score_variants(base: ScoreFn, grid: SweepGrid, class_count: int) -> list[ScoreFn]:
    if base.kind in ("MSP_T", "EBO"):
        return [replace(base, T=float(t)) for t in (grid.t_list or DEFAULT_T)]
    if base.kind == "GEN":
        ms = grid.m_list or (base.M or class_count,)
        bad = [m for m in ms if not 1 <= int(m) <= class_count]
        if bad:
            raise ValidationError(f"M values {bad} outside [1, {class_count}]", field="m_list")
        return [replace(base, gamma=float(g), M=int(m)) for g in (grid.gamma_list or DEFAULT_GAMMA) for m in ms]
    return [base]


def _order_key(row):
    # higher AUROC first; ties go to cheaper inference (smaller K, then smaller eps)
    return (-row["auroc"], row["k"], row["eps"], row.get("t") or 0.0, row.get("gamma") or 0.0, row.get("m") or 0)


def sweep(net: Classifier, base_score, grid: SweepGrid, ind_val, ood_val, clamp=None) -> SweepResult:
    """Pick the (eps, K[, T, gamma, M]) maximising validation AUROC of the PRO score.

    Each (score, eps) runs a single trajectory of ``max(K)`` steps; smaller K
    values reuse its prefix.
    """
    base = base_score if isinstance(base_score, ScoreFn) else ScoreFn(base_score)
    X_ind = np.asarray(getattr(ind_val, "X", ind_val), dtype=np.float64)
    X_ood = np.asarray(getattr(ood_val, "X", ood_val), dtype=np.float64)
    if len(X_ind) == 0 or len(X_ood) == 0:
        raise ValidationError("sweep needs non-empty validation sets", field="ind_val")
    k_list = sorted({int(k) for k in grid.k_list})
    k_max = k_list[-1]
    table = []
    for fn in _score_variants(base, grid, net.class_count):
        for eps in sorted({float(e) for e in grid.eps_list}):
            cfg = ProConfig(eps, k_max, clamp=clamp)
            s_ind = perturbation_path(net, fn, X_ind, cfg).scores
            s_ood = perturbation_path(net, fn, X_ood, cfg).scores
            for k in k_list:
                gi, go = s_ind[: k + 1].min(axis=0), s_ood[: k + 1].min(axis=0)
                table.append({"eps": eps, "k": k, **fn.params(), "auroc": auroc(gi, go), "fpr95": fpr_at_tpr(gi, go)})
    best = min(table, key=_order_key)
    log.info("sweep %s best %s", base.kind, best)
    return SweepResult(best, table)


def tune_base(net: Classifier, base_score, grid: SweepGrid, ind_val, ood_val) -> dict:
    """Choose T or (gamma, M) for an unperturbed score by validation AUROC."""
    base = base_score if isinstance(base_score, ScoreFn) else ScoreFn(base_score)
    X_ind = np.asarray(getattr(ind_val, "X", ind_val), dtype=np.float64)
    X_ood = np.asarray(getattr(ood_val, "X", ood_val), dtype=np.float64)
    best = None
    for fn in _score_variants(base, grid, net.class_count):
        a = auroc(fn(net(X_ind)), fn(net(X_ood)))
        if best is None or a > best[0]:
            best = (a, fn)
    return {key: v for key, v in best[1].params().items() if v is not None}
