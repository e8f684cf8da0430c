"""Diagnostics: score landscapes, perturbation score shifts, and the adversarial-loss bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import DomainError, ValidationError
from .model import Classifier, cross_entropy, forward, pgd_attack
from .pro import ProConfig, perturbation_path, pro_score
from .rng import philox
from .scores import ScoreFn, msp

_STREAM_LANDSCAPE = 10
HIST_BINS = 61


def _g17(v) -> str:
    return format(float(v), ".17g")


# -- landscape -----------------------------------------------------------------


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    z: np.ndarray  # z[i, j] = g(x + alphas[i] * d1 + betas[j] * d2)
    d1: np.ndarray
    d2: np.ndarray
    seed: int

    @property
    def center(self) -> float:
        c = len(self.alphas) // 2
        return float(self.z[c, c])

    def to_csv(self) -> str:
        lines = ["alpha\\beta," + ",".join(_g17(b) for b in self.betas)]
        for a, row in zip(self.alphas, self.z):
            lines.append(_g17(a) + "," + ",".join(_g17(v) for v in row))
        return "\n".join(lines) + "\n"


def symmetric_axis(half_range: float, n: int) -> np.ndarray:
    """``n`` evenly spaced points on ``[-half_range, half_range]`` with an exact 0 in the middle."""
    h = n // 2
    return np.arange(-h, h + 1, dtype=np.float64) * (half_range / h if h else 0.0)


def landscape(net: Classifier, score_fn, x, half_range: float, grid_n: int, seed: int) -> LandscapeGrid:
    """Scores on the plane spanned by two random directions through ``x``.

    Directions are i.i.d. standard normal, rescaled to unit L-inf norm so the
    axes are in the same units as a PRO step length.
    """
    if grid_n < 1 or grid_n % 2 == 0:
        raise ValidationError(f"grid_n must be odd so the grid has a centre, got {grid_n}", field="grid_n")
    if not half_range >= 0:
        raise ValidationError("half_range must be non-negative", field="half_range")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rng = philox(seed, _STREAM_LANDSCAPE)
    d1, d2 = rng.standard_normal((2, x.size))
    d1 /= np.max(np.abs(d1))
    d2 /= np.max(np.abs(d2))
    alphas = symmetric_axis(half_range, grid_n)
    betas = alphas.copy()
    pts = x[None, None, :] + alphas[:, None, None] * d1 + betas[None, :, None] * d2
    z = np.asarray(score_fn(net(pts.reshape(-1, x.size)))).reshape(grid_n, grid_n)
    return LandscapeGrid(alphas, betas, z, d1, d2, seed)


def render_landscape_svg(grid: LandscapeGrid, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pro-ood"
    fig, ax = plt.subplots(figsize=(4.5, 4))
    cs = ax.contourf(grid.betas, grid.alphas, grid.z, levels=20, cmap="viridis")
    fig.colorbar(cs, ax=ax)
    ax.plot([0.0], [0.0], "r*", markersize=10)
    ax.set_xlabel("beta")
    ax.set_ylabel("alpha")
    if title:
        ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- score shifts --------------------------------------------------------------


@dataclass
class ShiftHistogram:
    eps_list: list[float]
    names: list[str]
    shifts: dict  # (name, eps) -> raw shift values
    edges: dict  # eps -> bin edges
    counts: dict  # (name, eps) -> bin counts

    def to_csv(self, eps: float) -> str:
        cols = ["bin_lo", "bin_hi"] + [
            "count_ind" if i == 0 else f"count_ood_{n}" for i, n in enumerate(self.names)
        ]
        edges = self.edges[eps]
        lines = [",".join(cols)]
        for b in range(len(edges) - 1):
            cells = [f"{edges[b]:.6f}", f"{edges[b + 1]:.6f}"]
            cells += [str(int(self.counts[(n, eps)][b])) for n in self.names]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def mean(self, name: str, eps: float) -> float:
        return float(np.mean(self.shifts[(name, eps)]))


def one_step_shift(net: Classifier, score_fn, X, eps: float) -> np.ndarray:
    """``g(x - eps * sign(grad g)) - g(x)`` for each row."""
    s = perturbation_path(net, score_fn, np.asarray(X, dtype=np.float64), ProConfig(eps, 1)).scores
    return np.atleast_1d(s[1] - s[0])


def shift_histogram(net: Classifier, score_fn, sample_sets: dict, eps_list, bins: int = HIST_BINS) -> ShiftHistogram:
    """Raw one-step shifts and fixed-bin histograms per sample set and eps.

    The first entry of ``sample_sets`` is treated as IND. Probability-valued
    scores use bins on [-1, 1]; other scores span the observed range.
    """
    names = list(sample_sets)
    if not names:
        raise ValidationError("no sample sets given", field="sample_sets")
    prob = isinstance(score_fn, ScoreFn) and score_fn.probability_valued
    shifts, edges, counts = {}, {}, {}
    for eps in eps_list:
        eps = float(eps)
        for name in names:
            X = getattr(sample_sets[name], "X", sample_sets[name])
            shifts[(name, eps)] = one_step_shift(net, score_fn, X, eps)
        if prob:
            lo, hi = -1.0, 1.0
        else:
            allv = np.concatenate([shifts[(n, eps)] for n in names])
            lo, hi = float(allv.min()), float(allv.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
        edges[eps] = np.linspace(lo, hi, bins + 1)
        for name in names:
            counts[(name, eps)] = np.histogram(shifts[(name, eps)], bins=edges[eps])[0]
    return ShiftHistogram([float(e) for e in eps_list], names, shifts, edges, counts)


def render_histogram_svg(hist: ShiftHistogram, eps: float, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pro-ood"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    edges = hist.edges[eps]
    for name in hist.names:
        ax.stairs(hist.counts[(name, eps)], edges, label=name)
    ax.set_xlabel("score shift")
    ax.set_ylabel("count")
    ax.set_title(f"eps = {eps:g}")
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def score_distributions(net: Classifier, detector_pairs, sample_sets: dict) -> dict:
    """``{(base, pro): {set: (base_scores, pro_scores)}}`` for overlay plots."""
    out = {}
    for base, rectified in detector_pairs:
        per_set = {}
        for name, data in sample_sets.items():
            X = getattr(data, "X", data)
            per_set[name] = (base.scores(net, X), rectified.scores(net, X))
        out[(base.name, rectified.name)] = per_set
    return out


def score_distributions_csv(dists: dict) -> str:
    lines = ["base,pro,set,base_score,pro_score"]
    for (b, p), per_set in dists.items():
        for name, (bs, ps) in per_set.items():
            lines.extend(f"{b},{p},{name},{_g17(u)},{_g17(v)}" for u, v in zip(bs, ps))
    return "\n".join(lines) + "\n"


# -- bounds --------------------------------------------------------------------


def msp_bound(E_hat: float) -> float:
    """Lower bound ``exp(-E)`` on the expected worst-case MSP of IND data."""
    if not E_hat >= 0:
        raise ValidationError(f"adversarial loss must be >= 0, got {E_hat}", field="E_hat")
    return math.exp(-E_hat)


def entropy_h(p, C: int):
    """``p log p + (1-p) log(1-p) + p log(C-1) - log(C-1)``, with ``0 log 0 = 0``.

    The largest negative entropy compatible with a top probability ``p``
    when the rest is spread evenly over the other ``C - 1`` classes.
    """
    p = np.asarray(p, dtype=np.float64)
    lc = math.log(C - 1)
    out = xlogy(p, p) + xlogy(1.0 - p, 1.0 - p) + p * lc - lc
    return float(out) if out.ndim == 0 else out


def entropy_bound(E_hat: float, C: int) -> float:
    """Lower bound ``h(exp(-E))`` on the expected worst-case negative entropy."""
    if C < 2:
        raise ValidationError("need at least two classes", field="C")
    p = msp_bound(E_hat)
    if p < (1.0 / C) * (1.0 - 1e-12):
        raise DomainError(f"exp(-E_hat) = {p} is below 1/C = {1.0 / C}; h is not monotone there", field="E_hat")
    return entropy_h(max(p, 1.0 / C), C)


@dataclass
class Claim1Report:
    eps: float
    E_hat: float
    mean_min_msp: float
    bound: float
    holds: bool
    clean_ce: float
    mean_msp: float

    def as_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in self.__dict__.items()}


def claim1_check(
    net: Classifier, ind_test, eps: float, pgd_steps: int, step_size: float | None = None
) -> Claim1Report:
    """Compare the PRO-minimised IND MSP against ``exp(-E_hat)``.

    ``E_hat`` is the mean PGD-maximised cross-entropy inside the eps-ball. PGD
    can only under-estimate the true inner maximum, so ``E_hat`` is optimistic
    and the bound it yields is higher than the true one; both numbers are
    reported. The PRO minimisation takes ``pgd_steps`` steps of ``eps / pgd_steps``
    so it never leaves the same ball.
    """
    X = np.asarray(ind_test.X, dtype=np.float64)
    y = np.asarray(ind_test.y)
    if np.any(y < 0):
        raise ValidationError("claim1_check needs labelled IND data", field="ind_test")
    if pgd_steps < 1:
        raise ValidationError("pgd_steps must be >= 1", field="pgd_steps")
    step = 2.5 * eps / pgd_steps if step_size is None else step_size
    clean_logits = forward(net, X, record=False)[0]
    clean_ce = float(np.mean(cross_entropy(clean_logits, y).data))
    mean_msp = float(np.mean(msp(clean_logits.data)))
    X_adv = pgd_attack(net, X, y, eps, pgd_steps, step)
    E_hat = float(np.mean(cross_entropy(forward(net, X_adv, record=False)[0], y).data))
    cfg = ProConfig(eps / pgd_steps, pgd_steps) if eps > 0 else ProConfig(0.0, 0)
    g_star, _ = pro_score(net, ScoreFn("MSP"), X, cfg)
    mean_min = float(np.mean(g_star))
    bound = msp_bound(E_hat)
    return Claim1Report(eps, E_hat, mean_min, bound, mean_min >= bound, clean_ce, mean_msp)


# -- model scale ---------------------------------------------------------------


def model_scale_shift(class_counts, eps: float, seed: int, per_class_n: int = 30, epochs: int = 40, margin: float = 6.0):
    """IND one-step MSP shifts of blob classifiers with different class counts.

    Returns ``{C: shifts}``. Each model sees ``D = max(8, C - 1)`` features.
    """
    from .datasets import gen_blobs
    from .model import TrainConfig, train

    out = {}
    for C in class_counts:
        D = max(8, C - 1)
        train_set = gen_blobs(C, per_class_n, D, margin, seed, "train")
        test_set = gen_blobs(C, max(per_class_n // 2, 1), D, margin, seed + 1, "test")
        net, _ = train(train_set, TrainConfig(epochs=epochs, seed=seed, hidden=(64,)))
        out[C] = one_step_shift(net, ScoreFn("MSP"), test_set.X, eps)
    return out
