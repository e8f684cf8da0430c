"""Perturbation-rectified scoring.

The rectified score of ``x`` is the smallest base score seen along a short
signed-gradient descent path that starts at ``x``::

    x_0 = x
    x_{t+1} = x_t - eps * sign(grad_x g(x_t))        t = 0 .. K-1
    g*(x) = min(g(x_0), ..., g(x_K))

Every function here accepts one sample ``(D,)`` or a batch ``(N, D)``; rows
are processed independently. ``sign(0) = 0``, so flat coordinates never move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import NumericError, ValidationError
from .model import Classifier, forward

MAX_STEPS = 64


@dataclass(frozen=True)
class ProConfig:
    eps: float
    k: int
    direction: str = "minimize"
    clamp: tuple | None = None

    def __post_init__(self):
        # eps = 0 and k = 0 are accepted as the degenerate "no perturbation" cases
        if not (self.eps >= 0 and np.isfinite(self.eps)):
            raise ValidationError(f"eps must be a finite value >= 0, got {self.eps}", field="eps")
        if not 0 <= self.k <= MAX_STEPS:
            raise ValidationError(f"k must lie in [0, {MAX_STEPS}], got {self.k}", field="k")
        if self.direction not in ("minimize", "maximize"):
            raise ValidationError(f"direction must be minimize or maximize, got {self.direction!r}", field="direction")
        if self.clamp is not None:
            lo, hi = (np.asarray(v, dtype=np.float64) for v in self.clamp)
            if np.any(lo > hi):
                raise ValidationError("clamp lower bound exceeds upper bound", field="clamp")


@dataclass
class Trajectory:
    """Score record: ``scores[t]`` is the score after ``t`` steps (row-wise for batches)."""

    scores: np.ndarray
    inputs: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.scores)


def score_and_grad(net: Classifier, score_fn, x, need_grad: bool = True):
    """Score of ``x`` and, optionally, its gradient with respect to ``x``."""
    logits, tape = forward(net, x, record=need_grad)
    s = score_fn(logits)
    if not need_grad:
        return np.array(s.data), None
    tn.sum(s)
    return np.array(s.data), tn.grad_input(tape)


def _project(x, clamp):
    if clamp is None:
        return x
    return np.clip(x, clamp[0], clamp[1])


def perturbation_path(net: Classifier, score_fn, x, cfg: ProConfig, keep_inputs: bool = False) -> Trajectory:
    """Run ``cfg.k`` signed-gradient steps and record ``k + 1`` scores."""
    sign = -1.0 if cfg.direction == "minimize" else 1.0
    cur = np.asarray(x, dtype=np.float64)
    scores, inputs = [], [cur] if keep_inputs else None
    for t in range(cfg.k + 1):
        try:
            s, g = score_and_grad(net, score_fn, cur, need_grad=t < cfg.k)
        except NumericError as exc:
            raise NumericError(f"non-finite score at step {t}: {exc}") from exc
        if not np.all(np.isfinite(s)):
            raise NumericError(f"non-finite score at step {t}")
        scores.append(s)
        if t == cfg.k:
            break
        cur = _project(cur + sign * cfg.eps * np.sign(g), cfg.clamp)
        if keep_inputs:
            inputs.append(cur)
    return Trajectory(np.array(scores), inputs)


def pro_score(net: Classifier, score_fn, x, cfg: ProConfig, keep_inputs: bool = False):
    """Rectified score ``g*`` and the trajectory it was taken from."""
    if cfg.direction != "minimize":
        raise ValidationError("pro_score requires direction='minimize'", field="direction")
    traj = perturbation_path(net, score_fn, x, cfg, keep_inputs)
    g_star = traj.scores.min(axis=0)
    return (float(g_star) if np.ndim(g_star) == 0 else g_star), traj


def odin_preprocess_score(net: Classifier, score_fn, x, eps: float, clamp=None):
    """Score after one ascent step ``x + eps * sign(grad g)``; no min-tracking."""
    traj = perturbation_path(net, score_fn, x, ProConfig(eps, 1, "maximize", clamp))
    out = traj.scores[-1]
    return float(out) if np.ndim(out) == 0 else out


def delta_z(net: Classifier, score_fn, x, eps: float, steps: int = 1):
    """``|g(x) - g(x')|`` where ``x'`` is ``steps`` signed descent steps away.

    A lower bound on the largest score change inside the eps-ball (the exact
    maximum is a nonconvex problem and is not attempted).
    """
    traj = perturbation_path(net, score_fn, x, ProConfig(eps, steps))
    out = np.abs(traj.scores[0] - traj.scores[-1])
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class RobustnessGap:
    mean_dz_ind: float
    mean_dz_ood: float
    gap: float
    dz_ind: np.ndarray
    dz_ood: np.ndarray


def _rows(data, name):
    X = np.asarray(getattr(data, "X", data), dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError(f"{name} sample set is empty", field=name)
    return X


def robustness_gap(net: Classifier, score_fn, ind_set, ood_set, eps: float) -> RobustnessGap:
    """Mean one-step score change on OOD minus that on IND."""
    dz_ind = np.atleast_1d(delta_z(net, score_fn, _rows(ind_set, "ind"), eps))
    dz_ood = np.atleast_1d(delta_z(net, score_fn, _rows(ood_set, "ood"), eps))
    m_ind, m_ood = float(np.mean(dz_ind)), float(np.mean(dz_ood))
    return RobustnessGap(m_ind, m_ood, m_ood - m_ind, dz_ind, dz_ood)
