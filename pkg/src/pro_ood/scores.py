"""Softmax- and logit-based OOD scores. Higher always means more in-distribution.

Each score accepts raw logits (``(C,)`` or ``(N, C)``) and returns a float
or array, or a taped :class:`~pro_ood.tensor.Tensor` and returns a taped
per-row Tensor so input gradients can flow through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import NumericError, ValidationError

KINDS = ("MSP", "MSP_T", "ENT", "GEN", "EBO")


def _check_logits(z: tn.Tensor) -> None:
    if z.ndim not in (1, 2):
        raise ValidationError(f"logits must be (C,) or (N, C), got {z.shape}", field="logits")
    if z.shape[-1] < 2:
        raise ValidationError("scores need at least two classes", field="logits")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("non-finite logits")


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ValidationError(f"temperature must be positive, got {T}", field="T")


def _scaled(z: tn.Tensor, T: float) -> tn.Tensor:
    return z if T == 1.0 else tn.mul(z, 1.0 / T)


def log_softmax(z: tn.Tensor, T: float = 1.0) -> tn.Tensor:
    zt = _scaled(z, T)
    lse = tn.logsumexp(zt, axis=-1)
    return tn.sub(zt, tn.reshape(lse, (*lse.shape, 1)))


def _wrap(fn):
    """Expose a Tensor -> Tensor score as plain-array in, plain-value out."""

    def public(logits, *args, **kwargs):
        taped = isinstance(logits, tn.Tensor)
        z = logits if taped else tn.Tensor(logits)
        _check_logits(z)
        out = fn(z, *args, **kwargs)
        if taped:
            return out
        return float(out.data) if out.ndim == 0 else np.array(out.data)

    public.__name__ = fn.__name__.lstrip("_")
    public.__doc__ = fn.__doc__
    return public


def _msp(z: tn.Tensor, T: float = 1.0) -> tn.Tensor:
    """Maximum softmax probability at temperature ``T``."""
    _check_temperature(T)
    zt = _scaled(z, T)
    return tn.exp(tn.sub(tn.max(zt, axis=-1), tn.logsumexp(zt, axis=-1)))


def _neg_entropy(z: tn.Tensor) -> tn.Tensor:
    """``sum_i p_i log p_i`` (negative Shannon entropy)."""
    logp = log_softmax(z)
    return tn.sum(tn.mul(tn.exp(logp), logp), axis=-1)


def _gen_score(z: tn.Tensor, gamma: float = 0.1, M: int | None = None) -> tn.Tensor:
    """Negated generalized entropy over the ``M`` largest probabilities."""
    C = z.shape[-1]
    M = C if M is None else int(M)
    if not gamma > 0:
        raise ValidationError(f"gamma must be positive, got {gamma}", field="gamma")
    if not 1 <= M <= C:
        raise ValidationError(f"M must lie in [1, {C}], got {M}", field="M")
    logp = log_softmax(z)
    top = np.argsort(-logp.data, axis=-1, kind="stable")[..., :M]
    return tn.neg(tn.sum(tn.gen_term(tn.take(logp, top, axis=-1), gamma), axis=-1))


def _ebo(z: tn.Tensor, T: float = 1.0) -> tn.Tensor:
    """Energy score ``T * logsumexp(z / T)``."""
    _check_temperature(T)
    return tn.mul(tn.logsumexp(_scaled(z, T), axis=-1), T)


msp = _wrap(_msp)
neg_entropy = _wrap(_neg_entropy)
gen_score = _wrap(_gen_score)
ebo = _wrap(_ebo)


@dataclass(frozen=True)
class ScoreFn:
    """A named score with its hyperparameters; callable on logits."""

    kind: str = "MSP"
    T: float = 1.0
    gamma: float = 0.1
    M: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown score kind {self.kind!r}; valid: {', '.join(KINDS)}", field="kind")
        _check_temperature(self.T)
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive", field="gamma")
        if self.M is not None and self.M < 1:
            raise ValidationError("M must be >= 1", field="M")

    def __call__(self, logits):
        if self.kind == "MSP":
            return msp(logits, 1.0)
        if self.kind == "MSP_T":
            return msp(logits, self.T)
        if self.kind == "ENT":
            return neg_entropy(logits)
        if self.kind == "GEN":
            return gen_score(logits, self.gamma, self.M)
        return ebo(logits, self.T)

    @property
    def probability_valued(self) -> bool:
        return self.kind in ("MSP", "MSP_T")

    def params(self) -> dict:
        """Hyperparameters that matter for this kind (others are None)."""
        return {
            "t": self.T if self.kind in ("MSP_T", "EBO") else None,
            "gamma": self.gamma if self.kind == "GEN" else None,
            "m": self.M if self.kind == "GEN" else None,
        }


def sign_convention_check(fn, C: int = 4, margins=None) -> bool:
    """Assert ``fn`` is nondecreasing in confidence on logits ``[m, 0, ..., 0]``.

    Raises ``AssertionError`` naming the first violating margin.
    """
    margins = np.linspace(0.0, 20.0, 2001) if margins is None else np.asarray(margins, dtype=np.float64)
    logits = np.zeros((len(margins), C))
    logits[:, 0] = margins
    values = np.asarray(fn(logits), dtype=np.float64)
    drops = np.flatnonzero(np.diff(values) < -1e-12)
    if drops.size:
        i = int(drops[0])
        raise AssertionError(f"score decreases between margins {margins[i]} and {margins[i + 1]}")
    return True
