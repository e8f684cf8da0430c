"""Feed-forward classifiers: definition, weight files, SGD and PGD adversarial training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as tn
from .errors import (
    DataIOError,
    DimensionError,
    DivergenceError,
    NumericError,
    ParseError,
    SchemaError,
    ValidationError,
)
from .rng import philox

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Dense:
    W: np.ndarray  # (out, in), row-major
    b: np.ndarray  # (out,)

    def __post_init__(self):
        for name in ("W", "b"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"dense layer has W {self.W.shape} and b {self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise SchemaError(f"unknown activation {self.kind!r}", field="type")


Layer = Union[Dense, Activation]


@dataclass(frozen=True)
class Classifier:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dense = [layer for layer in self.layers if isinstance(layer, Dense)]
        if not dense:
            raise SchemaError("classifier needs at least one dense layer", field="layers")
        if not isinstance(self.layers[-1], Dense):
            raise SchemaError("the last layer must be dense", field="layers")
        for prev, nxt in zip(dense, dense[1:]):
            if prev.out_dim != nxt.in_dim:
                raise SchemaError(
                    f"dense layers do not compose: out={prev.out_dim} feeds in={nxt.in_dim}",
                    field="layers",
                )

    @property
    def input_dim(self) -> int:
        return next(layer for layer in self.layers if isinstance(layer, Dense)).in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dense_layers(self) -> list[Dense]:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    def with_dense(self, dense: list[Dense]) -> Classifier:
        it = iter(dense)
        return Classifier(tuple(next(it) if isinstance(layer, Dense) else layer for layer in self.layers))

    def __call__(self, x) -> np.ndarray:
        """Logits without recording a tape."""
        return forward(self, x, record=False)[0].data


def init_mlp(dims, activation: str = "relu", seed: int = 0) -> Classifier:
    """Random MLP with layer widths ``dims = [D, h1, ..., C]`` and zero biases."""
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ValidationError(f"invalid layer widths {dims}", field="dims")
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}", field="activation")
    rng = philox(seed, 0)
    layers: list[Layer] = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        if activation == "relu":
            bound = np.sqrt(6.0 / n_in)
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Dense(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)))
        if i < len(dims) - 2:
            layers.append(Activation(activation))
    return Classifier(tuple(layers))


def forward(net: Classifier, x, record: bool = True, params: bool = False):
    """Run ``net`` on ``x`` (``(D,)`` or ``(N, D)``).

    Returns ``(logits, tape)``. With ``record=False`` nothing is taped and
    ``tape`` is None. ``params=True`` additionally records every weight as a
    tape leaf so :func:`tensor.grad_params` can reach it.
    """
    data = x.data if isinstance(x, tn.Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim not in (1, 2) or data.shape[-1] != net.input_dim:
        raise DimensionError(f"input of shape {data.shape} does not match input_dim {net.input_dim}")
    if not np.all(np.isfinite(data)):
        raise NumericError("input contains non-finite values")
    tape = tn.Tape() if record else None
    h = tape.watch_input(data) if record else tn.Tensor(data)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            if record and params:
                w, b = tape.leaf(layer.W), tape.leaf(layer.b)
                tape.params.append((i, w, b))
            else:
                w, b = layer.W, layer.b
            h = tn.add(tn.matmul(h, w), b)
        elif layer.kind == "relu":
            h = tn.relu(h)
        else:
            h = tn.tanh(h)
    return h, tape


def cross_entropy(logits: tn.Tensor, y) -> tn.Tensor:
    """Per-sample cross-entropy against integer labels."""
    y = np.asarray(y, dtype=np.intp)
    picked = tn.take(logits, y[..., None], axis=-1)
    return tn.sub(tn.logsumexp(logits, axis=-1), tn.sum(picked, axis=-1))


def predict(net: Classifier, X) -> np.ndarray:
    return np.argmax(net(X), axis=-1)


def accuracy(net: Classifier, X, y) -> float:
    return float(np.mean(predict(net, X) == np.asarray(y)))


# -- adversarial inner maximisation --------------------------------------------


def pgd_attack(net: Classifier, x, y, eps_adv: float, steps: int, step_size: float) -> np.ndarray:
    """L-inf PGD ascent on cross-entropy, started at the clean point.

    Each sample returns its best iterate, so the clean point is always a
    candidate and the attack never lowers the loss.
    """
    if eps_adv < 0:
        raise ValidationError("eps_adv must be non-negative", field="eps_adv")
    if steps < 0:
        raise ValidationError("steps must be non-negative", field="pgd_steps")
    x0 = np.asarray(x, dtype=np.float64)
    if eps_adv == 0 or steps == 0:
        return x0.copy()
    lo, hi = x0 - eps_adv, x0 + eps_adv
    cur = x0
    best, best_loss = x0, None
    for t in range(steps + 1):
        logits, tape = forward(net, cur)
        ce = cross_entropy(logits, y)
        loss = ce.data
        if best_loss is None:
            best_loss = loss
        else:
            better = loss > best_loss
            best = np.where(better[..., None] if cur.ndim == 2 else better, cur, best)
            best_loss = np.where(better, loss, best_loss)
        if t == steps:
            break
        tn.sum(ce)
        g = tn.grad_input(tape)
        cur = np.clip(cur + step_size * np.sign(g), lo, hi)
    return np.array(best)


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    mode: str = "standard"
    eps_adv: float = 0.1
    pgd_steps: int = 5
    pgd_step_size: float | None = None  # default 2.5 * eps_adv / pgd_steps
    hidden: tuple[int, ...] = field(default=(32, 32))
    activation: str = "relu"

    def __post_init__(self):
        if self.mode not in ("standard", "adversarial"):
            raise ValidationError(f"mode must be standard or adversarial, got {self.mode!r}", field="mode")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0", field="epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", field="batch_size")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0", field="learning_rate")
        if self.mode == "adversarial":
            if not self.eps_adv > 0:
                raise ValidationError("eps_adv must be > 0 in adversarial mode", field="eps_adv")
            if self.pgd_steps < 1:
                raise ValidationError("pgd_steps must be >= 1 in adversarial mode", field="pgd_steps")

    @property
    def step_size(self) -> float:
        if self.pgd_step_size is not None:
            return self.pgd_step_size
        return 2.5 * self.eps_adv / self.pgd_steps


def _mean_loss(net, X, y, cfg: TrainConfig) -> float:
    if cfg.mode == "adversarial":
        X = pgd_attack(net, X, y, cfg.eps_adv, cfg.pgd_steps, cfg.step_size)
    return float(np.mean(cross_entropy(forward(net, X, record=False)[0], y).data))


def train(data, cfg: TrainConfig, net: Classifier | None = None) -> tuple[Classifier, float]:
    """Mini-batch SGD on mean cross-entropy.

    In adversarial mode every batch is first replaced by its PGD maximiser and
    the returned loss is the mean adversarial loss seen over the final epoch.
    With zero epochs the loss of the initial network on the full data is
    reported instead.
    """
    X = np.asarray(data.X, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.intp)
    if len(X) == 0:
        raise ValidationError("training data is empty", field="data")
    C = data.class_count
    if np.any((y < 0) | (y >= C)):
        raise ValidationError(f"labels must lie in [0, {C})", field="labels")
    if net is None:
        net = init_mlp([X.shape[1], *cfg.hidden, C], cfg.activation, cfg.seed)
    if cfg.epochs == 0:
        return net, _mean_loss(net, X, y, cfg)

    dense = net.dense_layers
    Ws = [np.array(d.W) for d in dense]
    bs = [np.array(d.b) for d in dense]
    n = len(X)
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = philox(cfg.seed, epoch + 1).permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = X[idx], y[idx]
                if cfg.mode == "adversarial":
                    xb = pgd_attack(net, xb, yb, cfg.eps_adv, cfg.pgd_steps, cfg.step_size)
                logits, tape = forward(net, xb, params=True)
                ce = cross_entropy(logits, yb)
                total += float(np.sum(ce.data))
                tn.mul(tn.sum(ce), 1.0 / len(idx))
                for (gw, gb), W, b in zip(tn.grad_params(tape), Ws, bs):
                    W -= cfg.learning_rate * gw
                    b -= cfg.learning_rate * gb
                net = net.with_dense([Dense(W, b) for W, b in zip(Ws, bs)])
        except NumericError as exc:
            raise DivergenceError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch=epoch)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return net, epoch_loss


# -- weight files --------------------------------------------------------------


def _layer_doc(layer: Layer) -> dict:
    if isinstance(layer, Activation):
        return {"type": layer.kind}
    return {
        "type": "dense",
        "in": layer.in_dim,
        "out": layer.out_dim,
        "W": [float(v) for v in layer.W.reshape(-1)],
        "b": [float(v) for v in layer.b],
    }


def dumps_weights(net: Classifier) -> str:
    header = json.dumps({"format_version": FORMAT_VERSION, "input_dim": net.input_dim, "class_count": net.class_count})
    body = ",\n".join("  " + json.dumps(_layer_doc(layer), allow_nan=False) for layer in net.layers)
    return header[:-1] + ', "layers": [\n' + body + "\n]}\n"


def save_weights(net: Classifier, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(dumps_weights(net).encode("utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot write weights to {path}: {exc}") from exc


def _reject_constant(token):
    raise ValueError(f"non-finite literal {token}")


def loads_weights(raw: bytes) -> Classifier:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("weight file is not valid UTF-8", offset=exc.start) from exc
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed weight file: {exc.msg}", offset=len(text[: exc.pos].encode("utf-8"))) from exc
    except ValueError as exc:
        raise ParseError(f"malformed weight file: {exc}") from exc
    return _classifier_from_doc(doc)


def _require(doc, key, kind, where):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}", field=key)
    val = doc[key]
    ok = isinstance(val, kind) and not (kind is int and isinstance(val, bool))
    if not ok:
        raise SchemaError(f"{where}: field {key!r} has the wrong type", field=key)
    return val


def _classifier_from_doc(doc) -> Classifier:
    if _require(doc, "format_version", int, "header") != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {doc['format_version']}", field="format_version")
    input_dim = _require(doc, "input_dim", int, "header")
    class_count = _require(doc, "class_count", int, "header")
    raw_layers = _require(doc, "layers", list, "header")
    layers: list[Layer] = []
    for i, ld in enumerate(raw_layers):
        kind = _require(ld, "type", str, f"layer {i}")
        if kind in ACTIVATIONS:
            layers.append(Activation(kind))
            continue
        if kind != "dense":
            raise SchemaError(f"layer {i}: unknown type {kind!r}", field="type")
        n_in = _require(ld, "in", int, f"layer {i}")
        n_out = _require(ld, "out", int, f"layer {i}")
        W = _require(ld, "W", list, f"layer {i}")
        b = _require(ld, "b", list, f"layer {i}")
        if n_in < 1 or n_out < 1 or len(W) != n_in * n_out or len(b) != n_out:
            raise SchemaError(
                f"layer {i}: W has {len(W)} values and b has {len(b)} for in={n_in}, out={n_out}", field="W"
            )
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (*W, *b)):
            raise SchemaError(f"layer {i}: weights must be numbers", field="W")
        layers.append(Dense(np.array(W, dtype=np.float64).reshape(n_out, n_in), np.array(b, dtype=np.float64)))
    net = Classifier(tuple(layers))
    if net.input_dim != input_dim:
        raise SchemaError(f"header input_dim {input_dim} but first layer takes {net.input_dim}", field="input_dim")
    if net.class_count != class_count:
        raise SchemaError(f"header class_count {class_count} but last layer emits {net.class_count}", field="class_count")
    return net


def load_weights(path) -> Classifier:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read weights from {path}: {exc}") from exc
    return loads_weights(raw)
