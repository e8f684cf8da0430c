"""Synthetic IND / near-OOD / far-OOD data and the ``OODD`` binary format.

Generated features are rounded to float32 (the on-disk precision) and then
held as float64, so a dataset is identical before and after a file round
trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, ParseError, SchemaError, ValidationError
from .rng import philox

MAGIC = b"OODD"
VERSION = 1
UNLABELED = 0xFFFFFFFF
_HEADER = struct.Struct("<4sIIII")

# stream ids so the different generators never share random draws
_STREAM_BLOBS, _STREAM_RING, _STREAM_CUBE = 1, 2, 3


@dataclass(frozen=True)
class LabeledDataset:
    """Features ``X`` (N x D) and labels ``y``; ``-1`` marks an unlabeled row."""

    X: np.ndarray
    y: np.ndarray
    class_count: int
    split: str = "test"

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if X.ndim != 2 or len(X) < 1:
            raise ValidationError("a dataset needs at least one row of features", field="X")
        if y.shape != (len(X),):
            raise ValidationError(f"{len(X)} rows but {y.shape} labels", field="y")
        if np.any((y < -1) | (y >= self.class_count)):
            raise ValidationError(f"labels must lie in [0, {self.class_count}) or be -1", field="y")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.y >= 0))


@dataclass
class OodSuite:
    ind_test: LabeledDataset
    ood: dict[str, LabeledDataset]
    groups: dict[str, str]  # name -> "near" | "far"
    ood_val: LabeledDataset | None = None
    ind_val: LabeledDataset | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        D = self.ind_test.dim
        for name, ds in self.ood.items():
            if ds.dim != D:
                raise ValidationError(f"OOD set {name!r} has dimension {ds.dim}, IND has {D}", field=name)
            if self.groups.get(name) not in ("near", "far"):
                raise ValidationError(f"OOD set {name!r} must be tagged near or far", field=name)


def _f32(X) -> np.ndarray:
    return np.asarray(X, dtype=np.float32).astype(np.float64)


def simplex_means(C: int, D: int, margin: float) -> np.ndarray:
    """Vertices of a regular simplex with pairwise distance ``margin``, centred at 0.

    Built from the Helmert basis of the sum-zero subspace and zero-padded to D.
    """
    if C < 2:
        raise ValidationError("need at least two classes", field="C")
    if D < C - 1:
        raise ValidationError(f"a {C}-class simplex needs D >= {C - 1}, got {D}", field="D")
    H = np.zeros((C - 1, C))
    for k in range(1, C):
        H[k - 1, :k] = 1.0
        H[k - 1, k] = -k
        H[k - 1] /= np.sqrt(k * (k + 1))
    coords = (np.eye(C) - 1.0 / C) @ H.T * (margin / np.sqrt(2.0))
    means = np.zeros((C, D))
    means[:, : C - 1] = coords
    return means


def _blob_samples(means, per_class_n, seed):
    C, D = means.shape
    rng = philox(seed, _STREAM_BLOBS)
    y = np.repeat(np.arange(C), per_class_n)
    X = means[y] + rng.standard_normal((len(y), D))
    return _f32(X), y


def gen_blobs(C: int, per_class_n: int, D: int, margin: float, seed: int, split: str = "train") -> LabeledDataset:
    """Unit-variance Gaussian blobs around :func:`simplex_means`."""
    if per_class_n < 1:
        raise ValidationError("per_class_n must be >= 1 (empty dataset)", field="per_class_n")
    if margin < 0:
        raise ValidationError("margin must be non-negative", field="margin")
    X, y = _blob_samples(simplex_means(C, D, margin), per_class_n, seed)
    return LabeledDataset(X, y, C, split)


def shift_direction(C: int, D: int) -> np.ndarray:
    """Unit vector inside the span of the class means, along which near-OOD blobs move."""
    v = np.zeros(D)
    v[: C - 1] = 1.0 / np.sqrt(C - 1)
    return v


def gen_shifted_blobs(n: int, shift: float, seed: int, C: int = 4, D: int = 8, margin: float = 6.0) -> LabeledDataset:
    """IND blobs with every class mean moved by ``shift`` along :func:`shift_direction`.

    ``n`` is split evenly over the classes (rounded down, at least one each).
    With ``shift=0`` this is the IND generator under another seed.
    """
    if n < 1:
        raise ValidationError("n must be >= 1", field="n")
    means = simplex_means(C, D, margin) + shift * shift_direction(C, D)
    X, _ = _blob_samples(means, max(n // C, 1), seed)
    return LabeledDataset(X, np.full(len(X), -1), C, "test")


def gen_ring(n: int, radius: float, width: float, seed: int, D: int = 8, C: int = 4) -> LabeledDataset:
    """Annulus in the plane of the last two coordinates; standard normal elsewhere.

    The radius is uniform on ``[radius - width/2, radius + width/2]``. When
    ``D >= C + 1`` the plane is orthogonal to the class-mean span, so the
    points sit far from every blob while projecting onto the IND centroid.
    """
    if n < 1:
        raise ValidationError("n must be >= 1", field="n")
    if width < 0:
        raise ValidationError("width must be non-negative", field="width")
    if radius < 0:
        raise ValidationError("radius must be non-negative", field="radius")
    if D < 2:
        raise ValidationError("a ring needs D >= 2", field="D")
    rng = philox(seed, _STREAM_RING)
    X = rng.standard_normal((n, D))
    theta = 2.0 * np.pi * rng.random(n)
    r = radius + width * (rng.random(n) - 0.5)
    X[:, D - 2] = r * np.cos(theta)
    X[:, D - 1] = r * np.sin(theta)
    return LabeledDataset(_f32(X), np.full(n, -1), C, "test")


def gen_cube(n: int, half_width: float, seed: int, D: int = 8, C: int = 4) -> LabeledDataset:
    """Uniform on ``[-half_width, half_width]`` for every coordinate outside the
    class-mean span (index ``>= C - 1``); standard normal inside it."""
    if n < 1:
        raise ValidationError("n must be >= 1", field="n")
    if half_width <= 0:
        raise ValidationError("half_width must be positive", field="half_width")
    rng = philox(seed, _STREAM_CUBE)
    X = rng.standard_normal((n, D))
    lo = min(C - 1, D - 1)
    X[:, lo:] = rng.uniform(-half_width, half_width, size=(n, D - lo))
    return LabeledDataset(_f32(X), np.full(n, -1), C, "test")


# -- desk-scale preset -----------------------------------------------------------


@dataclass(frozen=True)
class DeskPreset:
    C: int = 4
    D: int = 8
    margin: float = 6.0
    n_train_per_class: int = 250
    n_val_per_class: int = 100
    n_test_per_class: int = 250
    near_shift: float = 2.5
    ring_radius: float = 10.0
    ring_width: float = 1.0
    cube_half_width: float = 10.0
    n_ood: int = 1000
    n_ood_val: int = 400


DESK = DeskPreset()


def make_desk_data(seed: int, preset: DeskPreset = DESK) -> dict[str, LabeledDataset]:
    """All datasets of the desk suite, each from its own derived seed."""
    p = preset
    s = [int(v) for v in np.random.SeedSequence(seed).generate_state(8)]
    half = p.n_ood_val // 2
    near_val = gen_shifted_blobs(half, p.near_shift, s[6], p.C, p.D, p.margin)
    far_val = gen_ring(half, p.ring_radius, p.ring_width, s[7], p.D, p.C)
    ood_val = LabeledDataset(np.vstack([near_val.X, far_val.X]), np.full(len(near_val) + len(far_val), -1), p.C, "val")
    return {
        "ind_train": gen_blobs(p.C, p.n_train_per_class, p.D, p.margin, s[0], "train"),
        "ind_val": gen_blobs(p.C, p.n_val_per_class, p.D, p.margin, s[1], "val"),
        "ind_test": gen_blobs(p.C, p.n_test_per_class, p.D, p.margin, s[2], "test"),
        "near_shift": gen_shifted_blobs(p.n_ood, p.near_shift, s[3], p.C, p.D, p.margin),
        "far_ring": gen_ring(p.n_ood, p.ring_radius, p.ring_width, s[4], p.D, p.C),
        "far_cube": gen_cube(p.n_ood, p.cube_half_width, s[5], p.D, p.C),
        "ood_val": ood_val,
    }


DESK_GROUPS = {"near_shift": "near", "far_ring": "far", "far_cube": "far"}


def desk_suite(data: dict[str, LabeledDataset]) -> OodSuite:
    return OodSuite(
        ind_test=data["ind_test"],
        ood={name: data[name] for name in DESK_GROUPS},
        groups=dict(DESK_GROUPS),
        ood_val=data["ood_val"],
        ind_val=data["ind_val"],
    )


# -- OODD binary format ----------------------------------------------------------


def dumps_dataset(ds: LabeledDataset) -> bytes:
    N, D = ds.X.shape
    labels = np.where(ds.y < 0, UNLABELED, ds.y).astype("<u4")
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, N, D, ds.class_count),
            ds.X.astype("<f4").tobytes(),
            labels.tobytes(),
        ]
    )


def save_dataset(ds: LabeledDataset, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(dumps_dataset(ds))
    except OSError as exc:
        raise DataIOError(f"cannot write dataset to {path}: {exc}") from exc


def loads_dataset(raw: bytes, split: str = "test") -> LabeledDataset:
    if len(raw) < _HEADER.size:
        raise ParseError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", offset=len(raw))
    magic, version, N, D, C = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    if N < 1 or D < 1:
        raise SchemaError(f"dataset header declares N={N}, D={D}", field="N" if N < 1 else "D")
    feat_end = _HEADER.size + 4 * N * D
    end = feat_end + 4 * N
    if len(raw) < end:
        section = "features" if len(raw) < feat_end else "labels"
        raise ParseError(f"truncated {section}: file has {len(raw)} bytes, need {end}", offset=len(raw))
    if len(raw) > end:
        raise ParseError(f"{len(raw) - end} trailing bytes", offset=end)
    X = np.frombuffer(raw, dtype="<f4", count=N * D, offset=_HEADER.size).reshape(N, D).astype(np.float64)
    if not np.all(np.isfinite(X)):
        bad = int(np.flatnonzero(~np.isfinite(X.reshape(-1)))[0])
        raise ParseError("non-finite feature value", offset=_HEADER.size + 4 * bad)
    labels = np.frombuffer(raw, dtype="<u4", count=N, offset=feat_end).astype(np.int64)
    bad = (labels != UNLABELED) & (labels >= C)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SchemaError(f"label {labels[i]} at row {i} outside [0, {C})", field="label")
    y = np.where(labels == UNLABELED, -1, labels)
    return LabeledDataset(X, y, C, split)


def load_dataset(path, split: str = "test") -> LabeledDataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    return loads_dataset(raw, split)


def export_csv(ds: LabeledDataset, path) -> None:
    header = ",".join([f"x{j}" for j in range(ds.dim)] + ["label"])
    lines = [header]
    for row, label in zip(ds.X, ds.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
