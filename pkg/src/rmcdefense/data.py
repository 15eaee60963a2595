"""Synthetic labelled datasets in the unit box, and their JSON persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError
from .numcore import RngStream

FORMAT_VERSION = 1
KINDS = ("gaussian_blobs", "two_rings")
LO, HI = 0.1, 0.9
SPARSE_OFFSET = 0.25
DENSE_OFFSET = 0.06


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"
    kind: str = "custom"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise UsageError("dataset needs a nonempty (n, d) feature matrix")
        if y.shape != (x.shape[0],):
            raise UsageError("labels must be a vector with one entry per row")
        if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
            raise UsageError("features must lie in [0, 1]")
        if np.any(y < 0) or np.any(y >= self.classes):
            raise UsageError(f"labels must lie in [0, {self.classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
            and self.y.tobytes() == other.y.tobytes()
            and (self.classes, self.split, self.kind, self.seed, self.params)
            == (other.classes, other.split, other.kind, other.seed, other.params)
        )


def _class_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def _raw_blobs(counts, d, noise, rng: RngStream):
    # Class c has a large offset on coordinate c and small +-offsets on the
    # remaining "dense" coordinates. linf attacks erode the dense group, l1/l2
    # attacks the single sparse coordinate, so no one norm dominates.
    n_classes = len(counts)
    signs = np.where(rng.uniforms(n_classes * (d - n_classes)) < 0.5, -1.0, 1.0)
    signs = signs.reshape(n_classes, d - n_classes)
    xs, ys = [], []
    for c, m in enumerate(counts):
        mean = np.zeros(d)
        mean[c] = SPARSE_OFFSET
        mean[n_classes:] = DENSE_OFFSET * signs[c]
        xs.append(mean + noise * rng.normals(m * d).reshape(m, d))
        ys.append(np.full(m, c))
    return np.concatenate(xs), np.concatenate(ys)


def _raw_rings(counts, d, noise, rng: RngStream):
    xs, ys = [], []
    for c, m in enumerate(counts):
        radius = (c + 1.0) / len(counts)
        ang = 2.0 * math.pi * rng.uniforms(m)
        pts = noise * rng.normals(m * d).reshape(m, d)
        pts[:, 0] += radius * np.cos(ang)
        pts[:, 1] += radius * np.sin(ang)
        xs.append(pts)
        ys.append(np.full(m, c))
    return np.concatenate(xs), np.concatenate(ys)


def generate_dataset(kind: str = "gaussian_blobs", n: int = 2000, d: int = 8, classes: int = 3,
                     noise: float = 0.08, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-balanced samples rescaled into [0.1, 0.9]^d, split 80/20 per class."""
    if kind not in KINDS:
        raise UsageError(f"unknown dataset kind {kind!r}; expected one of {', '.join(KINDS)}")
    if classes < 2 or d < 2 or n < 2 * classes:
        raise UsageError("need classes >= 2, d >= 2 and n >= 2 * classes")
    if kind == "gaussian_blobs" and classes > d:
        raise UsageError("gaussian_blobs needs classes <= d")
    if not noise >= 0:
        raise UsageError("noise must be nonnegative")
    rng = RngStream(seed)
    counts = _class_counts(n, classes)
    gen = _raw_blobs if kind == "gaussian_blobs" else _raw_rings
    x, y = gen(counts, d, noise, rng)
    # one scale for every coordinate so lp geometry survives the rescaling
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    x = np.clip(0.5 * (LO + HI) + (HI - LO) * (x - 0.5 * (lo + hi)) / span, LO, HI)

    train_idx, test_idx = [], []
    start = 0
    for m in counts:
        n_train = max(1, min(m - 1, int(round(0.8 * m))))
        train_idx.extend(range(start, start + n_train))
        test_idx.extend(range(start + n_train, start + m))
        start += m
    meta = {"n": n, "d": d, "classes": classes, "noise": noise}
    out = []
    for split, idx in (("train", train_idx), ("test", test_idx)):
        idx = np.array(idx)[rng.permutation(len(idx))]
        out.append(Dataset(x[idx], y[idx], classes, split, kind, seed, dict(meta)))
    return out[0], out[1]


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": ds.kind,
        "seed": ds.seed,
        "n": ds.n,
        "d": ds.d,
        "classes": ds.classes,
        "split": ds.split,
        "params": ds.params,
        "x": ds.x.tolist(),
        "y": ds.y.tolist(),
    }


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds)) + "\n")


def read_json(path, what: str) -> dict:
    """Parse a JSON document, turning syntax errors into FormatError with location."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read {what}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}, column {exc.colno}: malformed {what}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: {what} must be a JSON object")
    return doc


def _field(doc: dict, name: str, path, types):
    if name not in doc:
        raise FormatError(f"{path}: missing field {name!r}")
    value = doc[name]
    if not isinstance(value, types) or isinstance(value, bool):
        raise FormatError(f"{path}: field {name!r} has wrong type {type(value).__name__}")
    return value


def dataset_from_dict(doc: dict, path="<dataset>") -> Dataset:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format_version {version!r} (expected {FORMAT_VERSION})")
    n = _field(doc, "n", path, int)
    d = _field(doc, "d", path, int)
    classes = _field(doc, "classes", path, int)
    split = _field(doc, "split", path, str)
    kind = _field(doc, "kind", path, str)
    seed = _field(doc, "seed", path, int)
    xs = _field(doc, "x", path, list)
    ys = _field(doc, "y", path, list)
    params = doc.get("params", {})
    if len(xs) != n or len(ys) != n:
        raise FormatError(f"{path}: field 'x'/'y' has {len(xs)}/{len(ys)} rows, expected n={n}")
    for i, row in enumerate(xs):
        if not isinstance(row, list) or len(row) != d:
            raise FormatError(f"{path}: field 'x' row {i} is not a list of {d} numbers")
    try:
        x = np.array(xs, dtype=np.float64).reshape(n, d)
        y = np.array(ys, dtype=np.int64)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in ys):
            raise ValueError("labels must be integers")
        return Dataset(x, y, classes, split, kind, seed, params)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid dataset contents: {exc}") from None


def load_dataset(path) -> Dataset:
    return dataset_from_dict(read_json(path, "dataset"), path)
