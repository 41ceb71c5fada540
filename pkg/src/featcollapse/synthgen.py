"""Synthetic ellipse dataset with five controlled generative factors.

Images are white antialiased ellipses on black, 32x32 by default. The two
classes differ only in the aspect-ratio sampling range; every other factor
(position, area, rotation) is drawn identically for both classes, so aspect
is the only label-informative factor and the overlap of the two aspect
ranges sets the Bayes accuracy below 1.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1

# Factor sampling ranges. Center range is chosen so the largest ellipse
# (max area at max aspect) plus the 1 px edge band always fits at 32x32.
DEFAULT_RANGES = {
    "center": [0.28, 0.72],
    "area": [20.0, 50.0],
    "theta": [0.0, float(np.pi)],
    "aspect_class0": [1.0, 2.1],
    "aspect_class1": [1.8, 3.0],
}

DEFAULT_CLASS_RULE = {
    "kind": "per_class_aspect_ranges",
    "bayes_threshold": 2.1,  # optimal decision boundary implied by the ranges
    "label_noise": 0.0,
}


class DatasetError(Exception):
    pass


@dataclass
class EllipseFactors:
    """Generative factors: center (normalized), semi-axes (px), rotation (rad)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    @property
    def aspect(self):
        return self.a / self.b

    def validate(self, size):
        h, w = size
        if not (self.a >= self.b > 0):
            raise DatasetError(f"need a >= b > 0, got a={self.a}, b={self.b}")
        if not (0.25 <= self.cx <= 0.75 and 0.25 <= self.cy <= 0.75):
            raise DatasetError(f"center ({self.cx}, {self.cy}) outside [0.25, 0.75]")
        margin = self.a + 1.0  # semi-major plus the half-pixel edge band each side
        if (self.cx * w - margin < 0 or self.cx * w + margin > w
                or self.cy * h - margin < 0 or self.cy * h + margin > h):
            raise DatasetError("ellipse exceeds image bounds")


def render_ellipse(factors, size=(32, 32)):
    """Rasterize one ellipse with a 1 px smoothstep edge.

    Pixel intensity is a smooth indicator of the ellipse quadratic form:
    exactly 1 inside the edge band, exactly 0 outside it, and a cubic
    smoothstep across a band of one pixel centered on the boundary.
    """
    if isinstance(size, int):
        size = (size, size)
    factors.validate(size)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs + 0.5 - factors.cx * w
    py = ys + 0.5 - factors.cy * h
    theta = factors.theta % np.pi  # rotation by pi is the identity for an ellipse
    ct, st = np.cos(theta), np.sin(theta)
    u = (px * ct + py * st) / factors.a
    v = (-px * st + py * ct) / factors.b
    rho = np.sqrt(u * u + v * v)
    dist = np.sqrt(px * px + py * py)
    # (1 - rho) * local radius approximates signed distance to the boundary
    r_loc = np.where(rho > 1e-9, dist / np.maximum(rho, 1e-9), factors.b)
    delta = (1.0 - rho) * r_loc
    t = np.clip(delta + 0.5, 0.0, 1.0)
    return (t * t * (3.0 - 2.0 * t)).astype(np.float64)


def _sample_rng(seed, index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), int(index)))))


def sample_factors(rng, label, ranges, size):
    h, w = size
    lo, hi = ranges["center"]
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    theta = rng.uniform(*ranges["theta"])
    key = "aspect_class1" if label == 1 else "aspect_class0"
    aspect = rng.uniform(*ranges[key])
    area = rng.uniform(*ranges["area"])
    a = np.sqrt(area * aspect / np.pi)
    b = np.sqrt(area / (np.pi * aspect))
    return EllipseFactors(cx=cx, cy=cy, a=a, b=b, theta=theta)


def _validate_ranges(ranges, size):
    h, w = size
    lo, hi = ranges["center"]
    if not (0.25 <= lo < hi <= 0.75):
        raise DatasetError(f"center range {ranges['center']} outside [0.25, 0.75]")
    for key in ("aspect_class0", "aspect_class1"):
        alo, ahi = ranges[key]
        if not (1.0 <= alo < ahi):
            raise DatasetError(f"invalid aspect range {ranges[key]}")
    if ranges["area"][0] <= 0 or ranges["area"][0] >= ranges["area"][1]:
        raise DatasetError(f"invalid area range {ranges['area']}")
    worst_aspect = max(ranges["aspect_class0"][1], ranges["aspect_class1"][1])
    worst_a = np.sqrt(ranges["area"][1] * worst_aspect / np.pi)
    margin = min(lo, 1.0 - hi) * min(h, w)
    if worst_a + 1.0 > margin:
        raise DatasetError(
            f"ranges allow ellipses (semi-major {worst_a:.2f} px) that cannot fit "
            f"the {margin:.2f} px center margin")


@dataclass
class Dataset:
    """Labeled image collection plus generative-factor provenance."""

    images: np.ndarray            # (N, H, W) float32 in [0, 1]
    labels: np.ndarray            # (N,) int32
    factors: np.ndarray | None    # (N, 6) float64: cx, cy, a, b, theta, aspect
    fold_of: np.ndarray | None    # (N,) int32 test-fold assignment
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx):
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            factors=self.factors[idx] if self.factors is not None else None,
            fold_of=self.fold_of[idx] if self.fold_of is not None else None,
            manifest=self.manifest,
        )


def assign_folds(labels, k, seed):
    """Stratified fold assignment: round-robin within each shuffled class."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xF01D)))
    fold_of = np.zeros(len(labels), dtype=np.int32)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx), dtype=np.int32) % k
    return fold_of


def generate_dataset(n, seed, size=(32, 32), ranges=None, class_rule=None, folds=5):
    """Generate n labeled ellipse images, deterministically from `seed`.

    Classes are balanced exactly (n//2 each, class 1 gets the remainder);
    per-sample factors come from a counter-based per-sample RNG so the
    dataset content is independent of generation order.
    """
    if isinstance(size, int):
        size = (size, size)
    if n <= 0:
        raise DatasetError("n must be positive")
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    class_rule = dict(DEFAULT_CLASS_RULE if class_rule is None else class_rule)
    _validate_ranges(ranges, size)

    labels = np.zeros(n, dtype=np.int32)
    labels[n // 2:] = 1
    noise = float(class_rule.get("label_noise", 0.0))

    images = np.zeros((n,) + tuple(size), dtype=np.float32)
    factors = np.zeros((n, 6), dtype=np.float64)
    for i in range(n):
        rng = _sample_rng(seed, i)
        if noise > 0.0 and rng.uniform() < noise:
            labels[i] = 1 - labels[i]
        f = sample_factors(rng, labels[i], ranges, size)
        images[i] = render_ellipse(f, size).astype(np.float32)
        factors[i] = (f.cx, f.cy, f.a, f.b, f.theta, f.aspect)

    order = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5F))).permutation(n)
    images, labels, factors = images[order], labels[order], factors[order]
    fold_of = assign_folds(labels, folds, seed)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ellipse-dataset",
        "n": int(n),
        "image_size": [int(size[0]), int(size[1])],
        "seed": int(seed),
        "ranges": ranges,
        "class_rule": class_rule,
        "folds": {"k": int(folds), "stratified": True},
    }
    return Dataset(images=images, labels=labels, factors=factors,
                   fold_of=fold_of, manifest=manifest)


# ---------------------------------------------------------------------------
# container format: manifest.json + raw little-endian blobs + factors CSV
# (byte layout documented in docs/formats.md)

FACTOR_COLUMNS = ["cx", "cy", "a", "b", "theta", "aspect"]


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def manifest_hash(manifest):
    return _sha256(canonical_json(manifest))


def _factors_csv_bytes(factors):
    buf = io.StringIO()
    buf.write(",".join(FACTOR_COLUMNS) + "\n")
    for row in factors:
        buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue().encode()


def save_dataset(ds, path):
    """Write the dataset container; returns the manifest hash."""
    os.makedirs(path, exist_ok=True)
    blobs = {
        "images.f32": np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
        "labels.i32": np.ascontiguousarray(ds.labels, dtype="<i4").tobytes(),
    }
    shapes = {
        "images.f32": {"dtype": "<f4", "shape": list(ds.images.shape)},
        "labels.i32": {"dtype": "<i4", "shape": list(ds.labels.shape)},
    }
    if ds.factors is not None:
        blobs["factors.csv"] = _factors_csv_bytes(ds.factors)
        shapes["factors.csv"] = {"format": "csv", "columns": FACTOR_COLUMNS,
                                 "shape": list(ds.factors.shape)}
    if ds.fold_of is not None:
        blobs["folds.i32"] = np.ascontiguousarray(ds.fold_of, dtype="<i4").tobytes()
        shapes["folds.i32"] = {"dtype": "<i4", "shape": list(ds.fold_of.shape)}

    manifest = dict(ds.manifest)
    manifest["files"] = {
        name: {**shapes[name], "sha256": _sha256(data)} for name, data in blobs.items()
    }
    for name, data in blobs.items():
        with open(os.path.join(path, name), "wb") as fh:
            fh.write(data)
    with open(os.path.join(path, "manifest.json"), "wb") as fh:
        fh.write(canonical_json(manifest))
    ds.manifest = manifest
    return manifest_hash(manifest)


def load_dataset(path, verify=True):
    with open(os.path.join(path, "manifest.json"), "rb") as fh:
        manifest = json.loads(fh.read())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {manifest.get('schema_version')}")

    def read(name):
        with open(os.path.join(path, name), "rb") as fh:
            data = fh.read()
        if verify and _sha256(data) != manifest["files"][name]["sha256"]:
            raise DatasetError(f"checksum mismatch for {name}")
        return data

    files = manifest["files"]
    images = np.frombuffer(read("images.f32"), dtype="<f4").reshape(files["images.f32"]["shape"])
    labels = np.frombuffer(read("labels.i32"), dtype="<i4").reshape(files["labels.i32"]["shape"])
    factors = None
    if "factors.csv" in files:
        raw = read("factors.csv").decode().strip().split("\n")[1:]
        factors = np.array([[float(v) for v in line.split(",")] for line in raw])
    fold_of = None
    if "folds.i32" in files:
        fold_of = np.frombuffer(read("folds.i32"), dtype="<i4").reshape(files["folds.i32"]["shape"])
    return Dataset(images=images.copy(), labels=labels.copy(), factors=factors,
                   fold_of=fold_of.copy() if fold_of is not None else None,
                   manifest=manifest)
