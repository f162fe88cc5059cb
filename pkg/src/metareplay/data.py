"""Synthetic class-conditional datasets and a plain .npy directory format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .seeding import stream

SOURCES = ("synthetic-blobs", "synthetic-images", "directory")


@dataclass
class DatasetSpec:
    source: str = "synthetic-blobs"
    num_classes: int = 15
    samples_per_class_train: int = 30
    samples_per_class_test: int = 10
    input_shape: tuple[int, int, int] = (1, 24, 24)
    seed: int = 0
    meta_train_classes: tuple[int, ...] = tuple(range(10))
    meta_test_classes: tuple[int, ...] = tuple(range(10, 15))
    meta_train_pool: int | None = None  # train samples per meta-train class; None: samples_per_class_train
    separation: float = 5.0  # blob centre distance from the origin, in noise std units
    noise: float = 1.0
    subspace_rank: int | None = None  # blob centres share a random subspace of this rank; None: full space
    path: str | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.meta_train_classes = tuple(int(c) for c in self.meta_train_classes)
        self.meta_test_classes = tuple(int(c) for c in self.meta_test_classes)
        self.validate()

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ValidationError(f"unknown dataset source {self.source!r}")
        if set(self.meta_train_classes) & set(self.meta_test_classes):
            overlap = sorted(set(self.meta_train_classes) & set(self.meta_test_classes))
            raise ValidationError(f"meta-train and meta-test classes overlap: {overlap}")
        for c in self.meta_train_classes + self.meta_test_classes:
            if not 0 <= c < self.num_classes:
                raise ValidationError(f"class {c} outside [0, {self.num_classes})")
        if self.samples_per_class_train < 1 or self.samples_per_class_test < 0:
            raise ValidationError("samples per class must be positive")
        if self.meta_train_pool is not None and self.meta_train_pool < self.samples_per_class_train:
            raise ValidationError("meta_train_pool must be >= samples_per_class_train")

    def train_count(self, c: int) -> int:
        if self.meta_train_pool is not None and c in self.meta_train_classes:
            return self.meta_train_pool
        return self.samples_per_class_train

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_shape", "meta_train_classes", "meta_test_classes"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.y_train) + len(self.y_test)

    def class_samples(self, c: int, split: str = "train", limit: int | None = None) -> np.ndarray:
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        out = x[y == c]
        if limit is not None:
            if limit > len(out):
                raise ValidationError(f"class {c} has {len(out)} {split} samples, {limit} requested")
            out = out[:limit]
        return out

    def subset(self, classes, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        keep = np.isin(y, list(classes))
        return x[keep], y[keep]


def _blobs(spec: DatasetSpec, rng: np.random.Generator):
    dim = int(np.prod(spec.input_shape))
    if spec.subspace_rank:
        basis = np.linalg.qr(rng.standard_normal((dim, spec.subspace_rank)))[0]
        dirs = rng.standard_normal((spec.num_classes, spec.subspace_rank)) @ basis.T
    else:
        dirs = rng.standard_normal((spec.num_classes, dim))
    centres = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * spec.separation * spec.noise

    def draw(c, count):
        return centres[c] + spec.noise * rng.standard_normal((count, dim))

    return draw


def _textures(spec: DatasetSpec, rng: np.random.Generator):
    c, h, w = spec.input_shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    params = [
        (rng.uniform(0, np.pi), rng.uniform(1.5, 6.0), rng.uniform(0.3, 1.0, size=c))
        for _ in range(spec.num_classes)
    ]

    def draw(k, count):
        theta, freq, colour = params[k]
        phase = rng.uniform(0, 2 * np.pi, size=(count, 1, 1))
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))[None] + phase)
        img = colour[None, :, None, None] * wave[:, None]
        img = img + spec.noise * 0.3 * rng.standard_normal((count, c, h, w))
        return img.reshape(count, -1)

    return draw


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Deterministic train/test splits for every class, ordered by class id."""
    if spec.source == "directory":
        raise ValidationError("directory datasets are loaded, not generated")
    rng = stream(spec.seed, "data")
    draw = _blobs(spec, rng) if spec.source == "synthetic-blobs" else _textures(spec, rng)
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for k in range(spec.num_classes):
        xs_tr.append(draw(k, spec.train_count(k)))
        ys_tr.append(np.full(spec.train_count(k), k))
        xs_te.append(draw(k, spec.samples_per_class_test))
        ys_te.append(np.full(spec.samples_per_class_test, k))
    shape = (-1, *spec.input_shape)
    return Dataset(
        spec,
        np.concatenate(xs_tr).reshape(shape).astype(np.float32),
        np.concatenate(ys_tr).astype(np.int64),
        np.concatenate(xs_te).reshape(shape).astype(np.float32),
        np.concatenate(ys_te).astype(np.int64),
    )


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("x_train", "y_train", "x_test", "y_test"):
        np.save(d / f"{name}.npy", getattr(ds, name), allow_pickle=False)
    (d / "dataset.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory, spec: DatasetSpec | None = None) -> Dataset:
    """Read a directory holding x_/y_ train/test .npy arrays (and optionally dataset.json)."""
    d = Path(directory)
    arrays = {name: np.load(d / f"{name}.npy", allow_pickle=False) for name in ("x_train", "y_train", "x_test", "y_test")}
    if spec is None:
        meta = d / "dataset.json"
        if meta.exists():
            spec = DatasetSpec.from_dict(json.loads(meta.read_text()))
        else:
            classes = sorted(set(arrays["y_train"].tolist()))
            n_test = max(1, len(classes) * 3 // 10)
            spec = DatasetSpec(
                source="directory",
                num_classes=max(classes) + 1,
                samples_per_class_train=int(np.bincount(arrays["y_train"]).min()),
                samples_per_class_test=int(np.bincount(arrays["y_test"]).min()) if len(arrays["y_test"]) else 0,
                input_shape=tuple(arrays["x_train"].shape[1:]),
                meta_train_classes=tuple(classes[:-n_test]),
                meta_test_classes=tuple(classes[-n_test:]),
                path=str(d),
            )
    return Dataset(
        spec,
        arrays["x_train"].astype(np.float32),
        arrays["y_train"].astype(np.int64),
        arrays["x_test"].astype(np.float32),
        arrays["y_test"].astype(np.int64),
    )


def build_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "directory":
        if not spec.path:
            raise ValidationError("directory source needs a path")
        return load_dataset(spec.path, spec)
    return generate_synthetic(spec)
