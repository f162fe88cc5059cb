"""Experiment presets, key=value config overrides, and sweep fan-out."""

from __future__ import annotations

import copy
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DatasetSpec
from .engine import MetaTrainConfig
from .errors import ValidationError
from .model import ArchitectureConfig

DEFAULT_SWEEP = {
    "samples_per_class": (10, 20, 30),
    "replay_epochs": (0, 1, 2, 3, 4, 5),
    "subvec_len": (8, 32, 128),
}

# meta-test learning-rate candidates, log-spaced
LR_SWEEP = tuple(float(v) for v in np.logspace(-4, -2, 10))


@dataclass
class CodecConfig:
    subvec_len: int = 8
    num_centroids: int = 256
    kmeans_iters: int = 25


@dataclass
class ExperimentPreset:
    name: str
    dataset: DatasetSpec
    arch: ArchitectureConfig
    cfg: MetaTrainConfig
    codec: CodecConfig = field(default_factory=CodecConfig)
    sweep: dict = field(default_factory=lambda: dict(DEFAULT_SWEEP))

    def __post_init__(self):
        for key, values in self.sweep.items():
            if any(v < 0 for v in values) or (key != "replay_epochs" and any(v == 0 for v in values)):
                raise ValidationError(f"sweep values for {key} must be positive")

    def with_seed(self, seed: int) -> "ExperimentPreset":
        p = copy.deepcopy(self)
        p.dataset.seed = seed
        p.cfg.seed = seed
        return p

    def resolved(self) -> dict:
        """Flat ``section.key -> value`` view, as echoed into reports."""
        out = {"preset": self.name}
        for section, obj in (("dataset", self.dataset), ("arch", self.arch), ("cfg", self.cfg), ("codec", self.codec)):
            for f in fields(obj):
                value = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out


def _toy() -> ExperimentPreset:
    return ExperimentPreset(
        name="toy",
        dataset=DatasetSpec(
            source="synthetic-blobs",
            num_classes=25,
            samples_per_class_train=30,
            samples_per_class_test=40,
            input_shape=(1, 24, 24),
            meta_train_classes=tuple(range(20)),
            meta_test_classes=tuple(range(20, 25)),
            meta_train_pool=200,
            separation=10.0,
            subspace_rank=8,
        ),
        arch=ArchitectureConfig(input_shape=(1, 24, 24), num_classes_max=25, width_multiplier=0.25),
        cfg=MetaTrainConfig(inner_lr=1e-3, outer_lr=1e-3, replay_lr=3e-3, outer_steps=500, traj_len=30, inner_steps=30),
        codec=CodecConfig(subvec_len=8),
    )


def _full_scale() -> ExperimentPreset:
    # full widths and step count; far beyond a desk budget in pure numpy
    return ExperimentPreset(
        name="full-scale",
        dataset=DatasetSpec(
            source="synthetic-images",
            num_classes=100,
            samples_per_class_train=30,
            samples_per_class_test=100,
            input_shape=(3, 32, 32),
            meta_train_classes=tuple(range(70)),
            meta_test_classes=tuple(range(70, 100)),
            meta_train_pool=500,
        ),
        arch=ArchitectureConfig(input_shape=(3, 32, 32), num_classes_max=100, width_multiplier=1.0),
        cfg=MetaTrainConfig(inner_lr=1e-3, outer_lr=1e-3, replay_lr=1e-3, outer_steps=20000),
        codec=CodecConfig(subvec_len=32),
    )


PRESETS = {"toy": _toy, "full-scale": _full_scale}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _coerce(current, text: str):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
        return None if text.strip().lower() == "none" else text
    return text


def apply_overrides(preset: ExperimentPreset, overrides: dict[str, str]) -> ExperimentPreset:
    """Apply ``section.key=value`` overrides (sections: dataset, arch, cfg, codec)."""
    p = copy.deepcopy(preset)
    sections = {"dataset": p.dataset, "arch": p.arch, "cfg": p.cfg, "codec": p.codec}
    for key, text in overrides.items():
        section, _, name = key.partition(".")
        obj = sections.get(section)
        if obj is None or not hasattr(obj, name):
            raise ValidationError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(getattr(obj, name), text))
    # re-run the validating constructors
    p.dataset = DatasetSpec(**{f.name: getattr(p.dataset, f.name) for f in fields(DatasetSpec)})
    p.arch = ArchitectureConfig(**{f.name: getattr(p.arch, f.name) for f in fields(ArchitectureConfig)})
    p.cfg = MetaTrainConfig(**{f.name: getattr(p.cfg, f.name) for f in fields(MetaTrainConfig)})
    return p


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def sweep_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def run_sweep(fn, points: list[dict], workers: int = 1) -> list:
    """Evaluate ``fn(point)`` for every grid point; results come back in grid order."""
    if workers <= 1:
        return [fn(pt) for pt in points]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, points))


def preset_to_dict(p: ExperimentPreset) -> dict:
    return {
        "name": p.name,
        "dataset": p.dataset.to_dict(),
        "arch": p.arch.to_dict(),
        "cfg": p.cfg.to_dict(),
        "codec": asdict(p.codec),
        "sweep": {k: list(v) for k, v in p.sweep.items()},
    }


def preset_from_dict(d: dict) -> ExperimentPreset:
    return ExperimentPreset(
        name=d["name"],
        dataset=DatasetSpec.from_dict(d["dataset"]),
        arch=ArchitectureConfig.from_dict(d["arch"]),
        cfg=MetaTrainConfig(**d["cfg"]),
        codec=CodecConfig(**d["codec"]),
        sweep={k: tuple(v) for k, v in d.get("sweep", DEFAULT_SWEEP).items()},
    )
