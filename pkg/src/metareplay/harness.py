"""End-to-end pipelines behind the command-line subcommands."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compression import (
    PQCodebook,
    compress,
    compressed_sample_size,
    decompress,
    load_codebook,
    make_codec,
    nonzero_mask,
    pq_train,
    save_codebook,
)
from .data import Dataset, build_dataset, load_dataset
from .engine import CLRunReport, continual_learn, memory_report, meta_train
from .errors import ValidationError
from .model import ModelState, build_model, load_model, quantize_extractor, save_model
from .presets import CodecConfig, ExperimentPreset, preset_from_dict, preset_to_dict
from .replay import ReplayBuffer
from .reports import kv_lines, memory_report_text, write_cl_report, write_rows_csv
from .seeding import stream

log = logging.getLogger(__name__)

MODEL_STEM = "model"
CODEBOOK_FILE = "codebook.llpq"
PRESET_FILE = "preset.json"


def load_data(preset: ExperimentPreset, data_dir=None) -> Dataset:
    if data_dir is not None:
        return load_dataset(data_dir)
    return build_dataset(preset.dataset)


def train_codebook(corpus: np.ndarray, codec: CodecConfig, seed: int) -> PQCodebook:
    """PQ codebook over the packed non-zeros of each corpus latent."""
    vecs = [row[nonzero_mask(row)] for row in np.asarray(corpus, np.float32)]
    k = codec.num_centroids
    if len(vecs) < k:
        log.warning("only %d corpus latents; shrinking codebook to %d centroids", len(vecs), len(vecs))
        k = max(1, len(vecs))
    return pq_train(vecs, codec.subvec_len, k, codec.kmeans_iters, stream(seed, "codebook"))


@dataclass
class MetaTrainArtifacts:
    model: ModelState
    codebook: PQCodebook
    losses: list[float]


def run_meta_train(preset: ExperimentPreset, out_dir, data: Dataset | None = None) -> MetaTrainArtifacts:
    """Meta-train from a fresh init, then fit the codebook and write both to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_data(preset)
    model = build_model(preset.arch, stream(preset.cfg.seed, "init"))
    result = meta_train(model, data, preset.cfg)
    codebook = train_codebook(result.corpus, preset.codec, preset.cfg.seed)
    save_model(result.model, out, MODEL_STEM)
    save_codebook(codebook, out / CODEBOOK_FILE)
    (out / PRESET_FILE).write_text(json.dumps(preset_to_dict(preset), indent=2, sort_keys=True) + "\n")
    losses = result.losses
    summary = [
        ("outer_steps", preset.cfg.outer_steps),
        ("first_loss", losses[0] if losses else float("nan")),
        ("final_loss", losses[-1] if losses else float("nan")),
        ("mean_loss_last_50", float(np.mean(losses[-50:])) if losses else float("nan")),
        ("corpus_latents", len(result.corpus)),
        ("codebook_columns", codebook.columns),
    ]
    summary += [(f"config.{k}", v) for k, v in sorted(preset.resolved().items())]
    (out / "meta_train.txt").write_text(kv_lines(summary))
    return MetaTrainArtifacts(result.model, codebook, losses)


def load_trained(model_dir) -> tuple[ModelState, PQCodebook | None, ExperimentPreset | None]:
    d = Path(model_dir)
    model = load_model(d, MODEL_STEM)
    codebook = load_codebook(d / CODEBOOK_FILE) if (d / CODEBOOK_FILE).exists() else None
    preset = preset_from_dict(json.loads((d / PRESET_FILE).read_text())) if (d / PRESET_FILE).exists() else None
    return model, codebook, preset


def calibration_batches(data: Dataset, count: int = 256, batch: int = 32):
    """Meta-train inputs for activation-range calibration of the int8 path."""
    x, _ = data.subset(data.spec.meta_train_classes, "train")
    x = x[:count]
    return [x[i:i + batch] for i in range(0, len(x), batch)]


@dataclass
class DeployOptions:
    num_classes: int | None = None
    samples_per_class: int | None = None
    replay_epochs: int | None = None
    codec: str = "bitpq"
    quantize: bool = False
    lr_sweep: tuple[float, ...] = ()


def _cl_once(model, data, preset, classes, codebook, opts, replay_lr=None):
    cfg = preset.cfg
    if replay_lr is not None:
        cfg = type(cfg)(**{**cfg.to_dict(), "replay_lr": replay_lr})
    return continual_learn(
        model.clone(), data, cfg, classes=classes, codebook=codebook, codec=opts.codec,
        replay_epochs=opts.replay_epochs, samples_per_class=opts.samples_per_class,
    )


def run_deploy(
    model: ModelState,
    codebook: PQCodebook | None,
    preset: ExperimentPreset,
    opts: DeployOptions,
    out_dir,
    data: Dataset | None = None,
) -> CLRunReport:
    """Continual learning over the meta-test stream; writes report, buffer and memory files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_data(preset)
    classes = list(data.spec.meta_test_classes)
    if opts.num_classes is not None:
        if not 1 <= opts.num_classes <= len(classes):
            raise ValidationError(f"--classes must be in [1, {len(classes)}], got {opts.num_classes}")
        classes = classes[: opts.num_classes]
    if opts.quantize:
        model = quantize_extractor(model, calibration_batches(data))

    replay_lr = None
    if opts.lr_sweep:
        rows = []
        for lr in opts.lr_sweep:
            rep, _ = _cl_once(model, data, preset, classes, codebook, opts, lr)
            rows.append({"replay_lr": lr, "final_test_acc": rep.final_test_acc})
        write_rows_csv(rows, out / "lr_sweep.csv")
        # ties go to the earliest (smallest) rate
        replay_lr = max(rows, key=lambda r: (r["final_test_acc"], -r["replay_lr"]))["replay_lr"]

    report, buffer = _cl_once(model, data, preset, classes, codebook, opts, replay_lr)
    resolved = {**preset.resolved(), "deploy.quantize": opts.quantize}
    if replay_lr is not None:
        resolved["deploy.selected_replay_lr"] = replay_lr
    write_cl_report(report, out, resolved)
    if opts.codec in ("bitpq", "bitmap") and len(buffer):
        buffer.save(out / "buffer.llrb")
    mem = memory_report(model, buffer, preset.cfg.replay_batch)
    (out / "memory.txt").write_text(memory_report_text(mem, resolved))
    return report


def run_report_memory(model_dir, out_dir, buffer_path=None, codec: str | None = None, batch_size: int = 8) -> str:
    model, codebook, _ = load_trained(model_dir)
    buffer = None
    if buffer_path is not None:
        if codec is None:
            codec = "bitpq" if codebook is not None else "bitmap"
        buffer = ReplayBuffer.load(buffer_path, make_codec(codec, codebook))
    text = memory_report_text(memory_report(model, buffer, batch_size), {"model_dir": str(model_dir), "buffer": str(buffer_path)})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "memory.txt").write_text(text)
    return text


def synthetic_sparse_latents(count: int, dim: int, sparsity: float, rng: np.random.Generator) -> np.ndarray:
    """Post-ReLU-like latents with exactly ``round((1 - sparsity) * dim)`` non-zeros each."""
    nnz = int(round((1.0 - sparsity) * dim))
    out = np.zeros((count, dim), np.float32)
    for row in out:
        pos = rng.choice(dim, size=nnz, replace=False)
        row[pos] = np.abs(rng.standard_normal(nnz)).astype(np.float32) + 1e-3
    return out


BENCH_FIELDS = (
    "sparsity", "subvec_len", "latent_dim", "nnz", "dense_bytes", "compressed_bytes",
    "ratio", "predicted_bytes", "train_rel_mse", "test_rel_mse",
)


def bench_compress(
    sparsities,
    subvec_lens,
    latent_dims,
    seed: int = 0,
    train_count: int = 512,
    test_count: int = 128,
    num_centroids: int = 256,
    iters: int = 25,
) -> list[dict]:
    """Compression ratio and reconstruction error over a sparsity x L x n grid."""
    rows = []
    for n in latent_dims:
        for sp in sparsities:
            if not 0.0 <= sp < 1.0:
                raise ValidationError(f"sparsity must be in [0, 1), got {sp}")
            rng = stream(seed, f"bench-{n}-{sp}")
            train = synthetic_sparse_latents(train_count, n, sp, rng)
            test = synthetic_sparse_latents(test_count, n, sp, rng)
            for L in subvec_lens:
                vecs = [r[nonzero_mask(r)] for r in train]
                cb = pq_train(vecs, L, min(num_centroids, train_count), iters, stream(seed, f"bench-cb-{n}-{sp}-{L}"))

                def rel_mse(block):
                    err = sum(float(np.sum((decompress(compress(r, cb, 0), cb) - r) ** 2)) for r in block)
                    return err / max(float(np.sum(block.astype(np.float64) ** 2)), 1e-30)

                sizes = [compress(r, cb, 0).nbytes for r in test]
                nnz = int(nonzero_mask(test[0]).sum())
                size = int(np.mean(sizes))
                rows.append({
                    "sparsity": sp,
                    "subvec_len": L,
                    "latent_dim": n,
                    "nnz": nnz,
                    "dense_bytes": 4 * n,
                    "compressed_bytes": size,
                    "ratio": round(4 * n / size, 4),
                    "predicted_bytes": compressed_sample_size(n, nnz, L),
                    "train_rel_mse": round(rel_mse(train), 6),
                    "test_rel_mse": round(rel_mse(test), 6),
                })
    return rows


def write_bench(rows: list[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench_compress.csv"
    write_rows_csv(rows, path)
    return path

