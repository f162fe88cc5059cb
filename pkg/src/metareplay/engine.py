"""Offline meta-training and deployment-time continual learning.

Meta-training alternates a classifier-only inner loop (SGD, batch 1) with a
first-order outer update of every weight (Adam) on the trajectory plus a
random draw from all meta-training classes.  Continual learning keeps the
extractor frozen.  For each new class it runs the same inner loop, then
replays the decompressed buffer together with the new latents, then
compresses the new latents into the buffer.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .compression import make_codec
from .data import Dataset
from .errors import TrainingError, ValidationError
from .model import ModelState, classify, extract_latent, latent_forward
from .replay import ReplayBuffer
from .seeding import stream
from .tensor import Adam, ParamGroup, Role, Tensor, backward, sgd_step, softmax_ce

log = logging.getLogger(__name__)


@dataclass
class MetaTrainConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 1e-3
    inner_steps: int = 30
    outer_steps: int = 20000
    inner_batch: int = 1
    outer_batch: int = 64
    rand_sample_count: int | None = None  # None: fill the outer batch
    traj_len: int = 30
    replay_lr: float = 1e-3
    replay_batch: int = 8
    replay_epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    corpus_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.inner_lr < 0:
            raise ValidationError(f"inner_lr must be >= 0, got {self.inner_lr}")
        if self.outer_lr <= 0 or self.replay_lr <= 0:
            raise ValidationError("outer_lr and replay_lr must be > 0")
        if self.inner_steps < 1:
            raise ValidationError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.inner_batch != 1:
            raise ValidationError("the inner loop updates one sample at a time (inner_batch=1)")
        if self.outer_batch < 1 or self.replay_batch < 1 or self.traj_len < 1:
            raise ValidationError("batch sizes and traj_len must be >= 1")
        if self.replay_epochs < 0 or self.outer_steps < 0:
            raise ValidationError("replay_epochs and outer_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassTrajectory:
    class_id: int
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValidationError(f"class {self.class_id} has no samples")
        if not np.all(self.labels == self.class_id):
            raise ValidationError(f"trajectory labels disagree with class {self.class_id}")


def _inner_loop(classifier: ParamGroup, model: ModelState, latents: np.ndarray, label: int, steps: int, lr: float) -> None:
    """``steps`` single-sample SGD updates on the classifier, cycling through ``latents``."""
    fast = classifier.as_role(Role.FAST)
    labels = np.array([label])
    for i in range(steps):
        x = latents[i % len(latents)][None]
        loss = softmax_ce(classify(model, x), labels)
        backward(loss, [fast])
        sgd_step(fast, lr)


def _reset_row(model: ModelState, c: int) -> None:
    w, b = model.classifier.params
    w.data[c] = 0.0
    b.data[c] = 0.0


# ---------------------------------------------------------------------------
# meta-training


@dataclass
class MetaTrainResult:
    model: ModelState
    corpus: np.ndarray
    losses: list[float]


def meta_train(model: ModelState, data: Dataset, cfg: MetaTrainConfig, classes=None) -> MetaTrainResult:
    """First-order meta-training over ``classes`` (default: the dataset's meta-train split).

    Returns the trained model, the most recent ``cfg.corpus_size`` gated
    latents seen in outer steps (the codebook training corpus), and the
    per-step meta-losses.
    """
    classes = list(data.spec.meta_train_classes if classes is None else classes)
    if len(classes) < 2:
        raise ValidationError("meta-training needs at least two classes")
    rng = stream(cfg.seed, "sampling")
    x_pool, y_pool = data.subset(classes, "train")
    per_class = {c: np.flatnonzero(y_pool == c)[: cfg.traj_len] for c in classes}

    groups = [model.nm_weights, model.pred_weights, model.classifier]
    for g in groups:
        g.role = Role.SLOW
    opts = [Adam(g, cfg.outer_lr, cfg.beta1, cfg.beta2, cfg.eps) for g in groups]
    corpus: deque = deque(maxlen=cfg.corpus_size)
    losses = []

    for step in range(cfg.outer_steps):
        c = classes[int(rng.integers(len(classes)))]
        traj_idx = rng.permutation(per_class[c])
        n_rand = cfg.rand_sample_count if cfg.rand_sample_count is not None else max(0, cfg.outer_batch - len(traj_idx))
        rand_idx = rng.choice(len(y_pool), size=min(n_rand, len(y_pool)), replace=False)

        _reset_row(model, c)
        snapshot = [p.data.copy() for p in model.classifier.params]
        traj_lat = latent_forward(model, x_pool[traj_idx]).data
        _inner_loop(model.classifier, model, traj_lat, c, cfg.inner_steps, cfg.inner_lr)

        idx = np.concatenate([traj_idx, rand_idx])
        latent = latent_forward(model, x_pool[idx])
        loss = softmax_ce(classify(model, latent), y_pool[idx])
        if not math.isfinite(loss.item()):
            raise TrainingError(f"meta-loss became non-finite at outer step {step}")
        corpus.extend(latent.data.copy())
        losses.append(loss.item())
        backward(loss, groups)
        # first-order: the gradient taken at the adapted weights moves the pre-adaptation weights
        for p, saved in zip(model.classifier.params, snapshot):
            p.data[...] = saved
        for opt in opts:
            opt.step()
        if step % 100 == 0:
            log.debug("meta step %d loss %.4f", step, loss.item())

    return MetaTrainResult(model, np.array(corpus, dtype=np.float32).reshape(-1, model.config.latent_dim), losses)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: ModelState, latents, classes=None) -> np.ndarray:
    """Top-1 class ids; with ``classes`` given, argmax is restricted to those rows."""
    logits = classify(model, latents).data
    if classes is None:
        return np.argmax(logits, axis=1)
    classes = np.asarray(sorted(classes))
    return classes[np.argmax(logits[:, classes], axis=1)]


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels)) if labels.size else float("nan")


def evaluate(model: ModelState, latents, labels, classes=None) -> float:
    return accuracy(predict(model, latents, classes), labels)


# ---------------------------------------------------------------------------
# continual learning


@dataclass
class ClassStep:
    class_id: int
    train_acc: float
    test_acc_all_seen: float
    buffer_bytes: int
    replayed_samples: int


@dataclass
class CLRunReport:
    steps: list[ClassStep]
    per_class_train_acc: dict[int, float]
    per_class_test_acc: dict[int, float]
    final_train_acc: float
    final_test_acc: float
    buffer_bytes: int
    buffer_samples: int
    peak_memory_bytes: int
    wall_time_s: float
    config: dict = field(default_factory=dict)


def continual_learn(
    model: ModelState,
    data: Dataset,
    cfg: MetaTrainConfig,
    classes=None,
    codebook=None,
    codec: str = "bitpq",
    replay_epochs: int | None = None,
    samples_per_class: int | None = None,
    buffer: ReplayBuffer | None = None,
) -> tuple[CLRunReport, ReplayBuffer]:
    """Learn ``classes`` one after another with a frozen extractor.

    The classifier is trained in place.  ``replay_epochs=0`` disables the
    outer loop and the buffer entirely, which leaves inner-loop-only learning.
    """
    t0 = time.perf_counter()
    classes = list(data.spec.meta_test_classes if classes is None else classes)
    epochs = cfg.replay_epochs if replay_epochs is None else replay_epochs
    spc = samples_per_class or cfg.traj_len
    rng = stream(cfg.seed, "cl-sampling")
    model.freeze_extractor()
    extractor_before = model.extractor_checksum()
    if buffer is None:
        buffer = ReplayBuffer(make_codec(codec, codebook), capacity_per_class=spc)
    opt = Adam(model.classifier.as_role(Role.SLOW), cfg.replay_lr, cfg.beta1, cfg.beta2, cfg.eps)

    seen: list[int] = []
    train_lat: dict[int, np.ndarray] = {}
    test_lat: dict[int, np.ndarray] = {}
    steps: list[ClassStep] = []
    for c in classes:
        x = data.class_samples(c, "train")
        if len(x) == 0:
            raise ValidationError(f"class {c} has no training samples")
        x = x[rng.permutation(len(x))[:spc]]
        traj = ClassTrajectory(c, x, np.full(len(x), c))
        lat = extract_latent(model, traj.samples).data.copy()  # computed once, reused below
        train_lat[c] = lat
        x_test = data.class_samples(c, "test")
        test_lat[c] = extract_latent(model, x_test).data.copy() if len(x_test) else np.zeros((0, lat.shape[1]), np.float32)
        seen.append(c)

        _reset_row(model, c)
        _inner_loop(model.classifier, model, lat, c, cfg.inner_steps, cfg.inner_lr)

        replayed = 0
        if epochs > 0:
            old_lat, old_y = buffer.decompress_all()
            replayed = len(old_y)
            pool_x = np.concatenate([lat, old_lat]) if replayed else lat
            pool_y = np.concatenate([traj.labels, old_y]) if replayed else traj.labels
            for _ in range(epochs):
                order = rng.permutation(len(pool_y))
                for s in range(0, len(order), cfg.replay_batch):
                    b = order[s:s + cfg.replay_batch]
                    loss = softmax_ce(classify(model, pool_x[b]), pool_y[b])
                    backward(loss, [opt.group])
                    opt.step()
            buffer.add_latents(lat, c)

        tr_x = np.concatenate([train_lat[k] for k in seen])
        tr_y = np.concatenate([np.full(len(train_lat[k]), k) for k in seen])
        te_x = np.concatenate([test_lat[k] for k in seen])
        te_y = np.concatenate([np.full(len(test_lat[k]), k) for k in seen])
        steps.append(ClassStep(c, evaluate(model, tr_x, tr_y, seen), evaluate(model, te_x, te_y, seen), buffer.byte_size, replayed))

    if model.extractor_checksum() != extractor_before:
        raise TrainingError("extractor weights changed during continual learning")

    per_train = {c: evaluate(model, train_lat[c], np.full(len(train_lat[c]), c), seen) for c in seen}
    per_test = {c: evaluate(model, test_lat[c], np.full(len(test_lat[c]), c), seen) for c in seen}
    mem = memory_report(model, buffer, cfg.replay_batch)
    report = CLRunReport(
        steps=steps,
        per_class_train_acc=per_train,
        per_class_test_acc=per_test,
        final_train_acc=steps[-1].train_acc if steps else float("nan"),
        final_test_acc=steps[-1].test_acc_all_seen if steps else float("nan"),
        buffer_bytes=buffer.byte_size,
        buffer_samples=len(buffer),
        peak_memory_bytes=mem.total_bytes,
        wall_time_s=time.perf_counter() - t0,
        config={**cfg.to_dict(), "replay_epochs": epochs, "codec": codec, "samples_per_class": spc, "classes": list(classes)},
    )
    return report, buffer


# ---------------------------------------------------------------------------
# memory accounting


@dataclass
class MemoryReport:
    extractor_param_bytes: int
    classifier_param_bytes: int
    quant_meta_bytes: int
    slow_param_count: int
    optimizer_bytes: int
    gradient_bytes: int
    activation_bytes: int
    extractor_activation_bytes: int
    rehearsal_bytes: int
    rehearsal_samples: int
    raw_latent_bytes: int
    raw_input_bytes: int

    @property
    def param_bytes(self) -> int:
        return self.extractor_param_bytes + self.classifier_param_bytes + self.quant_meta_bytes

    @property
    def total_bytes(self) -> int:
        return (
            self.param_bytes + self.optimizer_bytes + self.gradient_bytes
            + self.activation_bytes + self.extractor_activation_bytes + self.rehearsal_bytes
        )

    @property
    def compression_ratio(self) -> float:
        """Raw f32 latent rehearsal size over the stored size."""
        return self.raw_latent_bytes / self.rehearsal_bytes if self.rehearsal_bytes else float("nan")

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(param_bytes=self.param_bytes, total_bytes=self.total_bytes, compression_ratio=self.compression_ratio)
        return d


def memory_report(model: ModelState, buffer: ReplayBuffer | None, batch_size: int = 8) -> MemoryReport:
    """Byte-level footprint of deployment-time learning.

    * params: f32 tensors at 4 bytes/element, int8 extractor weights at 1,
      plus 12 bytes (f64 scale + i32 zero point) per int8 weight tensor;
    * optimizer: two f32 Adam moments per slow (classifier) parameter;
    * gradients: one f32 per slow parameter;
    * activations kept for the classifier backward pass: the latent input and
      the logits of one batch, f32;
    * extractor activations: the widest consecutive input/output pair of one
      branch for the batch plus the held gate output, at the storage width;
    * rehearsal: the buffer's serialized size.
    """
    cfg = model.config
    qe = model.qextractor
    extractor = 0
    qmeta = 0
    for grp in (model.nm_weights, model.pred_weights):
        for p in grp.params:
            if qe is not None and p.name in qe.weights:
                extractor += p.size
                qmeta += 12
            else:
                extractor += 4 * p.size
    slow = model.classifier.numel()
    elem = 1 if model.quantized else 4
    shapes = [int(np.prod(s)) for s in cfg.layer_shapes()]
    widest = max(a + b for a, b in zip(shapes, shapes[1:]))
    n_samples = len(buffer) if buffer is not None else 0
    return MemoryReport(
        extractor_param_bytes=extractor,
        classifier_param_bytes=4 * slow,
        quant_meta_bytes=qmeta,
        slow_param_count=slow,
        optimizer_bytes=2 * 4 * slow,
        gradient_bytes=4 * slow,
        activation_bytes=4 * batch_size * (cfg.latent_dim + cfg.num_classes_max),
        extractor_activation_bytes=elem * batch_size * (widest + cfg.latent_dim),
        rehearsal_bytes=buffer.byte_size if buffer is not None else 0,
        rehearsal_samples=n_samples,
        raw_latent_bytes=4 * cfg.latent_dim * n_samples,
        raw_input_bytes=4 * int(np.prod(cfg.input_shape)) * n_samples,
    )
