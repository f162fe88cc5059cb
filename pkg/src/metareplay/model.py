"""Two-branch gated extractor, linear classifier, int8 extractor path, checkpoints.

The neuromodulatory (NM) branch gates the prediction (P) branch by an
elementwise product; the gated map, flattened, is the latent that feeds the
single fully connected classifier and that gets stored for replay.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CorruptionError, ShapeError, StateError, ValidationError
from .tensor import ParamGroup, Role, Tensor, _im2col, conv2d, conv_output_size, fc, flatten, mul, relu


@dataclass
class ArchitectureConfig:
    input_shape: tuple[int, int, int] = (1, 24, 24)
    nm_channels: int = 112
    pred_channels: int = 256
    num_conv_layers: int = 3
    kernel_size: int = 3
    stride: int = 2
    padding: int = 0
    num_classes_max: int = 15
    width_multiplier: float = 0.25

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.width_multiplier <= 0:
            raise ValidationError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if len(self.input_shape) != 3:
            raise ValidationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_conv_layers < 1 or self.num_classes_max < 1:
            raise ValidationError("num_conv_layers and num_classes_max must be >= 1")
        h, w = self.spatial_out
        if h < 1 or w < 1:
            raise ValidationError(f"input {self.input_shape} collapses to nothing after {self.num_conv_layers} convs")

    def _scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def nm_width(self) -> int:
        return self._scaled(self.nm_channels)

    @property
    def pred_width(self) -> int:
        return self._scaled(self.pred_channels)

    def branch_channels(self, branch: str) -> list[int]:
        """Output channels per conv layer.  The NM branch ends at the P width so the gate shapes match."""
        if branch == "pred":
            return [self.pred_width] * self.num_conv_layers
        return [self.nm_width] * (self.num_conv_layers - 1) + [self.pred_width]

    @property
    def spatial_out(self) -> tuple[int, int]:
        h, w = self.input_shape[1:]
        for _ in range(self.num_conv_layers):
            h = conv_output_size(h, self.kernel_size, self.stride, self.padding)
            w = conv_output_size(w, self.kernel_size, self.stride, self.padding)
        return h, w

    @property
    def latent_dim(self) -> int:
        h, w = self.spatial_out
        return self.pred_width * h * w

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) of the input and of every conv output of one branch."""
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        for ch in self.branch_channels("pred"):
            h = conv_output_size(h, self.kernel_size, self.stride, self.padding)
            w = conv_output_size(w, self.kernel_size, self.stride, self.padding)
            shapes.append((ch, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


@dataclass
class QuantizedTensor:
    data: np.ndarray  # int8
    scale: float
    zero_point: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return ((self.data.astype(np.float64) - self.zero_point) * self.scale).astype(np.float32)


@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int


def choose_qparams(lo: float, hi: float) -> QParams:
    """Per-tensor asymmetric int8 parameters from an observed range.

    A degenerate range (constant tensor) uses a symmetric grid with
    ``scale = max(|c|, 1) / 127``.  Otherwise the range is widened to contain
    zero so that zero is exactly representable.
    """
    lo, hi = float(lo), float(hi)
    if lo == hi:
        return QParams(max(abs(lo), 1.0) / 127.0, 0)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(np.round(-128.0 - lo / scale), -128, 127))
    return QParams(scale, zp)


def quantize_array(x: np.ndarray, qp: QParams) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def quantize_tensor(x: np.ndarray, qp: QParams | None = None) -> QuantizedTensor:
    x = np.asarray(x)
    if qp is None:
        qp = choose_qparams(x.min(), x.max()) if x.size else QParams(1.0 / 127.0, 0)
    return QuantizedTensor(quantize_array(x, qp), qp.scale, qp.zero_point)


@dataclass
class QuantizedExtractor:
    """Int8 weights plus calibrated activation parameters for both branches."""

    weights: dict[str, QuantizedTensor]
    biases: dict[str, np.ndarray]
    activations: dict[str, QParams]


BRANCHES = ("nm", "pred")


@dataclass
class ModelState:
    config: ArchitectureConfig
    nm_weights: ParamGroup
    pred_weights: ParamGroup
    classifier: ParamGroup
    quantized: bool = False
    qextractor: QuantizedExtractor | None = field(default=None, repr=False)

    def branch(self, name: str) -> ParamGroup:
        return self.nm_weights if name == "nm" else self.pred_weights

    def freeze_extractor(self) -> None:
        self.nm_weights.role = Role.FROZEN
        self.pred_weights.role = Role.FROZEN

    def extractor_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for grp in (self.nm_weights, self.pred_weights):
            for p in grp.params:
                h.update(p.data.tobytes())
        if self.qextractor is not None:
            for name in sorted(self.qextractor.weights):
                h.update(self.qextractor.weights[name].data.tobytes())
        return h.hexdigest()

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(config: ArchitectureConfig, rng: np.random.Generator) -> ModelState:
    """Fresh model with Kaiming-uniform weights and zero biases."""
    groups = {}
    k = config.kernel_size
    for branch in BRANCHES:
        params = []
        c_in = config.input_shape[0]
        for i, c_out in enumerate(config.branch_channels(branch)):
            fan_in = c_in * k * k
            params.append(Tensor(_kaiming_uniform(rng, (c_out, c_in, k, k), fan_in, np.sqrt(2.0)), f"{branch}.conv{i}.weight"))
            params.append(Tensor(np.zeros(c_out, np.float32), f"{branch}.conv{i}.bias"))
            c_in = c_out
        groups[branch] = ParamGroup(params, Role.SLOW)
    d = config.latent_dim
    clf = ParamGroup(
        [
            Tensor(_kaiming_uniform(rng, (config.num_classes_max, d), d, 1.0), "classifier.weight"),
            Tensor(np.zeros(config.num_classes_max, np.float32), "classifier.bias"),
        ],
        Role.SLOW,
    )
    return ModelState(config, groups["nm"], groups["pred"], clf)


# ---------------------------------------------------------------------------
# f32 path


def _check_batch(model: ModelState, batch) -> Tensor:
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4 or tuple(batch.shape[1:]) != model.config.input_shape:
        raise ValidationError(f"batch shape {batch.shape} does not match [N, *{model.config.input_shape}]")
    return batch


def branch_forward(model: ModelState, branch: str, x: Tensor) -> Tensor:
    params = model.branch(branch).params
    cfg = model.config
    h = x
    for i in range(0, len(params), 2):
        h = relu(conv2d(h, params[i], params[i + 1], cfg.stride, cfg.padding))
    return h


def latent_forward(model: ModelState, batch) -> Tensor:
    """Differentiable f32 latent: flatten(relu(NM(x)) * relu(P(x)))."""
    x = _check_batch(model, batch)
    gate = branch_forward(model, "nm", x)
    feats = branch_forward(model, "pred", x)
    return flatten(mul(gate, feats))


def extract_latent(model: ModelState, batch) -> Tensor:
    """Latent activations [batch, latent_dim]; uses the int8 path once quantized."""
    if model.quantized:
        return infer_quantized_latent(model, batch)
    return latent_forward(model, batch)


def classify(model: ModelState, latent) -> Tensor:
    if not isinstance(latent, Tensor):
        latent = Tensor(latent)
    w, b = model.classifier.params
    if latent.data.ndim != 2 or latent.shape[1] != w.shape[1]:
        raise ValidationError(f"latent shape {latent.shape} does not match [batch, {w.shape[1]}]")
    return fc(latent, w, b)


# ---------------------------------------------------------------------------
# int8 path


def _calibration_ranges(model: ModelState, calibration: Iterable) -> dict[str, list[float]]:
    ranges: dict[str, list[float]] = {}

    def observe(key, arr):
        lo, hi = float(arr.min()), float(arr.max())
        if key in ranges:
            ranges[key][0] = min(ranges[key][0], lo)
            ranges[key][1] = max(ranges[key][1], hi)
        else:
            ranges[key] = [lo, hi]

    seen = 0
    for batch in calibration:
        x = _check_batch(model, batch)
        seen += x.shape[0]
        observe("input", x.data)
        outs = {}
        for branch in BRANCHES:
            params = model.branch(branch).params
            h = x
            for i in range(0, len(params), 2):
                h = relu(conv2d(h, params[i], params[i + 1], model.config.stride, model.config.padding))
                observe(f"{branch}.act{i // 2}", h.data)
            outs[branch] = h.data
        observe("gate", outs["nm"] * outs["pred"])
    if seen == 0:
        raise ValidationError("calibration data is empty")
    return ranges


def quantize_extractor(model: ModelState, calibration: Iterable) -> ModelState:
    """Return a new state whose extractor runs in int8; the classifier stays f32."""
    if model.quantized:
        raise StateError("model is already quantized")
    ranges = _calibration_ranges(model, calibration)
    weights, biases = {}, {}
    for branch in BRANCHES:
        for p in model.branch(branch).params:
            if p.name.endswith(".weight"):
                weights[p.name] = quantize_tensor(p.data)
            else:
                biases[p.name] = p.data.copy()
    acts = {key: choose_qparams(lo, hi) for key, (lo, hi) in ranges.items()}
    out = model.clone()
    out.quantized = True
    out.qextractor = QuantizedExtractor(weights, biases, acts)
    for grp, branch in ((out.nm_weights, "nm"), (out.pred_weights, "pred")):
        for p in grp.params:
            if p.name in weights:
                p.data = weights[p.name].dequantize()
        grp.role = Role.FROZEN
    return out


def _requantize(acc: np.ndarray, multiplier: float, out: QParams) -> np.ndarray:
    q = np.round(acc * multiplier) + out.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def quantized_conv_relu(
    q_in: np.ndarray,
    in_qp: QParams,
    qw: QuantizedTensor,
    bias: np.ndarray,
    out_qp: QParams,
    stride: int,
    padding: int,
) -> np.ndarray:
    """One int8 conv + ReLU layer: int32 accumulation, requantization to ``out_qp``.

    Products of int8 offsets summed in float64 are exact integers here
    (|term| < 2**16, far fewer than 2**37 terms), so the accumulator equals
    the int32 result bit for bit.
    """
    x = q_in.astype(np.float64) - in_qp.zero_point
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k, _, kh, kw = qw.shape
    cols, oh, ow = _im2col(x, kh, kw, stride)
    wmat = qw.data.astype(np.float64).reshape(k, -1) - qw.zero_point
    acc_scale = in_qp.scale * qw.scale
    bias_q = np.round(bias.astype(np.float64) / acc_scale)
    acc = cols @ wmat.T + bias_q
    q = _requantize(acc, acc_scale / out_qp.scale, out_qp)
    q = np.maximum(q, np.int8(np.clip(out_qp.zero_point, -128, 127)))
    n = q_in.shape[0]
    return q.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)


def infer_quantized_latent(model: ModelState, batch) -> Tensor:
    """Integer-arithmetic forward of both branches; the gated latent is dequantized to f32."""
    if not model.quantized or model.qextractor is None:
        raise StateError("infer_quantized_latent requires a quantized model")
    x = _check_batch(model, batch)
    qe = model.qextractor
    cfg = model.config
    in_qp = qe.activations["input"]
    q_x = quantize_array(x.data, in_qp)
    outs = {}
    for branch in BRANCHES:
        q, qp = q_x, in_qp
        for i in range(cfg.num_conv_layers):
            out_qp = qe.activations[f"{branch}.act{i}"]
            q = quantized_conv_relu(
                q, qp, qe.weights[f"{branch}.conv{i}.weight"], qe.biases[f"{branch}.conv{i}.bias"],
                out_qp, cfg.stride, cfg.padding,
            )
            qp = out_qp
        outs[branch] = (q, qp)
    (qa, pa), (qb, pb) = outs["nm"], outs["pred"]
    gate_qp = qe.activations["gate"]
    prod = (qa.astype(np.int64) - pa.zero_point) * (qb.astype(np.int64) - pb.zero_point)
    q_gate = _requantize(prod.astype(np.float64), pa.scale * pb.scale / gate_qp.scale, gate_qp)
    latent = (q_gate.astype(np.float64) - gate_qp.zero_point) * gate_qp.scale
    return Tensor(latent.reshape(latent.shape[0], -1))


# ---------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"LLCK"
CKPT_VERSION = 1
DTYPE_F32 = 0
DTYPE_I8 = 1


def write_checkpoint_records(records: list[tuple[str, np.ndarray | QuantizedTensor]]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    for name, value in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        if isinstance(value, QuantizedTensor):
            arr = np.ascontiguousarray(value.data, dtype=np.int8)
            buf.write(struct.pack("<BB", DTYPE_I8, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(struct.pack("<di", value.scale, value.zero_point))
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_checkpoint_records(blob: bytes) -> list[tuple[str, np.ndarray | QuantizedTensor]]:
    if blob[:4] != CKPT_MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version}")
    pos = 6
    records = []
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if dtype == DTYPE_I8:
                scale, zp = struct.unpack_from("<di", blob, pos)
                pos += 12
                data = np.frombuffer(blob, dtype=np.int8, count=count, offset=pos).reshape(dims).copy()
                pos += count
                records.append((name, QuantizedTensor(data, scale, zp)))
            elif dtype == DTYPE_F32:
                data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
                pos += 4 * count
                records.append((name, data))
            else:
                raise CorruptionError(f"unknown dtype tag {dtype} for record {name!r}")
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"truncated checkpoint at byte {pos}") from exc
    if pos != len(blob):
        raise CorruptionError("trailing bytes after last checkpoint record")
    return records


def model_records(model: ModelState) -> list[tuple[str, np.ndarray | QuantizedTensor]]:
    records: list = []
    qe = model.qextractor
    for grp in (model.nm_weights, model.pred_weights):
        for p in grp.params:
            if qe is not None and p.name in qe.weights:
                records.append((p.name, qe.weights[p.name]))
            else:
                records.append((p.name, p.data))
    for p in model.classifier.params:
        records.append((p.name, p.data))
    if qe is not None:
        # activation parameters ride along as empty int8 tensors
        for key in sorted(qe.activations):
            qp = qe.activations[key]
            records.append((f"quant.{key}", QuantizedTensor(np.zeros(0, np.int8), qp.scale, qp.zero_point)))
    return records


def model_from_records(config: ArchitectureConfig, records) -> ModelState:
    model = build_model(config, np.random.default_rng(0))
    table = dict(records)
    acts = {}
    weights = {}
    for name, value in table.items():
        if name.startswith("quant."):
            acts[name[len("quant."):]] = QParams(value.scale, value.zero_point)
    for grp in (model.nm_weights, model.pred_weights, model.classifier):
        for p in grp.params:
            if p.name not in table:
                raise CorruptionError(f"checkpoint lacks tensor {p.name!r}")
            value = table[p.name]
            if isinstance(value, QuantizedTensor):
                weights[p.name] = value
                value = value.dequantize()
            if value.shape != p.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=np.float32)
    if weights:
        biases = {p.name: p.data.copy() for grp in (model.nm_weights, model.pred_weights) for p in grp.params if p.name.endswith(".bias")}
        model.quantized = True
        model.qextractor = QuantizedExtractor(weights, biases, acts)
        model.freeze_extractor()
    return model


def save_model(model: ModelState, directory: str | Path, stem: str = "model") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stem}.llck"
    path.write_bytes(write_checkpoint_records(model_records(model)))
    (directory / f"{stem}.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory: str | Path, stem: str = "model") -> ModelState:
    directory = Path(directory)
    config = ArchitectureConfig.from_dict(json.loads((directory / f"{stem}.json").read_text()))
    return model_from_records(config, read_checkpoint_records((directory / f"{stem}.llck").read_bytes()))
