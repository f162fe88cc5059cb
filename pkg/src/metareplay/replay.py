"""Per-class store of compressed rehearsal latents with exact byte accounting."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .compression import (
    BitmapCodec,
    BitmapCompressed,
    BitPQCodec,
    CompressedSample,
    BitmapSample,
    PQEncoded,
    sample_to_record,
)
from .errors import CapacityError, ConfigError, CorruptionError, ValidationError

RB_MAGIC = b"LLRB"
RB_VERSION = 1


class ReplayBuffer:
    def __init__(self, codec, capacity_per_class: int = 30):
        if capacity_per_class < 1:
            raise ValidationError(f"capacity_per_class must be >= 1, got {capacity_per_class}")
        self.codec = codec
        self.capacity_per_class = capacity_per_class
        self.per_class: OrderedDict[int, list] = OrderedDict()
        self.byte_size = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    def samples(self) -> list:
        return [s for bucket in self.per_class.values() for s in bucket]

    def recount(self) -> int:
        return sum(s.nbytes for s in self.samples())

    def store(self, sample) -> None:
        label = int(sample.label)
        if label < 0:
            raise ValidationError(f"invalid label {label}")
        bucket = self.per_class.setdefault(label, [])
        if len(bucket) >= self.capacity_per_class:
            raise CapacityError(f"class {label} already holds {self.capacity_per_class} samples")
        bucket.append(sample)
        self.byte_size += sample.nbytes

    def add_latents(self, latents: np.ndarray, label: int) -> None:
        for row in np.asarray(latents):
            self.store(self.codec.encode(row, label))

    def decompress_all(self) -> tuple[np.ndarray, np.ndarray]:
        """Every stored sample decoded, in insertion order."""
        items = self.samples()
        if not items:
            return np.zeros((0, 0), np.float32), np.zeros(0, np.int64)
        lat = np.stack([self.codec.decode(s) for s in items]).astype(np.float32)
        return lat, np.array([s.label for s in items], dtype=np.int64)

    def draw_replay_batch(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw without replacement across all stored samples."""
        items = self.samples()
        if not items:
            return np.zeros((0, 0), np.float32), np.zeros(0, np.int64)
        take = min(batch_size, len(items))
        idx = rng.choice(len(items), size=take, replace=False)
        lat = np.stack([self.codec.decode(items[i]) for i in idx]).astype(np.float32)
        return lat, np.array([items[i].label for i in idx], dtype=np.int64)

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        if isinstance(self.codec, BitPQCodec):
            L = self.codec.codebook.subvec_len
        elif isinstance(self.codec, BitmapCodec):
            L = 0  # lossless records carry raw f32 non-zeros
        else:
            raise ConfigError(f"codec {self.codec.name!r} has no buffer-file encoding")
        items = self.samples()
        header = RB_MAGIC + struct.pack("<HIII", RB_VERSION, L, self.capacity_per_class, len(items))
        return header + b"".join(sample_to_record(s) for s in items)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, codec) -> "ReplayBuffer":
        if blob[:4] != RB_MAGIC:
            raise CorruptionError("not a replay-buffer file (bad magic)")
        version, L, capacity, count = struct.unpack_from("<HIII", blob, 4)
        if version != RB_VERSION:
            raise CorruptionError(f"unsupported replay-buffer version {version}")
        if L == 0 and not isinstance(codec, BitmapCodec):
            raise ConfigError("file holds lossless records but codec is not bitmap")
        if L and not (isinstance(codec, BitPQCodec) and codec.codebook.subvec_len == L):
            raise ConfigError(f"file was written with sub-vector length {L}; codec does not match")
        buf = cls(codec, capacity)
        pos = 18
        try:
            for _ in range(count):
                label, n, d = struct.unpack_from("<III", blob, pos)
                pos += 12
                nb = (n + 7) // 8
                bitmap = np.frombuffer(blob, np.uint8, nb, pos).copy()
                pos += nb
                if L:
                    s = -(-d // L)
                    idx = np.frombuffer(blob, np.uint8, s, pos).copy()
                    pos += s
                    buf.store(CompressedSample(label, n, bitmap, PQEncoded(idx, d, L)))
                else:
                    vals = np.frombuffer(blob, "<f4", d, pos).astype(np.float32)
                    pos += 4 * d
                    buf.store(BitmapSample(label, BitmapCompressed(n, bitmap, vals)))
        except (struct.error, ValueError) as exc:
            raise CorruptionError(f"truncated replay-buffer file at byte {pos}") from exc
        if pos != len(blob):
            raise CorruptionError("trailing bytes after last replay-buffer record")
        return buf

    @classmethod
    def load(cls, path, codec) -> "ReplayBuffer":
        return cls.from_bytes(Path(path).read_bytes(), codec)
