"""Two-stage latent compression: sparse bitmap, then product quantization.

Stage one is lossless.  It drops every zero activation and keeps a presence
bitmap of ``ceil(n/8)`` bytes.  Stage two is lossy: the packed non-zero
vector is cut into sub-vectors of length ``L``, and each one becomes a 1-byte
index into a per-column centroid table.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, TrainingError, ValidationError

BITMAP_HEADER_BYTES = 8  # n u32, nnz u32
SAMPLE_HEADER_BYTES = 12  # label u32, n u32, d u32


# ---------------------------------------------------------------------------
# stage 1: sparse bitmap


@dataclass(frozen=True)
class BitmapCompressed:
    n: int
    bitmap: np.ndarray  # packed uint8, MSB first
    nonzeros: np.ndarray  # float32

    @property
    def nnz(self) -> int:
        return int(self.nonzeros.size)

    @property
    def nbytes(self) -> int:
        return BITMAP_HEADER_BYTES + self.bitmap.size + 4 * self.nnz

    def mask(self) -> np.ndarray:
        return np.unpackbits(self.bitmap, count=self.n).view(bool)

    def bits(self) -> str:
        return "".join("1" if b else "0" for b in self.mask())

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<II", self.n, self.nnz)
            + self.bitmap.tobytes()
            + np.ascontiguousarray(self.nonzeros, dtype="<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BitmapCompressed":
        n, nnz = struct.unpack_from("<II", blob, 0)
        nb = (n + 7) // 8
        if len(blob) != BITMAP_HEADER_BYTES + nb + 4 * nnz:
            raise CorruptionError(f"bitmap record length {len(blob)} does not match n={n}, nnz={nnz}")
        bitmap = np.frombuffer(blob, np.uint8, nb, BITMAP_HEADER_BYTES).copy()
        vals = np.frombuffer(blob, "<f4", nnz, BITMAP_HEADER_BYTES + nb).astype(np.float32)
        return cls(n, bitmap, vals)


def _as_flat_f32(latent) -> np.ndarray:
    data = getattr(latent, "data", latent)
    return np.ascontiguousarray(data, dtype=np.float32).reshape(-1)


def nonzero_mask(flat: np.ndarray) -> np.ndarray:
    # bit pattern test, so a stored -0.0 survives the round trip
    return flat.view(np.uint32) != 0


def bitmap_compress(latent) -> BitmapCompressed:
    flat = _as_flat_f32(latent)
    if not np.isfinite(flat).all():
        raise ValidationError("latent contains non-finite values")
    mask = nonzero_mask(flat)
    return BitmapCompressed(flat.size, np.packbits(mask), flat[mask].copy())


def bitmap_decompress(c: BitmapCompressed) -> np.ndarray:
    mask = c.mask()
    count = int(np.count_nonzero(mask))
    if count != c.nnz:
        raise CorruptionError(f"bitmap popcount {count} != {c.nnz} stored non-zeros")
    out = np.zeros(c.n, dtype=np.float32)
    out[mask] = c.nonzeros
    return out


# ---------------------------------------------------------------------------
# k-means


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to uniform picks once every point is covered."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkl,nkl->nk", diff, diff)


def assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest center per row; ties go to the lowest index."""
    out = np.empty(x.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(1, centers.size))
    for s in range(0, x.shape[0], step):
        out[s:s + step] = np.argmin(squared_distances(x[s:s + step], centers), axis=1)
    return out


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds.

    An empty cluster is re-seeded with the point of the largest cluster that
    lies farthest from that cluster's center.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = kmeans_pp_init(x, k, rng)
    labels = assign(x, centers)
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(((x[members] - centers[big]) ** 2).sum(axis=1))]
            centers[empty] = x[far]
            labels[far] = empty
            counts[big] -= 1
            counts[empty] = 1
        new_labels = assign(x, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


# ---------------------------------------------------------------------------
# stage 2: product quantization

PQ_MAGIC = b"LLPQ"
PQ_VERSION = 1


@dataclass(frozen=True)
class PQCodebook:
    subvec_len: int
    centroids: np.ndarray  # [columns, K, L] float32

    def __post_init__(self):
        if self.centroids.ndim != 3 or self.centroids.shape[2] != self.subvec_len:
            raise ValidationError(f"centroid table shape {self.centroids.shape} inconsistent with L={self.subvec_len}")
        if self.num_centroids > 256:
            raise ValidationError(f"{self.num_centroids} centroids do not fit a 1-byte index")

    @property
    def num_centroids(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def columns(self) -> int:
        return int(self.centroids.shape[0])

    def column(self, j: int) -> np.ndarray:
        # sub-vectors past the trained columns reuse the last column's table
        return self.centroids[min(j, self.columns - 1)]

    @property
    def nbytes(self) -> int:
        return self.centroids.size * 4

    def to_bytes(self) -> bytes:
        return (
            PQ_MAGIC
            + struct.pack("<HIII", PQ_VERSION, self.subvec_len, self.num_centroids, self.columns)
            + np.ascontiguousarray(self.centroids, dtype="<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PQCodebook":
        if blob[:4] != PQ_MAGIC:
            raise CorruptionError("not a codebook file (bad magic)")
        version, L, K, s = struct.unpack_from("<HIII", blob, 4)
        if version != PQ_VERSION:
            raise CorruptionError(f"unsupported codebook version {version}")
        expected = 18 + 4 * s * K * L
        if len(blob) != expected:
            raise CorruptionError(f"codebook length {len(blob)} != {expected}")
        data = np.frombuffer(blob, "<f4", s * K * L, 18).reshape(s, K, L).astype(np.float32)
        return cls(L, data)


def split_subvectors(v: np.ndarray, L: int) -> np.ndarray:
    """[ceil(d/L), L] view of ``v`` with the final partial sub-vector zero-padded."""
    d = v.size
    s = math.ceil(d / L)
    padded = np.zeros(s * L, dtype=np.float64)
    padded[:d] = v
    return padded.reshape(s, L)


def pq_train(
    latents: Sequence[np.ndarray],
    subvec_len: int,
    num_centroids: int = 256,
    iters: int = 25,
    seed: int | np.random.Generator = 0,
) -> PQCodebook:
    """Learn one centroid table per positional column of the packed non-zero vectors.

    Column ``j`` covers positions ``[j*L, (j+1)*L)``.  It trains on the
    sub-vectors of vectors long enough to reach it.  When fewer than ``K`` do,
    the column trains on every vector zero-padded to full width instead.
    """
    L, K = int(subvec_len), int(num_centroids)
    if L < 1:
        raise ValidationError(f"sub-vector length must be >= 1, got {L}")
    if not 1 <= K <= 256:
        raise ValidationError(f"number of centroids must be in [1, 256], got {K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in latents]
    if not vecs:
        raise TrainingError("column 0: no training vectors")
    lengths = np.array([v.size for v in vecs])
    s = max(1, math.ceil(int(lengths.max()) / L))
    table = np.zeros((len(vecs), s * L), dtype=np.float64)
    for i, v in enumerate(vecs):
        table[i, :v.size] = v
    table = table.reshape(len(vecs), s, L)
    centroids = np.empty((s, K, L), dtype=np.float32)
    for j in range(s):
        reach = lengths > j * L
        data = table[reach, j] if reach.sum() >= K else table[:, j]
        if data.shape[0] < K:
            raise TrainingError(f"column {j}: only {data.shape[0]} sub-vectors for {K} centroids")
        centers, _ = kmeans(data, K, iters, rng)
        centroids[j] = centers.astype(np.float32)
    return PQCodebook(L, centroids)


@dataclass(frozen=True)
class PQEncoded:
    indices: np.ndarray  # uint8, length ceil(d / L)
    original_len: int
    subvec_len: int

    @property
    def nbytes(self) -> int:
        return int(self.indices.size)


def pq_encode(codebook: PQCodebook, v) -> PQEncoded:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    L = codebook.subvec_len
    if v.size == 0:
        return PQEncoded(np.zeros(0, np.uint8), 0, L)
    subs = split_subvectors(v, L)
    idx = np.empty(subs.shape[0], dtype=np.uint8)
    for j, sub in enumerate(subs):
        cents = codebook.column(j).astype(np.float64)
        idx[j] = np.argmin(((cents - sub) ** 2).sum(axis=1))
    return PQEncoded(idx, v.size, L)


def pq_decode(codebook: PQCodebook, e: PQEncoded) -> np.ndarray:
    if e.subvec_len != codebook.subvec_len:
        raise ConfigError(f"encoding uses L={e.subvec_len}, codebook has L={codebook.subvec_len}")
    if e.indices.size and int(e.indices.max()) >= codebook.num_centroids:
        raise CorruptionError(f"index {int(e.indices.max())} >= {codebook.num_centroids} centroids")
    if e.indices.size != math.ceil(e.original_len / codebook.subvec_len):
        raise CorruptionError(f"{e.indices.size} indices cannot encode {e.original_len} values")
    if e.original_len == 0:
        return np.zeros(0, dtype=np.float32)
    parts = [codebook.column(j)[i] for j, i in enumerate(e.indices)]
    return np.concatenate(parts)[:e.original_len].astype(np.float32)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class CompressedSample:
    """Bitmap of non-zero positions plus PQ indices of the packed non-zeros."""

    label: int
    n: int
    bitmap: np.ndarray
    pq: PQEncoded

    @property
    def nbytes(self) -> int:
        return SAMPLE_HEADER_BYTES + self.bitmap.size + self.pq.nbytes


def compress(latent, codebook: PQCodebook, label: int) -> CompressedSample:
    bc = bitmap_compress(latent)
    return CompressedSample(int(label), bc.n, bc.bitmap, pq_encode(codebook, bc.nonzeros))


def decompress(sample: CompressedSample, codebook: PQCodebook) -> np.ndarray:
    vals = pq_decode(codebook, sample.pq)
    mask = np.unpackbits(sample.bitmap, count=sample.n).astype(bool)
    if int(mask.sum()) != sample.pq.original_len:
        raise CorruptionError(f"bitmap popcount {int(mask.sum())} != encoded length {sample.pq.original_len}")
    out = np.zeros(sample.n, dtype=np.float32)
    out[mask] = vals
    return out


def compressed_sample_size(n: int, nnz: int, subvec_len: int) -> int:
    return SAMPLE_HEADER_BYTES + math.ceil(n / 8) + math.ceil(nnz / subvec_len)


@dataclass(frozen=True)
class BitmapSample:
    """Lossless-only rehearsal record: bitmap plus raw f32 non-zeros."""

    label: int
    packed: BitmapCompressed

    @property
    def nbytes(self) -> int:
        return SAMPLE_HEADER_BYTES + self.packed.bitmap.size + 4 * self.packed.nnz


@dataclass(frozen=True)
class RawSample:
    label: int
    data: np.ndarray

    @property
    def nbytes(self) -> int:
        return SAMPLE_HEADER_BYTES + 4 * self.data.size


class BitPQCodec:
    name = "bitpq"

    def __init__(self, codebook: PQCodebook):
        self.codebook = codebook

    def encode(self, latent, label: int) -> CompressedSample:
        return compress(latent, self.codebook, label)

    def decode(self, sample: CompressedSample) -> np.ndarray:
        return decompress(sample, self.codebook)


class BitmapCodec:
    name = "bitmap"

    def encode(self, latent, label: int) -> BitmapSample:
        return BitmapSample(int(label), bitmap_compress(latent))

    def decode(self, sample: BitmapSample) -> np.ndarray:
        return bitmap_decompress(sample.packed)


class RawCodec:
    name = "raw"

    def encode(self, latent, label: int) -> RawSample:
        return RawSample(int(label), _as_flat_f32(latent).copy())

    def decode(self, sample: RawSample) -> np.ndarray:
        return sample.data.copy()


def make_codec(name: str, codebook: PQCodebook | None = None):
    if name == "bitpq":
        if codebook is None:
            raise ConfigError("the bitpq codec needs a trained codebook")
        return BitPQCodec(codebook)
    if name == "bitmap":
        return BitmapCodec()
    if name == "raw":
        return RawCodec()
    raise ValidationError(f"unknown codec {name!r} (expected bitpq, bitmap or raw)")


def save_codebook(codebook: PQCodebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook.to_bytes())


def load_codebook(path) -> PQCodebook:
    with open(path, "rb") as fh:
        return PQCodebook.from_bytes(fh.read())


def sample_to_record(sample) -> bytes:
    """One replay-buffer record: label, n, d, bitmap bytes, then index bytes (or raw f32)."""
    buf = io.BytesIO()
    if isinstance(sample, CompressedSample):
        buf.write(struct.pack("<III", sample.label, sample.n, sample.pq.original_len))
        buf.write(sample.bitmap.tobytes())
        buf.write(sample.pq.indices.tobytes())
    elif isinstance(sample, BitmapSample):
        p = sample.packed
        buf.write(struct.pack("<III", sample.label, p.n, p.nnz))
        buf.write(p.bitmap.tobytes())
        buf.write(np.ascontiguousarray(p.nonzeros, dtype="<f4").tobytes())
    else:
        raise ConfigError(f"{type(sample).__name__} records have no buffer-file encoding")
    return buf.getvalue()
