import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metareplay.compression import (
    BITMAP_HEADER_BYTES,
    BitmapCompressed,
    PQCodebook,
    PQEncoded,
    bitmap_compress,
    bitmap_decompress,
    compress,
    compressed_sample_size,
    decompress,
    kmeans,
    load_codebook,
    make_codec,
    pq_decode,
    pq_encode,
    pq_train,
    save_codebook,
)
from metareplay.errors import ConfigError, CorruptionError, TrainingError, ValidationError


def sparse_vector(rng, n, sparsity):
    v = rng.standard_normal(n).astype(np.float32)
    v[rng.random(n) < sparsity] = 0.0
    return v


class TestBitmap:
    def test_example(self):
        c = bitmap_compress(np.array([0, 1.5, 0, 0, 2.0, 0, 0, 0], np.float32))
        assert c.bits() == "01001000"
        np.testing.assert_array_equal(c.nonzeros, [1.5, 2.0])
        assert c.nbytes == BITMAP_HEADER_BYTES + 1 + 8

    def test_all_zero(self):
        c = bitmap_compress(np.zeros(16, np.float32))
        assert c.nnz == 0 and c.bitmap.size == 2 and c.nbytes == BITMAP_HEADER_BYTES + 2

    def test_negative_zero_survives(self):
        x = np.array([-0.0, 0.0, 3.0], np.float32)
        out = bitmap_decompress(bitmap_compress(x))
        assert out.tobytes() == x.tobytes()

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            bitmap_compress(np.array([1.0, np.nan], np.float32))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 5000), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_round_trip_and_size(self, n, sparsity, seed):
        x = sparse_vector(np.random.default_rng(seed), n, sparsity)
        c = bitmap_compress(x)
        assert bitmap_decompress(c).tobytes() == x.tobytes()
        blob = c.to_bytes()
        assert len(blob) == BITMAP_HEADER_BYTES + math.ceil(n / 8) + 4 * int(np.count_nonzero(x))
        assert bitmap_decompress(BitmapCompressed.from_bytes(blob)).tobytes() == x.tobytes()

    def test_corrupt_length(self):
        blob = bitmap_compress(np.ones(9, np.float32)).to_bytes()
        with pytest.raises(CorruptionError):
            BitmapCompressed.from_bytes(blob[:-1])

    def test_popcount_mismatch(self):
        c = bitmap_compress(np.ones(8, np.float32))
        with pytest.raises(CorruptionError):
            bitmap_decompress(BitmapCompressed(8, c.bitmap, c.nonzeros[:3]))


def reference_kmeans(x, k, iters, rng):
    """Loop-level k-means++ and Lloyd that consumes the generator in the same order."""
    n = len(x)

    def d2(a, b):
        return sum((float(p) - float(q)) ** 2 for p, q in zip(a, b))

    centers = [list(x[int(rng.integers(n))])]
    dist = [d2(p, centers[0]) for p in x]
    for _ in range(1, k):
        total = sum(dist)
        target = rng.random() * total
        acc, idx = 0.0, n - 1
        for i, v in enumerate(dist):
            acc += v
            if acc > target:
                idx = i
                break
        centers.append(list(x[idx]))
        dist = [min(dv, d2(p, centers[-1])) for dv, p in zip(dist, x)]

    def nearest(p):
        best, arg = math.inf, 0
        for j, c in enumerate(centers):
            d = d2(p, c)
            if d < best:
                best, arg = d, j
        return arg

    labels = [nearest(p) for p in x]
    for _ in range(iters):
        for j in range(k):
            members = [x[i] for i in range(n) if labels[i] == j]
            assert members, "oracle fixture must not produce empty clusters"
            centers[j] = [sum(float(m[d]) for m in members) / len(members) for d in range(x.shape[1])]
        new = [nearest(p) for p in x]
        if new == labels:
            break
        labels = new
    return np.array(centers), np.array(labels)


class TestKMeans:
    def test_well_separated_fixed_point(self):
        pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], np.float64)
        centers, labels = kmeans(pts, 2, 25, np.random.default_rng(0))
        got = sorted(map(tuple, centers))
        assert got == [(0.0, 0.5), (10.0, 10.5)]
        assert labels[0] == labels[1] != labels[2] == labels[3]

    def test_single_centroid_is_mean(self):
        x = np.random.default_rng(1).standard_normal((50, 3))
        centers, _ = kmeans(x, 1, 25, np.random.default_rng(0))
        np.testing.assert_allclose(centers[0], x.mean(axis=0), atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = np.concatenate([rng.standard_normal((15, 2)) + off for off in ((0, 0), (6, 0), (0, 6), (6, 6))])
        ours, our_labels = kmeans(x, 4, 25, np.random.default_rng(seed))
        ref, ref_labels = reference_kmeans(x, 4, 25, np.random.default_rng(seed))
        np.testing.assert_allclose(ours, ref, atol=1e-9)
        np.testing.assert_array_equal(our_labels, ref_labels)

    def test_duplicate_points_no_empty_cluster(self):
        x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 10, axis=0)
        centers, labels = kmeans(x, 4, 25, np.random.default_rng(0))
        assert np.isfinite(centers).all()

    def test_deterministic(self):
        x = np.random.default_rng(2).standard_normal((200, 4))
        a = kmeans(x, 8, 25, np.random.default_rng(5))
        b = kmeans(x, 8, 25, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(3)
    vecs = [np.abs(rng.standard_normal(int(rng.integers(20, 40)))) for _ in range(600)]
    return vecs, pq_train(vecs, 8, 32, 25, seed=0)


class TestPQ:
    def test_codebook_shape(self, trained):
        _, cb = trained
        assert cb.subvec_len == 8 and cb.num_centroids == 32 and cb.columns == 5

    def test_encode_is_brute_force_argmin(self, trained):
        vecs, cb = trained
        rng = np.random.default_rng(4)
        for _ in range(50):
            v = np.abs(rng.standard_normal(int(rng.integers(1, 45))))
            enc = pq_encode(cb, v)
            padded = np.zeros(len(enc.indices) * 8)
            padded[: v.size] = v
            for j, idx in enumerate(enc.indices):
                cents = cb.column(j).astype(np.float64)
                d = [float(np.sum((c - padded[j * 8:(j + 1) * 8]) ** 2)) for c in cents]
                assert idx == int(np.argmin(d))

    def test_centroid_vectors_reconstruct_exactly(self, trained):
        _, cb = trained
        rng = np.random.default_rng(5)
        for _ in range(20):
            picks = rng.integers(0, cb.num_centroids, cb.columns)
            v = np.concatenate([cb.column(j)[i] for j, i in enumerate(picks)])
            np.testing.assert_array_equal(pq_decode(cb, pq_encode(cb, v)), v)

    def test_decode_example(self):
        cb = PQCodebook(2, np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8]]], np.float32))
        np.testing.assert_array_equal(pq_decode(cb, PQEncoded(np.array([1, 0], np.uint8), 3, 2)), [3, 4, 5])

    def test_decode_bad_index(self):
        cb = PQCodebook(2, np.zeros((1, 2, 2), np.float32))
        with pytest.raises(CorruptionError):
            pq_decode(cb, PQEncoded(np.array([5], np.uint8), 2, 2))

    def test_decode_wrong_subvec_len(self):
        cb = PQCodebook(2, np.zeros((1, 2, 2), np.float32))
        with pytest.raises(ConfigError):
            pq_decode(cb, PQEncoded(np.array([0], np.uint8), 4, 4))

    def test_too_few_vectors(self):
        with pytest.raises(TrainingError, match="column 0"):
            pq_train([np.ones(4)] * 3, 2, 8)

    def test_invalid_k(self):
        with pytest.raises(ValidationError):
            pq_train([np.ones(4)] * 300, 2, 300)

    def test_held_out_error_close_to_training_error(self):
        rng = np.random.default_rng(6)
        centres = rng.standard_normal((8, 16)) * 3

        def draw(count):
            return [centres[rng.integers(8)] + 0.1 * rng.standard_normal(16) for _ in range(count)]

        train, test = draw(1000), draw(300)
        cb = pq_train(train, 8, 16, 25, seed=1)

        def mse(vs):
            return float(np.mean([np.mean((pq_decode(cb, pq_encode(cb, v)) - v) ** 2) for v in vs]))

        assert mse(test) <= 1.05 * mse(train)

    def test_codebook_file_round_trip(self, trained, tmp_path):
        _, cb = trained
        save_codebook(cb, tmp_path / "c.llpq")
        blob = (tmp_path / "c.llpq").read_bytes()
        assert blob[:4] == b"LLPQ" and len(blob) == 18 + 4 * cb.centroids.size
        back = load_codebook(tmp_path / "c.llpq")
        np.testing.assert_array_equal(back.centroids, cb.centroids)
        with pytest.raises(CorruptionError):
            PQCodebook.from_bytes(blob[:-4])


class TestPipeline:
    def test_size_formula(self, trained):
        _, cb = trained
        x = np.zeros(100, np.float32)
        x[::4] = 1.0
        s = compress(x, cb, 3)
        assert s.nbytes == compressed_sample_size(100, 25, 8) == 12 + 13 + 4

    def test_thirty_x_case(self):
        n, nnz, L = 2304, 230, 32
        assert 4 * n / compressed_sample_size(n, nnz, L) == pytest.approx(29.92, abs=0.01)

    def test_ratio_monotone_in_sparsity(self):
        ratios = [4 * 2304 / compressed_sample_size(2304, int((1 - s) * 2304), 32) for s in (0.5, 0.7, 0.9, 0.95)]
        assert ratios == sorted(ratios)

    def test_ratio_monotone_in_subvec_len(self):
        ratios = [4 * 2304 / compressed_sample_size(2304, 230, L) for L in (8, 32, 128)]
        assert ratios == sorted(ratios)

    def test_round_trip_keeps_zeros(self, trained):
        _, cb = trained
        x = np.zeros(64, np.float32)
        x[[1, 5, 9, 40]] = [0.5, 1.0, 0.2, 2.0]
        out = decompress(compress(x, cb, 0), cb)
        assert set(np.flatnonzero(out)) <= {1, 5, 9, 40}

    def test_unknown_codec(self):
        with pytest.raises(ValidationError):
            make_codec("zip")

    def test_bitpq_needs_codebook(self):
        with pytest.raises(ConfigError):
            make_codec("bitpq")
