import numpy as np
import pytest

from metareplay.compression import BitmapCodec, RawCodec, make_codec, pq_train
from metareplay.errors import CapacityError, ConfigError, CorruptionError, ValidationError
from metareplay.replay import ReplayBuffer


def latents(rng, count, n=64, sparsity=0.8):
    x = np.abs(rng.standard_normal((count, n))).astype(np.float32)
    x[rng.random((count, n)) < sparsity] = 0
    return x


@pytest.fixture(scope="module")
def codebook():
    rng = np.random.default_rng(0)
    return pq_train([r[r != 0] for r in latents(rng, 400)], 4, 16, 25, seed=0)


class TestStore:
    def test_capacity(self):
        buf = ReplayBuffer(RawCodec(), capacity_per_class=2)
        buf.add_latents(np.ones((2, 4), np.float32), 0)
        with pytest.raises(CapacityError):
            buf.add_latents(np.ones((1, 4), np.float32), 0)
        buf.add_latents(np.ones((2, 4), np.float32), 1)
        assert len(buf) == 4 and buf.num_classes == 2

    def test_bad_capacity(self):
        with pytest.raises(ValidationError):
            ReplayBuffer(RawCodec(), capacity_per_class=0)

    @pytest.mark.parametrize("codec", ["bitmap", "raw", "bitpq"])
    def test_byte_accounting(self, codec, codebook):
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(make_codec(codec, codebook), 30)
        for c in range(4):
            buf.add_latents(latents(rng, 7), c)
            assert buf.byte_size == buf.recount() == sum(s.nbytes for s in buf.samples())

    def test_decompress_order_and_labels(self):
        buf = ReplayBuffer(BitmapCodec())
        a = np.array([[1, 0, 2, 0]], np.float32)
        b = np.array([[0, 3, 0, 0]], np.float32)
        buf.add_latents(a, 5)
        buf.add_latents(b, 2)
        lat, y = buf.decompress_all()
        np.testing.assert_array_equal(lat, np.concatenate([a, b]))
        np.testing.assert_array_equal(y, [5, 2])

    def test_empty_buffer(self):
        lat, y = ReplayBuffer(RawCodec()).decompress_all()
        assert lat.shape[0] == 0 and y.size == 0


class TestDraw:
    def test_batch_covering_buffer_returns_everything_once(self):
        buf = ReplayBuffer(RawCodec())
        data = np.arange(20, dtype=np.float32).reshape(10, 2)
        for i, row in enumerate(data):
            buf.add_latents(row[None], i % 3)
        lat, _ = buf.draw_replay_batch(10, np.random.default_rng(0))
        assert sorted(map(tuple, lat)) == sorted(map(tuple, data))
        lat, _ = buf.draw_replay_batch(50, np.random.default_rng(0))
        assert len(lat) == 10

    def test_uniform_over_samples(self):
        buf = ReplayBuffer(RawCodec(), capacity_per_class=20)
        for i in range(20):
            buf.add_latents(np.array([[float(i)]], np.float32), i % 4)
        rng = np.random.default_rng(2)
        counts = np.zeros(20)
        draws = 8000
        for _ in range(draws // 4):
            lat, _ = buf.draw_replay_batch(4, rng)
            counts[lat[:, 0].astype(int)] += 1
        expected = draws / 20
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 43.82  # chi-square critical value, 19 dof, p = 0.001

    def test_empty_draw(self):
        lat, y = ReplayBuffer(RawCodec()).draw_replay_batch(8, np.random.default_rng(0))
        assert len(y) == 0


class TestPersistence:
    def test_bitpq_round_trip(self, codebook, tmp_path):
        rng = np.random.default_rng(3)
        buf = ReplayBuffer(make_codec("bitpq", codebook), 10)
        for c in range(3):
            buf.add_latents(latents(rng, 5), c)
        buf.save(tmp_path / "b.llrb")
        back = ReplayBuffer.load(tmp_path / "b.llrb", make_codec("bitpq", codebook))
        assert back.to_bytes() == buf.to_bytes()
        assert back.byte_size == buf.byte_size
        np.testing.assert_array_equal(back.decompress_all()[0], buf.decompress_all()[0])

    def test_lossless_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        buf = ReplayBuffer(BitmapCodec(), 10)
        x = latents(rng, 6)
        buf.add_latents(x, 1)
        back = ReplayBuffer.from_bytes(buf.to_bytes(), BitmapCodec())
        np.testing.assert_array_equal(back.decompress_all()[0], x)

    def test_codec_mismatch(self, codebook):
        buf = ReplayBuffer(BitmapCodec())
        buf.add_latents(np.ones((1, 8), np.float32), 0)
        with pytest.raises(ConfigError):
            ReplayBuffer.from_bytes(buf.to_bytes(), make_codec("bitpq", codebook))

    def test_truncated(self):
        buf = ReplayBuffer(BitmapCodec())
        buf.add_latents(np.ones((2, 8), np.float32), 0)
        with pytest.raises(CorruptionError):
            ReplayBuffer.from_bytes(buf.to_bytes()[:-2], BitmapCodec())

    def test_raw_has_no_file_format(self):
        with pytest.raises(ConfigError):
            ReplayBuffer(RawCodec()).to_bytes()
