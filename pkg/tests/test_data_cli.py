import csv
import hashlib
import subprocess
import sys

import numpy as np
import pytest

from metareplay.cli import main
from metareplay.data import DatasetSpec, generate_synthetic, load_dataset, save_dataset
from metareplay.errors import ValidationError
from metareplay.presets import ExperimentPreset, apply_overrides, get_preset, preset_from_dict, preset_to_dict, read_config_file
from metareplay.reports import parse_kv

SPEC10 = dict(num_classes=10, samples_per_class_train=30, samples_per_class_test=10,
              meta_train_classes=tuple(range(7)), meta_test_classes=(7, 8, 9))


def digest(directory):
    h = hashlib.sha256()
    for name in sorted(p.name for p in directory.iterdir()):
        h.update(name.encode())
        h.update((directory / name).read_bytes())
    return h.hexdigest()


class TestDataset:
    def test_counts(self):
        ds = generate_synthetic(DatasetSpec(**SPEC10))
        assert len(ds) == 400
        assert np.bincount(ds.y_train).tolist() == [30] * 10

    def test_byte_identical_files(self, tmp_path):
        save_dataset(generate_synthetic(DatasetSpec(**SPEC10, seed=3)), tmp_path / "a")
        save_dataset(generate_synthetic(DatasetSpec(**SPEC10, seed=3)), tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_seed_changes_data(self):
        a = generate_synthetic(DatasetSpec(**SPEC10, seed=1))
        b = generate_synthetic(DatasetSpec(**SPEC10, seed=2))
        assert not np.array_equal(a.x_train, b.x_train)

    def test_overlapping_split_rejected(self):
        with pytest.raises(ValidationError):
            DatasetSpec(num_classes=5, meta_train_classes=(0, 1, 2), meta_test_classes=(2, 3))

    def test_request_beyond_available(self):
        ds = generate_synthetic(DatasetSpec(**SPEC10))
        with pytest.raises(ValidationError):
            ds.class_samples(0, "train", limit=31)

    def test_linear_probe_separates_blobs(self):
        # a ridge probe needs many samples per class to resolve 576-dim means
        spec = DatasetSpec(**{**SPEC10, "samples_per_class_train": 1000, "samples_per_class_test": 200}, separation=5.0)
        ds = generate_synthetic(spec)
        x = np.hstack([ds.x_train.reshape(len(ds.y_train), -1), np.ones((len(ds.y_train), 1))]).astype(np.float64)
        w = np.linalg.solve(x.T @ x + np.eye(x.shape[1]), x.T @ np.eye(10)[ds.y_train])
        xt = np.hstack([ds.x_test.reshape(len(ds.y_test), -1), np.ones((len(ds.y_test), 1))])
        assert np.mean(np.argmax(xt @ w, axis=1) == ds.y_test) >= 0.99

    def test_textures(self):
        spec = DatasetSpec(**SPEC10, source="synthetic-images", input_shape=(3, 16, 16))
        ds = generate_synthetic(spec)
        assert ds.x_train.shape == (300, 3, 16, 16)

    def test_directory_round_trip(self, tmp_path):
        ds = generate_synthetic(DatasetSpec(**SPEC10))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        np.testing.assert_array_equal(back.x_test, ds.x_test)
        assert back.spec == ds.spec


class TestPresets:
    def test_toy_is_valid(self):
        p = get_preset("toy")
        assert len(p.dataset.meta_test_classes) == 5
        assert p.cfg.replay_epochs == 2 and p.cfg.replay_batch == 8

    def test_unknown(self):
        with pytest.raises(ValidationError):
            get_preset("nope")

    def test_overrides(self):
        p = apply_overrides(get_preset("toy"), {"cfg.outer_steps": "7", "dataset.separation": "3.5", "codec.subvec_len": "16"})
        assert p.cfg.outer_steps == 7 and p.dataset.separation == 3.5 and p.codec.subvec_len == 16

    def test_bad_override(self):
        with pytest.raises(ValidationError):
            apply_overrides(get_preset("toy"), {"cfg.nothing": "1"})
        with pytest.raises(ValidationError):
            apply_overrides(get_preset("toy"), {"cfg.inner_steps": "0"})

    def test_config_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\ncfg.outer_steps = 3\n\n")
        assert read_config_file(tmp_path / "c.txt") == {"cfg.outer_steps": "3"}

    def test_sweep_values_positive(self):
        p = get_preset("toy")
        with pytest.raises(ValidationError):
            ExperimentPreset(p.name, p.dataset, p.arch, p.cfg, p.codec, {"subvec_len": (0, 8)})

    def test_dict_round_trip(self):
        p = get_preset("toy")
        assert preset_to_dict(preset_from_dict(preset_to_dict(p))) == preset_to_dict(p)


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mt")
    assert main(["meta-train", "--preset", "toy", "--outer-steps", "20", "--out", str(out)]) == 0
    return out


class TestCli:
    def test_deploy_writes_one_row_per_class(self, trained_dir, tmp_path):
        rc = main(["deploy", "--model-dir", str(trained_dir), "--classes", "5", "--samples-per-class", "30",
                   "--replay-epochs", "2", "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5
        assert list(rows[0]) == ["class_id", "train_acc", "test_acc_all_seen", "buffer_bytes"]
        kv = parse_kv((tmp_path / "report.txt").read_text())
        assert kv["config.cfg.outer_steps"] == "20"
        assert (tmp_path / "buffer.llrb").read_bytes()[:4] == b"LLRB"

    def test_deploy_is_deterministic(self, trained_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["deploy", "--model-dir", str(trained_dir), "--out", str(tmp_path / name)]) == 0

        def strip(path):
            return {k: v for k, v in parse_kv(path.read_text()).items() if k != "wall_time_s"}

        assert strip(tmp_path / "a" / "report.txt") == strip(tmp_path / "b" / "report.txt")
        assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()

    def test_quantized_deploy(self, trained_dir, tmp_path):
        assert main(["deploy", "--model-dir", str(trained_dir), "--quantize", "--classes", "2", "--out", str(tmp_path)]) == 0
        kv = parse_kv((tmp_path / "memory.txt").read_text())
        assert int(kv["quant_meta_bytes"]) == 12 * 6

    def test_report_memory(self, trained_dir, tmp_path):
        main(["deploy", "--model-dir", str(trained_dir), "--classes", "2", "--out", str(tmp_path / "d")])
        rc = main(["report-memory", "--model-dir", str(trained_dir), "--buffer", str(tmp_path / "d" / "buffer.llrb"),
                   "--out", str(tmp_path / "m")])
        assert rc == 0
        mem = parse_kv((tmp_path / "m" / "memory.txt").read_text())
        dep = parse_kv((tmp_path / "d" / "report.txt").read_text())
        assert mem["rehearsal_bytes"] == dep["buffer_bytes"]

    def test_bench_compress_thirty_x(self, tmp_path):
        rc = main(["bench-compress", "--sparsity", "0.9", "--subvec-len", "32", "--latent-dim", "2304", "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "bench_compress.csv") as fh:
            (row,) = list(csv.DictReader(fh))
        assert float(row["ratio"]) == pytest.approx(30, rel=0.1)
        assert int(row["compressed_bytes"]) == int(row["predicted_bytes"]) == 308

    def test_gen_data(self, tmp_path):
        assert main(["gen-data", "--preset", "toy", "--seed", "4", "--out", str(tmp_path)]) == 0
        ds = load_dataset(tmp_path)
        assert ds.spec.seed == 4

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["deploy"])
        assert exc.value.code == 2

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        assert main(["deploy", "--model-dir", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_class_count(self, trained_dir, tmp_path):
        assert main(["deploy", "--model-dir", str(trained_dir), "--classes", "9", "--out", str(tmp_path)]) == 1

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "metareplay.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "bench-compress" in proc.stdout
