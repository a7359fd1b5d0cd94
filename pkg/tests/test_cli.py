import json
import warnings

import numpy as np
import pytest

from densecl.cli import run
from densecl.config import SCHEMA, config_from_train, from_text, parse_config, resolve
from densecl.data import SynthSpec, generate_synthetic, ingest_folder, load_image, save_image
from densecl.errors import ConfigError, DataError

TINY = [
    "model.channels=8,16", "model.hidden_dim=32", "model.out_dim=16", "model.grid_size=4",
    "augment.out_size=16", "data.synth.n_images=16", "data.synth.image_size=24",
    "data.synth.n_classes=2", "train.batch_size=8", "train.epochs=1",
    "dictionary.global_size=32", "dictionary.dense_size=32", "eval.n_pairs=3",
    "eval.test_images=6", "eval.knn_k=1",
]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.txt").write_text("# nothing\n\n")
        cfg = parse_config(tmp_path / "c.txt")
        t = cfg.train
        assert t.loss.lam == 0.5 and t.loss.temperature == 0.2
        assert t.grid_size == 7 and t.key_momentum == 0.999
        assert t.global_queue_size == t.dense_queue_size == 4096
        assert t.model.channels == (32, 64, 128, 256)
        assert t.model.head.out_dim == 128

    def test_file_and_override_order(self, tmp_path):
        (tmp_path / "c.txt").write_text("loss.lambda = 0.2\nseed = 4  # comment\n")
        cfg = parse_config(tmp_path / "c.txt", ["loss.lambda=0.3"])
        assert cfg.train.loss.lam == 0.3 and cfg.train.seed == 4

    def test_out_of_range_names_key_and_range(self):
        with pytest.raises(ConfigError, match=r"loss\.lambda.*\[0, 1\]"):
            parse_config(None, ["loss.lambda=1.5"])

    def test_open_lower_bound(self):
        with pytest.raises(ConfigError, match=r"\(0, inf\)"):
            parse_config(None, ["loss.temperature=0"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            parse_config(None, ["loss.lamda=0.3"])

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="int"):
            parse_config(None, ["train.epochs=ten"])
        with pytest.raises(ConfigError):
            parse_config(None, ["loss.temperature=nan"])

    def test_choices(self):
        with pytest.raises(ConfigError, match="max_sim_f"):
            parse_config(None, ["match.strategy=nearest"])

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            resolve(["loss.lambda 0.3"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "none.txt")

    def test_text_round_trip(self):
        cfg = parse_config(None, ["loss.lambda=0.25", "model.residual=true"])
        again = from_text(cfg.text())
        assert again == cfg and again.values == cfg.values

    def test_config_from_train_round_trip(self):
        cfg = parse_config(None, ["loss.symmetric=yes", "model.channels=8,16"])
        assert config_from_train(cfg.train).train == cfg.train

    def test_every_default_in_range(self):
        values = resolve()
        assert set(values) == set(SCHEMA)
        from_text("".join(f"{k} = {v}\n" for k, v in values.items()))


@pytest.fixture
def folder(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    rng = np.random.default_rng(0)
    for name in ("b.ppm", "a.ppm", "c.ppm"):
        save_image(d / name, rng.uniform(size=(10, 12, 3)))
    (d / "labels.csv").write_text("filename,class\na.ppm,cat\nb.ppm,dog\nc.ppm,cat\n")
    return d


class TestIngest:
    def test_sorted_and_labeled(self, folder):
        ds = ingest_folder(folder)
        assert ds.names == ["a.ppm", "b.ppm", "c.ppm"]
        assert ds.class_names == ["cat", "dog"]
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])
        assert ds.images[0].shape == (10, 12, 3) and ds.images[0].dtype == np.float32
        np.testing.assert_array_equal(ds.images[1], load_image(folder / "b.ppm"))

    def test_corrupt_file_skipped(self, folder):
        (folder / "bad.ppm").write_bytes(b"P6 not really")
        (folder / "labels.csv").unlink()
        with pytest.warns(UserWarning, match="bad.ppm"):
            ds = ingest_folder(folder)
        assert len(ds) == 3 and ds.skipped == ["bad.ppm"] and not ds.labeled

    def test_missing_label(self, folder):
        (folder / "labels.csv").write_text("a.ppm,cat\n")
        with pytest.raises(DataError, match="b.ppm"):
            ingest_folder(folder)

    def test_empty_and_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            ingest_folder(tmp_path)
        with pytest.raises(DataError):
            ingest_folder(tmp_path / "nope")

    def test_save_load_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3)) / 255.0
        save_image(tmp_path / "x.png", img)
        np.testing.assert_allclose(load_image(tmp_path / "x.png"), img, atol=1e-6)


class TestSynthetic:
    def test_deterministic(self):
        spec = SynthSpec(n_images=6, image_size=16, n_classes=3, seed=2)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.labels, [0, 1, 2, 0, 1, 2])

    def test_offset_is_same_stream(self):
        spec = SynthSpec(n_images=8, image_size=16, n_classes=2)
        full = generate_synthetic(spec)
        tail = generate_synthetic(spec, offset=5, count=3)
        for x, y in zip(full.images[5:], tail.images):
            np.testing.assert_array_equal(x, y)

    def test_range_and_shape(self):
        ds = generate_synthetic(SynthSpec(n_images=4, image_size=20))
        for img in ds.images:
            assert img.shape == (20, 20, 3) and img.dtype == np.float32
            assert img.min() >= 0 and img.max() <= 1

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            SynthSpec(n_images=0)
        with pytest.raises(ConfigError):
            SynthSpec(image_size=4)


class TestCli:
    def test_inspect_defaults(self, capsys):
        assert run(["inspect", "--defaults"]) == 0
        out = capsys.readouterr().out
        assert "loss.lambda = 0.5" in out and "[0, 1]" in out
        assert len(out.splitlines()) == len(SCHEMA)

    def test_config_error_exit_2(self, tmp_path, capsys):
        code = run(["train", "--out", str(tmp_path), "--set", "loss.lambda=1.5"])
        assert code == 2
        assert "loss.lambda" in capsys.readouterr().err

    def test_data_error_exit_3(self, tmp_path):
        code = run(["train", "--out", str(tmp_path / "o"), "--data-dir", str(tmp_path / "x")]
                   + _sets(TINY))
        assert code == 3

    def test_storage_error_exit_5(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run(["train", "--out", str(blocker / "o")] + _sets(TINY)) == 5

    def test_bad_checkpoint_exit_5(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage-garbage")
        code = run(["eval-corr", "--out", str(tmp_path), "--ckpt", str(tmp_path / "x.ckpt")]
                   + _sets(TINY))
        assert code == 5

    def test_bad_threads_env(self, monkeypatch):
        monkeypatch.setenv("DCL_THREADS", "many")
        assert run(["inspect", "--defaults"]) == 2

    def test_pipeline(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DCL_THREADS", "1")
        out = tmp_path / "run"
        assert run(["train", "--out", str(out)] + _sets(TINY)) == 0
        assert (out / "final.ckpt").exists() and (out / "metrics.csv").exists()
        eff = from_text((out / "effective_config.txt").read_text())
        assert eff.train.model.channels == (8, 16) and eff.train.epochs == 1
        ckpt = str(out / "final.ckpt")

        assert run(["inspect", ckpt]) == 0
        listing = capsys.readouterr().out
        assert "queue/global" in listing and "f32" in listing

        assert run(["eval-corr", "--out", str(out), "--ckpt", ckpt] + _sets(TINY)) == 0
        corr = json.loads((out / "eval_corr.json").read_text())
        assert 0 <= corr["correspondence_accuracy"] <= 1 and corr["num_images"] == 16
        assert corr["n_queries"] == round(3 * corr["mean_valid_matches"]) <= 3 * 16

        assert run(["eval-knn", "--out", str(out), "--ckpt", ckpt] + _sets(TINY)) == 0
        knn = json.loads((out / "eval_knn.json").read_text())
        assert 0 <= knn["knn_accuracy"] <= 1 and knn["num_images"] == 16 + 6

        img = tmp_path / "one.png"
        save_image(img, generate_synthetic(SynthSpec(1, 24)).images[0])
        assert run(["visualize", "--out", str(out), "--ckpt", ckpt, "--image", str(img),
                    "--threshold", "-1"] + _sets(TINY)) == 0
        assert (out / "one_matches.png").exists()
        rows = (out / "one_matches.csv").read_text().splitlines()
        assert len(rows) >= 2

        # resuming a finished run is a no-op; warm start trains again
        assert run(["train", "--out", str(out), "--ckpt", ckpt, "--resume"] + _sets(TINY)) == 0
        warm = tmp_path / "warm"
        assert run(["train", "--out", str(warm), "--init", ckpt]
                   + _sets(TINY + ["loss.lambda=1.0"])) == 0
        assert (warm / "final.ckpt").exists()

    def test_grid_mismatch_on_eval(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train", "--out", str(out)] + _sets(TINY)) == 0
        code = run(["eval-corr", "--out", str(out), "--ckpt", str(out / "final.ckpt")]
                   + _sets(TINY + ["model.grid_size=3"]))
        assert code == 2

    def test_knn_needs_labels(self, tmp_path, folder):
        out = tmp_path / "run"
        (folder / "labels.csv").unlink()
        assert run(["train", "--out", str(out)] + _sets(TINY)) == 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = run(["eval-knn", "--out", str(out), "--ckpt", str(out / "final.ckpt"),
                        "--data-dir", str(folder)] + _sets(TINY))
        assert code == 3
