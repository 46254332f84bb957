import json

import numpy as np
import pytest

from scripts.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, RunManifest
from scripts.mambahsi import main
from services.checkpoint import load_checkpoint
from services.mamba_hsi import init_params
from services.scene_io import load_scene, scene_summary

SMALL_MODEL = ["--embed-dim", "8", "--spectral-groups", "2", "--d-state", "4", "--d-conv", "3", "--gn-groups", "2",
               "--lr", "0.01", "--seed", "3"]


@pytest.fixture
def scene_path(tmp_path):
    path = str(tmp_path / "s.hsc")
    assert main(["synth", "--h", "8", "--w", "8", "--c", "6", "--k", "3", "--sigma", "0.05", "--seed", "1",
                 "--out", path]) == EXIT_OK
    assert main(["split", "--scene", path, "--n-train", "3", "--n-val", "2", "--seed", "1"]) == EXIT_OK
    return path


@pytest.fixture
def checkpoint_path(tmp_path, scene_path):
    path = str(tmp_path / "m.mhsw")
    assert main(["train", "--scene", scene_path, "--out", path, "--epochs", "3", *SMALL_MODEL]) == EXIT_OK
    return path


class TestSynthAndSplit:

    def test_synth_is_byte_stable(self, tmp_path):
        args = ["synth", "--h", "32", "--w", "32", "--c", "16", "--k", "3", "--sigma", "0.05", "--seed", "1"]
        assert main(args + ["--out", str(tmp_path / "a.hsc")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b.hsc")]) == EXIT_OK
        assert (tmp_path / "a.hsc").read_bytes() == (tmp_path / "b.hsc").read_bytes()
        assert load_scene(str(tmp_path / "a.hsc")).labels.shape == (32, 32)

    def test_synth_rejects_too_many_classes(self, tmp_path):
        code = main(["synth", "--h", "8", "--w", "8", "--c", "16", "--k", "9", "--out", str(tmp_path / "x.hsc")])
        assert code == EXIT_DATA
        assert not (tmp_path / "x.hsc").exists()

    def test_split_defaults(self, tmp_path):
        path = str(tmp_path / "s.hsc")
        main(["synth", "--h", "32", "--w", "32", "--c", "8", "--k", "3", "--out", path])
        assert main(["split", "--scene", path]) == EXIT_OK
        for row in scene_summary(load_scene(path)):
            if row["total"] >= 41:
                assert (row["train"], row["val"], row["test"]) == (30, 10, row["total"] - 40)

    def test_split_all_test(self, scene_path):
        assert main(["split", "--scene", scene_path, "--n-train", "0", "--n-val", "0"]) == EXIT_OK
        scene = load_scene(scene_path)
        assert not scene.train_mask.any() and np.array_equal(scene.test_mask, scene.labels > 0)

    def test_summary_prints_table(self, scene_path, capsys):
        assert main(["summary", "--scene", scene_path]) == EXIT_OK
        assert "合计" in capsys.readouterr().out


class TestUsage:

    @pytest.mark.parametrize("argv", [
        [],
        ["split", "--scene", "s.hsc", "--bogus", "1"],
        ["synth", "--h", "8"],
        ["synth", "--h", "x", "--w", "8", "--c", "4", "--k", "2", "--out", "a"],
        ["bench", "--sizes", ",", "--out", "b.csv"],
        ["eval", "--scene", "s", "--checkpoint", "c", "--mask", "all"],
        ["split", "--sce", "s.hsc"],
        ["launch"],
    ])
    def test_usage_errors_exit_1(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_missing_scene_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "missing.hsc")
        assert main(["train", "--scene", missing, "--out", str(tmp_path / "m.mhsw")]) == EXIT_DATA
        assert missing in capsys.readouterr().out


class TestTrain:

    def test_zero_epochs_writes_initialization(self, tmp_path, scene_path):
        out = str(tmp_path / "init.mhsw")
        assert main(["train", "--scene", scene_path, "--out", out, "--epochs", "0", *SMALL_MODEL]) == EXIT_OK
        cfg, params = load_checkpoint(out)
        assert cfg.epochs == 0 and cfg.embed_dim == 8
        expected = init_params(cfg).state_dict()
        for name, value in params.state_dict().items():
            assert np.array_equal(value, expected[name])
        manifest = RunManifest.load(out + ".manifest.json")
        assert manifest.history == [] and manifest.seed == 3

    def test_identical_runs_are_byte_identical(self, tmp_path, scene_path):
        for name in ("a", "b"):
            assert main(["train", "--scene", scene_path, "--out", str(tmp_path / f"{name}.mhsw"),
                         "--manifest", str(tmp_path / f"{name}.json"), "--epochs", "3", *SMALL_MODEL]) == EXIT_OK
        assert (tmp_path / "a.mhsw").read_bytes() == (tmp_path / "b.mhsw").read_bytes()
        a = json.loads((tmp_path / "a.json").read_text(encoding="utf-8"))
        b = json.loads((tmp_path / "b.json").read_text(encoding="utf-8"))
        assert a["history"] == b["history"] and len(a["history"]) == 3
        assert a["final_metrics"] == b["final_metrics"]

    def test_ablation_flags_and_repeated_runs(self, tmp_path, scene_path):
        out = str(tmp_path / "sum.mhsw")
        assert main(["train", "--scene", scene_path, "--out", out, "--epochs", "2", "--fusion", "sum",
                     "--branches", "both", "--runs", "2", "--n-train", "3", "--n-val", "2", *SMALL_MODEL]) == EXIT_OK
        cfg, _ = load_checkpoint(out)
        assert cfg.fusion == "sum"
        repeated = RunManifest.load(out + ".manifest.json").repeated
        assert repeated["seeds"] == [3, 4] and len(repeated["runs"]) == 2
        assert set(repeated["aggregate"]) == {"oa", "aa", "kappa"}

    def test_sweep_writes_one_row_per_value(self, tmp_path, scene_path):
        out = str(tmp_path / "g.mhsw")
        assert main(["train", "--scene", scene_path, "--out", out, "--epochs", "1", "--runs", "2",
                     "--n-train", "3", "--n-val", "2", "--sweep", "spectral_groups=1,2", *SMALL_MODEL]) == EXIT_OK
        swept = RunManifest.load(out + ".manifest.json").sweep
        assert swept["param"] == "spectral_groups" and swept["seeds"] == [3, 4]
        assert [row["value"] for row in swept["rows"]] == [1, 2]
        for row in swept["rows"]:
            assert set(row["aggregate"]) == {"oa", "aa", "kappa"} and len(row["runs"]) == 2

    @pytest.mark.parametrize("sweep_arg, code", [("spectral_groups", EXIT_USAGE), ("=1,2", EXIT_USAGE),
                                                ("spectral_groups=3", EXIT_DATA), ("lr=1", EXIT_DATA)])
    def test_bad_sweep(self, tmp_path, scene_path, sweep_arg, code):
        out = tmp_path / "m.mhsw"
        assert main(["train", "--scene", scene_path, "--out", str(out), "--epochs", "1", "--sweep", sweep_arg,
                     *SMALL_MODEL]) == code
        assert not out.exists()

    def test_invalid_override_is_data_error(self, tmp_path, scene_path):
        assert main(["train", "--scene", scene_path, "--out", str(tmp_path / "m.mhsw"), "--epochs", "1",
                     "--fusion", "concat"]) == EXIT_DATA


class TestEvalAndPredict:

    def test_eval_writes_text_and_json(self, tmp_path, scene_path, checkpoint_path):
        out = str(tmp_path / "train.txt")
        assert main(["eval", "--scene", scene_path, "--checkpoint", checkpoint_path, "--mask", "train",
                     "--out", out]) == EXIT_OK
        text = (tmp_path / "train.txt").read_text(encoding="utf-8")
        assert text.startswith("oa = ")
        data = json.loads((tmp_path / "train.json").read_text(encoding="utf-8"))
        assert 0.0 <= data["oa"] <= 1.0

    def test_eval_band_mismatch(self, tmp_path, checkpoint_path):
        other = str(tmp_path / "other.hsc")
        main(["synth", "--h", "8", "--w", "8", "--c", "5", "--k", "3", "--out", other])
        main(["split", "--scene", other, "--n-train", "2", "--n-val", "1"])
        assert main(["eval", "--scene", other, "--checkpoint", checkpoint_path]) == EXIT_DATA

    def test_eval_empty_mask(self, tmp_path, scene_path, checkpoint_path):
        main(["split", "--scene", scene_path, "--n-train", "0", "--n-val", "0"])
        assert main(["eval", "--scene", scene_path, "--checkpoint", checkpoint_path, "--mask", "val"]) == EXIT_DATA

    def test_predict_map_dimensions_and_stability(self, tmp_path, scene_path, checkpoint_path):
        for name in ("a", "b"):
            assert main(["predict", "--scene", scene_path, "--checkpoint", checkpoint_path,
                         "--out", str(tmp_path / f"{name}.ppm")]) == EXIT_OK
        data = (tmp_path / "a.ppm").read_bytes()
        assert data == (tmp_path / "b.ppm").read_bytes()
        assert data.startswith(b"P6\n8 8\n255\n")
        assert len(data) == len(b"P6\n8 8\n255\n") + 8 * 8 * 3

    def test_predict_with_palette(self, tmp_path, scene_path, checkpoint_path):
        palette = tmp_path / "p.txt"
        palette.write_text("#FF0000\n0 255 0\n0 0 255\n", encoding="utf-8")
        out = str(tmp_path / "p.ppm")
        assert main(["predict", "--scene", scene_path, "--checkpoint", checkpoint_path, "--out", out,
                     "--palette", str(palette), "--mask-unlabeled"]) == EXIT_OK
        body = (tmp_path / "p.ppm").read_bytes()[len(b"P6\n8 8\n255\n"):]
        colors = {body[i:i + 3] for i in range(0, len(body), 3)}
        assert colors <= {b"\x00\x00\x00", b"\xff\x00\x00", b"\x00\xff\x00", b"\x00\x00\xff"}


class TestBenchAndImport:

    def test_bench_rows(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--sizes", "2,4", "--variant", "mamba", "--repeats", "1", "--out", str(out),
                     *SMALL_MODEL]) == EXIT_OK
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "variant,H,W,L,gflops_model,seconds" and len(lines) == 3

    def test_bench_attention_cap(self, tmp_path):
        out = tmp_path / "attn.csv"
        assert main(["bench", "--sizes", "2,5", "--variant", "self_attention", "--attention-cap", "3",
                     "--repeats", "1", "--out", str(out), *SMALL_MODEL]) == EXIT_OK
        assert out.read_text(encoding="utf-8").splitlines()[-1].endswith(",skipped")

    def test_import_raw(self, tmp_path, rng):
        cube = rng.standard_normal((3, 4, 2)).astype("<f4")
        labels = np.array([[1, 2, 0, 1], [2, 2, 1, 0], [1, 1, 2, 2]], dtype="<u2")
        cube.tofile(tmp_path / "cube.f32")
        labels.tofile(tmp_path / "gt.u16")
        out = str(tmp_path / "imported.hsc")
        assert main(["import", "--cube", str(tmp_path / "cube.f32"), "--labels", str(tmp_path / "gt.u16"),
                     "--h", "3", "--w", "4", "--c", "2", "--out", out]) == EXIT_OK
        scene = load_scene(out)
        assert np.array_equal(scene.cube, cube) and np.array_equal(scene.labels, labels)

    def test_import_missing_file(self, tmp_path):
        assert main(["import", "--cube", str(tmp_path / "none"), "--labels", str(tmp_path / "none"),
                     "--h", "1", "--w", "1", "--c", "1", "--out", str(tmp_path / "x.hsc")]) == EXIT_DATA
