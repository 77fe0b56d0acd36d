import json
from pathlib import Path

import pytest

from staincycle.cli import run
from staincycle.data import SynthSpec


@pytest.fixture()
def spec_file(tmp_path):
    spec = SynthSpec(image_size=32, n_glands=1, nuclei_per_gland=(1, 2))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    return path


class TestSynth:
    def test_artifacts(self, tmp_path, spec_file):
        out = tmp_path / "ds"
        code = run(["--seed", "3", "synth", "--spec", str(spec_file), "--n", "3",
                    "--out", str(out)])
        assert code == 0
        assert (out / "manifest.json").is_file()
        assert (out / "run_metadata.json").is_file()
        pngs = sorted(p.name for p in out.glob("pair_0000_*.png"))
        assert pngs == ["pair_0000_he.png", "pair_0000_ihc.png",
                        "pair_0000_neg.png", "pair_0000_pos.png"]
        assert (out / "pair_0000_truth.json").is_file()
        meta = json.loads((out / "run_metadata.json").read_text())
        assert meta["seed"] == 3
        assert meta["config"]["n"] == 3

    def test_byte_identical_reruns(self, tmp_path, spec_file):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["--seed", "7", "synth", "--spec", str(spec_file), "--n", "2",
                        "--out", str(out)]) == 0
        for name in ("pair_0001_he.png", "pair_0001_ihc.png", "pair_0000_truth.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        # the manifest root records the output path, so compare entries only
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["entries"] == mb["entries"]

    def test_missing_spec(self, tmp_path):
        code = run(["synth", "--spec", str(tmp_path / "nope.json"), "--n", "1",
                    "--out", str(tmp_path / "o")])
        assert code != 0


class TestEdges:
    def test_edge_maps_written(self, tmp_path, spec_file):
        ds = tmp_path / "ds"
        assert run(["synth", "--spec", str(spec_file), "--n", "2", "--out", str(ds)]) == 0
        out = tmp_path / "edges"
        assert run(["edges", "--in", str(ds), "--out", str(out)]) == 0
        from PIL import Image
        import numpy as np
        files = sorted(out.glob("pair_*.png"))
        assert len(files) == 8  # he, ihc, pos, neg per pair
        arr = np.asarray(Image.open(files[0]))
        assert set(np.unique(arr)) <= {0, 255}

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        code = run(["edges", "--in", str(tmp_path / "empty"),
                    "--out", str(tmp_path / "out")])
        assert code == 2

    def test_invalid_thresholds(self, tmp_path, spec_file):
        ds = tmp_path / "ds"
        assert run(["synth", "--spec", str(spec_file), "--n", "1", "--out", str(ds)]) == 0
        code = run(["edges", "--in", str(ds), "--out", str(tmp_path / "o"),
                    "--low", "0.5", "--high", "0.2"])
        assert code == 2


class TestTrainCli:
    def _config_file(self, tmp_path):
        cfg = {"image_size": 32, "base_channels": 8, "n_res_blocks": 1,
               "disc_base_channels": 8, "disc_n_layers": 2,
               "batch_size": 2, "epochs": 1, "seed": 1}
        path = tmp_path / "train.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_missing_config_is_usage_error(self, tmp_path, spec_file):
        code = run(["train", "--config", str(tmp_path / "nope.json"),
                    "--synth", str(spec_file), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_both_data_sources_is_usage_error(self, tmp_path, spec_file):
        cfg = self._config_file(tmp_path)
        code = run(["train", "--config", str(cfg), "--synth", str(spec_file),
                    "--data", str(spec_file), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_neither_data_source_is_usage_error(self, tmp_path):
        cfg = self._config_file(tmp_path)
        code = run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_synth_training_end_to_end(self, tmp_path, spec_file):
        cfg = self._config_file(tmp_path)
        out = tmp_path / "run"
        code = run(["train", "--config", str(cfg), "--synth", str(spec_file),
                    "--synth-pairs", "4", "--out", str(out)])
        assert code == 0
        assert (out / "synth_data" / "manifest.json").is_file()
        assert (out / "loss_log.csv").is_file()
        assert (out / "loss_curves.png").is_file()
        assert (out / "checkpoints" / "final" / "index.json").is_file()
        assert (out / "run_metadata.json").is_file()

    def test_image_size_mismatch(self, tmp_path):
        cfg = self._config_file(tmp_path)
        spec = SynthSpec(image_size=64, n_glands=1, nuclei_per_gland=(1, 2))
        spath = tmp_path / "spec64.json"
        spath.write_text(json.dumps(spec.to_dict()))
        code = run(["train", "--config", str(cfg), "--synth", str(spath),
                    "--out", str(tmp_path / "o")])
        assert code == 1


class TestEvalCli:
    def test_self_evaluation(self, tmp_path, spec_file, capsys):
        ds = tmp_path / "ds"
        assert run(["synth", "--spec", str(spec_file), "--n", "3", "--out", str(ds)]) == 0
        gen = tmp_path / "gen"
        gen.mkdir()
        for p in ds.glob("*_ihc.png"):
            (gen / p.name).write_bytes(p.read_bytes())
        ref = tmp_path / "ref"
        ref.mkdir()
        for p in ds.glob("*_ihc.png"):
            (ref / p.name).write_bytes(p.read_bytes())
        report = tmp_path / "rep" / "report.json"
        report.parent.mkdir()
        code = run(["eval", "--gen", str(gen), "--ref", str(ref),
                    "--report", str(report)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["dice"] == 1.0
        assert summary["r_total"] == 0.0
        assert report.is_file()
        assert (report.parent / "report.csv").is_file()
        assert (report.parent / "report_summary.png").is_file()
        assert (report.parent / "report_per_patch.png").is_file()

    def test_mismatched_dirs(self, tmp_path, spec_file):
        ds = tmp_path / "ds"
        assert run(["synth", "--spec", str(spec_file), "--n", "1", "--out", str(ds)]) == 0
        empty = tmp_path / "empty"
        empty.mkdir()
        code = run(["eval", "--gen", str(ds), "--ref", str(empty),
                    "--report", str(tmp_path / "r.json")])
        assert code == 2


class TestDispatch:
    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0

    def test_missing_required_option(self, tmp_path):
        assert run(["synth", "--n", "1", "--out", str(tmp_path)]) == 1
