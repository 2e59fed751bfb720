"""Command line interface: exit codes, overrides, and end-to-end chaining."""

import json
import os

import pytest

from dnc.cli import main
from dnc.config import config_to_dict, save_config
from dnc.data import load_dataset

from conftest import micro_run_config


@pytest.fixture()
def micro_config_path(tmp_path):
    cfg = micro_run_config(tmp_path)
    path = tmp_path / "run.json"
    save_config(cfg, path)
    return str(path), cfg


class TestSynth:
    def test_curated(self, tmp_path, capsys):
        out = str(tmp_path / "data")
        code = main(
            [
                "synth", out, "--kind", "curated", "--classes", "3",
                "--per-class", "4", "--size", "8", "--seed", "1",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["items"] == 12
        assert payload["class_sizes"] == [4, 4, 4]
        ds = load_dataset(out)
        assert len(ds) == 12
        assert ds.image_shape == (8, 8, 3)

    def test_uncurated_rectangular(self, tmp_path, capsys):
        out = str(tmp_path / "data")
        code = main(
            [
                "synth", out, "--kind", "uncurated", "--classes", "4",
                "--total", "20", "--zipf", "1.0", "--size", "8", "10",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["items"] == 20
        assert sum(payload["class_sizes"]) == 20
        assert payload["image_shape"] == [8, 10, 3]


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2

    def test_invalid_override_is_config_error(self, micro_config_path):
        path, _ = micro_config_path
        assert main(["run", "--config", path, "--set", "no_such_field=1"]) == 2

    def test_missing_prerequisite_is_exit_3(self, micro_config_path):
        path, _ = micro_config_path
        assert main(["distill", "--config", path]) == 3

    def test_probe_without_checkpoint_is_exit_3(self, micro_config_path):
        path, _ = micro_config_path
        assert main(["probe", "--config", path]) == 3

    def test_unknown_probe_stage_is_config_error(self, micro_config_path):
        path, _ = micro_config_path
        assert main(["probe", "--config", path, "--stage", "stage9"]) == 2


class TestStageChain:
    def test_chained_stages_then_probe_and_report(self, micro_config_path, tmp_path, capsys):
        path, cfg = micro_config_path
        for command in ("train-base", "cluster", "train-experts", "distill"):
            assert main([command, "--config", path]) == 0
            capsys.readouterr()
        assert main(["probe", "--config", path, "--stage", "stage1"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.0 <= payload["top1"] <= 1.0
        assert payload["checkpoint"].endswith(os.path.join("stage1", "checkpoint.npz"))
        assert main(["probe", "--config", path]) == 0
        capsys.readouterr()
        assert os.path.isfile(os.path.join(cfg.output_dir, "probe.json"))

        out = str(tmp_path / "report")
        assert main(["report", cfg.output_dir, "--out", out]) == 0
        paths = json.loads(capsys.readouterr().out)
        assert os.path.isfile(paths["summary"])

    def test_run_resumes_chain(self, micro_config_path, capsys):
        path, cfg = micro_config_path
        assert main(["train-base", "--config", path]) == 0
        capsys.readouterr()
        assert main(["run", "--config", path]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["stages"]["stage1"]["cached"] is True
        assert summary["stages"]["stage3"]["cached"] is False


class TestOverrides:
    def test_set_overrides_nested_fields(self, micro_config_path, tmp_path, capsys):
        path, cfg = micro_config_path
        out = str(tmp_path / "alt")
        assert (
            main(
                [
                    "train-base", "--config", path,
                    "--output-dir", out,
                    "--set", "schedule.n1=2",
                    "--set", "partitioning=random",
                ]
            )
            == 0
        )
        summary = json.loads(capsys.readouterr().out)
        plan = json.load(open(os.path.join(out, "plan.json")))
        assert plan["config"]["schedule"]["n1"] == 2
        assert plan["config"]["partitioning"] == "random"
        assert summary["stages"]["stage1"]["steps"] > 0

    def test_seed_override_changes_digest(self, micro_config_path, tmp_path, capsys):
        path, cfg = micro_config_path
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        assert main(["train-base", "--config", path, "--output-dir", out_a, "--seed", "5"]) == 0
        capsys.readouterr()
        assert main(["train-base", "--config", path, "--output-dir", out_b, "--seed", "6"]) == 0
        capsys.readouterr()
        a = json.load(open(os.path.join(out_a, "plan.json")))
        b = json.load(open(os.path.join(out_b, "plan.json")))
        assert a["digest"] != b["digest"]

    def test_malformed_set_pair(self, micro_config_path):
        path, _ = micro_config_path
        assert main(["run", "--config", path, "--set", "schedule.n1"]) == 2


class TestPresets:
    def test_preset_config_loads(self, tmp_path, capsys):
        out = str(tmp_path / "micro")
        code = main(
            [
                "train-base", "--config", "preset:micro", "--output-dir", out,
            ]
        )
        assert code == 0
        plan = json.load(open(os.path.join(out, "plan.json")))
        assert plan["config"]["data"]["kind"] == "uncurated"

    def test_unknown_preset(self):
        assert main(["run", "--config", "preset:galaxy"]) == 2


class TestAblateCommand:
    def test_small_grid(self, micro_config_path, tmp_path, capsys):
        path, _ = micro_config_path
        root = str(tmp_path / "grid")
        code = main(
            [
                "ablate", "--config", path, "--root", root,
                "--variants", "dnc", "base-only",
                "--seeds", "0", "--no-probe",
            ]
        )
        assert code == 0
        records = json.loads(capsys.readouterr().out)
        assert {r["variant"] for r in records} == {"dnc", "base-only"}
        assert os.path.isfile(os.path.join(root, "ablation.json"))
