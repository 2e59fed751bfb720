"""Orchestration: seed streams, checkpoints, data materialization, stage
execution, resume, and the ablation grid."""

import json
import os
import sys

import numpy as np
import pytest

from dnc.config import config_digest
from dnc.container import read_container, write_container
from dnc.errors import ConfigError, FormatError, PrerequisiteError
from dnc.pipeline import (
    ALL_STAGES,
    CLUSTER_STREAM,
    STAGE1_STREAM,
    _spawn_safe,
    compute_assignments,
    derive_rng,
    ensure_plan,
    expert_checkpoint_path,
    load_checkpoint,
    materialize_data,
    run_ablation,
    run_dnc,
    run_stages,
    save_checkpoint,
    stage1_checkpoint_path,
    student_checkpoint_path,
    train_contrastive,
)
from dnc.data import save_dataset

from conftest import micro_run_config


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestDeriveRng:
    def test_deterministic(self):
        a = derive_rng(3, STAGE1_STREAM, 0).integers(0, 1 << 30, size=8)
        b = derive_rng(3, STAGE1_STREAM, 0).integers(0, 1 << 30, size=8)
        np.testing.assert_array_equal(a, b)

    def test_distinct_paths_decorrelated(self):
        # Stage streams use fixed-length paths with distinct nonzero tags;
        # the underlying seed sequence treats trailing zeros as padding, so
        # paths must never differ only by them.
        seen = set()
        for path in [(0,), (1,), (0, 1), (2, 3), (3, 2), (0, STAGE1_STREAM), (0, CLUSTER_STREAM)]:
            seen.add(tuple(derive_rng(*path).integers(0, 1 << 30, size=4)))
        assert len(seen) == 7

    def test_tuple_flattening(self):
        a = derive_rng(1, (2, 3)).integers(0, 1 << 30, size=4)
        b = derive_rng(1, 2, 3).integers(0, 1 << 30, size=4)
        np.testing.assert_array_equal(a, b)

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            derive_rng(0, -1)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny_state):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, tiny_state, "base", "deadbeef01234567", extra={"epochs": 2})
        ck = load_checkpoint(path)
        assert ck.stage == "base"
        assert ck.config_digest == "deadbeef01234567"
        assert ck.extra == {"epochs": 2}
        for key, val in tiny_state.online.items():
            np.testing.assert_array_equal(ck.state.online[key], val)
        for key, val in tiny_state.momentum.items():
            np.testing.assert_array_equal(ck.state.momentum[key], val)

    def test_digest_check(self, tmp_path, tiny_state):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, tiny_state, "base", "aaaa")
        load_checkpoint(path, expect_digest="aaaa")
        with pytest.raises(PrerequisiteError):
            load_checkpoint(path, expect_digest="bbbb")

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "not_ck.npz"
        write_container(path, {"x": np.ones(2)}, {"kind": "dataset"})
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path, tiny_state):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, tiny_state, "base", "aaaa")
        arrays, meta = read_container(path)
        meta = dict(meta)
        meta["version"] = 999
        write_container(path, arrays, meta)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_no_temp_residue(self, tmp_path, tiny_state):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, tiny_state, "base", "aaaa")
        assert not os.path.exists(str(path) + ".tmp")


class TestMaterializeData:
    def test_synthetic_splits(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        data = materialize_data(cfg.data)
        corpus, ptr, pte = data["corpus"], data["probe_train"], data["probe_test"]
        assert len(corpus) == cfg.data.total
        assert len(ptr) == cfg.data.num_classes * cfg.data.probe_per_class
        assert len(pte) == cfg.data.num_classes * cfg.data.probe_test_per_class

    def test_probe_shares_class_prototypes(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        data = materialize_data(cfg.data)
        corpus, ptr = data["corpus"], data["probe_train"]

        def class_mean(ds, c):
            rows = [ds.images[i] for i in range(len(ds)) if ds.labels[i] == c]
            return np.mean([r.mean(axis=(0, 1)) for r in rows], axis=0)

        for c in range(cfg.data.num_classes):
            np.testing.assert_allclose(
                class_mean(corpus, c), class_mean(ptr, c), atol=0.1
            )

    def test_probe_items_fresh(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        data = materialize_data(cfg.data)
        corpus_imgs = {d.tobytes() for d in data["corpus"].images}
        probe_imgs = {d.tobytes() for d in data["probe_train"].images}
        assert not corpus_imgs & probe_imgs

    def test_deterministic(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        a = materialize_data(cfg.data)
        b = materialize_data(cfg.data)
        for split in ("corpus", "probe_train", "probe_test"):
            assert len(a[split]) == len(b[split])
            for x, y in zip(a[split].images, b[split].images):
                np.testing.assert_array_equal(x, y)

    def test_path_kind(self, tmp_path, tiny_dataset):
        root = tmp_path / "ds"
        save_dataset(tiny_dataset, root)
        from dnc.config import DataConfig

        data = materialize_data(DataConfig(kind="path", path=str(root)))
        assert len(data["corpus"]) == len(tiny_dataset)
        assert data["probe_train"] is None and data["probe_test"] is None


class TestPlan:
    def test_plan_created_and_stable(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        digest = ensure_plan(cfg, cfg.output_dir)
        plan = json.loads(_read_bytes(os.path.join(cfg.output_dir, "plan.json")))
        assert plan["digest"] == digest == config_digest(cfg)
        assert ensure_plan(cfg, cfg.output_dir) == digest

    def test_plan_rejects_other_config(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        ensure_plan(cfg, cfg.output_dir)
        other = cfg.with_updates(seed=cfg.seed + 1)
        with pytest.raises(ConfigError, match="created for config"):
            ensure_plan(other, cfg.output_dir)

    def test_execution_fields_do_not_conflict(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        ensure_plan(cfg, cfg.output_dir)
        ensure_plan(cfg.with_updates(workers=4), cfg.output_dir)


class TestStageExecution:
    def test_unknown_stage(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        with pytest.raises(ConfigError, match="unknown stages"):
            run_stages(cfg, ("stage1", "polish"))

    def test_missing_prerequisites(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        with pytest.raises(PrerequisiteError, match="stage1"):
            run_stages(cfg, ("clusters",))
        with pytest.raises(PrerequisiteError):
            run_stages(cfg, ("stage3",))

    def test_full_run_and_cache(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        summary = run_dnc(cfg)
        assert set(summary["stages"]) == set(ALL_STAGES)
        assert not any(s["cached"] for s in summary["stages"].values())
        assert os.path.isfile(summary["final_checkpoint"])
        assert os.path.isfile(os.path.join(cfg.output_dir, "report.json"))

        first = {
            p: _read_bytes(p)
            for p in (
                stage1_checkpoint_path(cfg.output_dir),
                expert_checkpoint_path(cfg.output_dir, 0),
                student_checkpoint_path(cfg.output_dir),
            )
        }
        again = run_dnc(cfg)
        assert all(s["cached"] for s in again["stages"].values())
        for path, blob in first.items():
            assert _read_bytes(path) == blob

    def test_resume_equals_uninterrupted(self, tmp_path):
        cfg_a = micro_run_config(tmp_path, output_dir=str(tmp_path / "interrupted"))
        run_stages(cfg_a, ("stage1", "clusters"))
        run_dnc(cfg_a)

        cfg_b = micro_run_config(tmp_path, output_dir=str(tmp_path / "straight"))
        run_dnc(cfg_b)
        assert _read_bytes(student_checkpoint_path(cfg_a.output_dir)) == _read_bytes(
            student_checkpoint_path(cfg_b.output_dir)
        )

    def test_serial_equals_parallel(self, tmp_path):
        cfg_s = micro_run_config(tmp_path, output_dir=str(tmp_path / "serial"))
        cfg_p = micro_run_config(
            tmp_path, output_dir=str(tmp_path / "parallel"), workers=2
        )
        run_dnc(cfg_s)
        run_dnc(cfg_p)
        for k in range(cfg_s.schedule.k_clusters):
            assert _read_bytes(expert_checkpoint_path(cfg_s.output_dir, k)) == _read_bytes(
                expert_checkpoint_path(cfg_p.output_dir, k)
            )
        assert _read_bytes(student_checkpoint_path(cfg_s.output_dir)) == _read_bytes(
            student_checkpoint_path(cfg_p.output_dir)
        )

    def test_metrics_log_shape(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        run_stages(cfg, ("stage1",))
        rows = [
            json.loads(line)
            for line in open(os.path.join(cfg.output_dir, "stage1", "metrics.jsonl"))
        ]
        assert rows, "stage1 logged no steps"
        steps = [r["step"] for r in rows]
        assert steps == sorted(steps)
        for row in rows:
            assert {"step", "loss", "lr", "tau"} <= set(row)
            assert np.isfinite(row["loss"])


class TestAssignments:
    def test_random_partitioning(self, tmp_path):
        cfg = micro_run_config(tmp_path, partitioning="random")
        corpus = materialize_data(cfg.data)["corpus"]
        labels, inertia = compute_assignments(cfg, None, corpus)
        assert inertia is None
        assert labels.shape == (len(corpus),)
        assert set(labels) <= set(range(cfg.schedule.k_clusters))
        again, _ = compute_assignments(cfg, None, corpus)
        np.testing.assert_array_equal(labels, again)

    def test_clustered_partitioning(self, tmp_path, tiny_state):
        cfg = micro_run_config(tmp_path)
        corpus = materialize_data(cfg.data)["corpus"]
        state = tiny_state
        labels, inertia = compute_assignments(cfg, state, corpus)
        assert labels.shape == (len(corpus),)
        assert isinstance(inertia, float)

    def test_cluster_sample_subsets_fit(self, tmp_path, tiny_state):
        cfg = micro_run_config(tmp_path, cluster_sample=10)
        corpus = materialize_data(cfg.data)["corpus"]
        labels, _ = compute_assignments(cfg, tiny_state, corpus)
        # Every item still gets a label even though the fit saw a subset.
        assert labels.shape == (len(corpus),)


class TestTrainContrastive:
    def test_seeded_repeatability(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        corpus = materialize_data(cfg.data)["corpus"]
        kw = dict(
            enc_cfg=cfg.encoder, head_cfg=cfg.head, stage="stage1"
        )
        s1, h1 = train_contrastive(corpus, cfg.schedule, 1.0, (0, STAGE1_STREAM), **kw)
        s2, h2 = train_contrastive(corpus, cfg.schedule, 1.0, (0, STAGE1_STREAM), **kw)
        assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
        for key in s1.online:
            np.testing.assert_array_equal(s1.online[key], s2.online[key])

    def test_different_seed_differs(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        corpus = materialize_data(cfg.data)["corpus"]
        kw = dict(enc_cfg=cfg.encoder, head_cfg=cfg.head, stage="stage1")
        _, h1 = train_contrastive(corpus, cfg.schedule, 1.0, (0, STAGE1_STREAM), **kw)
        _, h2 = train_contrastive(corpus, cfg.schedule, 1.0, (1, STAGE1_STREAM), **kw)
        assert [r["loss"] for r in h1] != [r["loss"] for r in h2]


class TestSpawnSafety:
    def test_safe_under_test_runner(self):
        assert _spawn_safe()

    def test_stdin_main_is_unsafe(self, monkeypatch):
        main = sys.modules["__main__"]
        monkeypatch.setattr(main, "__spec__", None, raising=False)
        monkeypatch.setattr(sys, "argv", ["-"])
        assert not _spawn_safe()

    def test_pathless_main_is_unsafe(self, monkeypatch):
        main = sys.modules["__main__"]
        monkeypatch.setattr(main, "__spec__", None, raising=False)
        monkeypatch.setattr(sys, "argv", [""])
        assert not _spawn_safe()


class TestAblationGrid:
    def test_variants_validated(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        with pytest.raises(ConfigError, match="unknown variants"):
            run_ablation(cfg, ["dnc", "mystery"], [0], str(tmp_path / "abl"))

    def test_grid_shares_banks(self, tmp_path):
        cfg = micro_run_config(tmp_path)
        root = str(tmp_path / "abl")
        records = run_ablation(
            cfg, ["dnc", "base-only", "random-partition"], [0], root, probe=False
        )
        assert len(records) == 3
        assert {r["variant"] for r in records} == {"dnc", "base-only", "random-partition"}
        # dnc and base-only share a bank: identical expert weights, each
        # stamped with its own variant's config digest.
        d_dnc = os.path.join(root, "seed-0", "dnc")
        d_base = os.path.join(root, "seed-0", "base-only")
        a_arrays, a_meta = read_container(expert_checkpoint_path(d_dnc, 0))
        b_arrays, b_meta = read_container(expert_checkpoint_path(d_base, 0))
        assert set(a_arrays) == set(b_arrays)
        for key in a_arrays:
            np.testing.assert_array_equal(a_arrays[key], b_arrays[key])
        assert a_meta["config_digest"] != b_meta["config_digest"]
        # Their students differ: the distillation targets differ.
        s_dnc, _ = read_container(student_checkpoint_path(d_dnc))
        s_base, _ = read_container(student_checkpoint_path(d_base))
        assert any(
            not np.array_equal(s_dnc[k], s_base[k]) for k in s_dnc if k in s_base
        )
        assert os.path.isfile(os.path.join(root, "ablation.json"))
