"""Shared fixtures: small deterministic datasets and model states."""

import numpy as np
import pytest

from dnc.config import DataConfig, ProbeConfig, RunConfig
from dnc.data import synth_curated, synth_uncurated
from dnc.model import EncoderConfig, HeadConfig, init_model
from dnc.schedule import ScheduleSpec


TINY_ENCODER = EncoderConfig(stem_channels=4, stage_channels=(4, 8), input_channels=3)
TINY_HEAD = HeadConfig(hidden=16, output=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    return synth_curated(3, 6, image_spec=(12, 12, 3), rng=np.random.default_rng(7))


@pytest.fixture
def tiny_zipf_dataset():
    return synth_uncurated(4, 40, image_spec=(12, 12, 3), rng=np.random.default_rng(8))


@pytest.fixture
def tiny_state(rng):
    return init_model(TINY_ENCODER, TINY_HEAD, rng=rng)


def micro_run_config(tmp_path, **updates) -> RunConfig:
    """Seconds-scale pipeline config used by orchestration tests."""
    cfg = RunConfig(
        seed=0,
        output_dir=str(tmp_path / "run"),
        data=DataConfig(
            kind="uncurated",
            num_classes=3,
            total=24,
            image_size=(12, 12),
            probe_per_class=6,
            probe_test_per_class=4,
        ),
        encoder=EncoderConfig(stem_channels=4, stage_channels=(4, 8)),
        head=HeadConfig(hidden=16, output=8),
        schedule=ScheduleSpec(
            n1=1, n2=1, n3=1, k_clusters=2, batch_size=8, reference_size=24,
            warmup_epochs=0.25,
        ),
        probe=ProbeConfig(epochs=8, batch_size=8, lr_grid=(0.1, 0.3)),
    )
    return cfg.with_updates(**updates) if updates else cfg
