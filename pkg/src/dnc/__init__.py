"""Divide-and-contrast pretraining at desk scale, in plain numpy.

The pipeline has three stages: contrastive pretraining of a base model,
spherical k-means over its representations to split the corpus, per-cluster
expert pretraining under a shared compute budget, and distillation of base
plus experts into a single student.
"""

from .augment import AugmentDistribution, center_crop, make_view, view1_preset, view2_preset
from .cluster import (
    ClusterModel,
    RepresentationMatrix,
    assign,
    extract_representations,
    kmeans_cosine,
    partition,
)
from .data import (
    Dataset,
    fine_subset,
    load_dataset,
    save_dataset,
    synth_curated,
    synth_uncurated,
    zipf_class_sizes,
)
from .config import (
    DataConfig,
    ProbeConfig,
    RunConfig,
    config_digest,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .errors import ConfigError, DncError, FormatError, NumericError, PrerequisiteError
from .evaluation import ProbeResult, class_coherence, cluster_mi, cluster_top1, emit_report, linear_probe
from .losses import (
    ContrastiveBatch,
    distill_loss,
    distill_loss_grad,
    info_nce,
    info_nce_grad,
    moclr_loss,
    moclr_loss_grad,
    regression_mse,
    regression_mse_grad,
)
from .model import (
    EncoderConfig,
    HeadConfig,
    ModelState,
    ema_update,
    encode,
    init_model,
    project,
    regress,
    tau_schedule,
)
from .pipeline import (
    ABLATION_VARIANTS,
    Checkpoint,
    derive_rng,
    distill,
    load_checkpoint,
    materialize_data,
    run_ablation,
    run_dnc,
    run_stages,
    save_checkpoint,
    train_contrastive,
)
from .schedule import (
    SCHEDULE_PRESETS,
    CostModel,
    ScheduleSpec,
    allocate_expert_budget,
    flops_report,
    lars_step,
    lr_at,
)

__version__ = "0.1.0"
