"""Continual source-free domain adaptation under gradually degrading weather."""

from .buffer import MergedSet, ReplayBuffer, merge
from .datasets import ImageDataset, load_dataset, make_shapes_dataset, save_dataset
from .degrade import (
    CloudParams,
    DegradationSchedule,
    DomainSequence,
    SnowParams,
    build_domain_sequence,
    default_cloud_schedule,
    default_snow_schedule,
    load_domain_sequence,
    save_domain_sequence,
    synth_cloud,
    synth_snow,
)
from .engine import AdaptationConfig, AdaptationTrace, adapt_chunk, run_continual
from .losses import (
    PseudolabelAssignment,
    diversity_loss,
    entropy_loss,
    equal_diversity_loss,
    prototypical_contrastive_loss,
    refine_pseudolabels,
    total_adaptation_loss,
)
from .models import (
    ClassifierModel,
    SourceConfig,
    evaluate_accuracy,
    forward_features,
    forward_logits,
    label_smoothing_ce,
    load_checkpoint,
    register_backbone,
    save_checkpoint,
    train_source,
)
from .optimization import lr_at, normalize_gradients

__version__ = "0.1.0"
