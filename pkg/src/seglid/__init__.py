"""Spoken language identification with self-supervised phoneme-segmentation
pretraining and segment-level phonotactic embeddings."""

from .data import (FeatureSequence, Manifest, ManifestEntry, SegmentedUtterance,
                   SyntheticLanguageSpec, SynthUtterance, load_dataset,
                   load_manifest, partition, read_feature_file, synth_corpus,
                   write_feature_file)
from .inference import classify, detect_boundaries, similarity_curve
from .losses import (frame_nce, lid_cross_entropy, multi_task_loss,
                     sample_negatives, utterance_nce)
from .metrics import TrialSet, accuracy, c_avg, confusion, pooled_eer
from .model import ModelConfig, PhonotacticLidNet, build_model, segment_stats_pool
from .training import (Strategy, TrainingConfig, load_checkpoint, lr_at,
                       restore_model, run_training, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "FeatureSequence", "Manifest", "ManifestEntry", "SegmentedUtterance",
    "SyntheticLanguageSpec", "SynthUtterance", "load_dataset", "load_manifest",
    "partition", "read_feature_file", "synth_corpus", "write_feature_file",
    "classify", "detect_boundaries", "similarity_curve",
    "frame_nce", "lid_cross_entropy", "multi_task_loss", "sample_negatives",
    "utterance_nce",
    "TrialSet", "accuracy", "c_avg", "confusion", "pooled_eer",
    "ModelConfig", "PhonotacticLidNet", "build_model", "segment_stats_pool",
    "Strategy", "TrainingConfig", "load_checkpoint", "lr_at", "restore_model",
    "run_training", "save_checkpoint",
    "__version__",
]
