"""Stage 2: few-shot fine-tuning on frozen pretrained features."""
from .classify import ClassifierConfig, extract_features, finetune_classifier, train_linear_head
from .enrich import EnrichedSet, enrich
from .episodes import Episode, InsufficientSamplesError, sample_episode, sample_segmentation_episode
from .metrics import accuracy, aggregate_trials, miou, predict
from .schedule import one_cycle_lr, peak_step_of
from .segment import SegConfig, SegDecoder, finetune_segmenter
from .runner import evaluate_finetuned_dir, run_classification_trials, run_segmentation_trials

__all__ = [
    "ClassifierConfig", "EnrichedSet", "Episode", "InsufficientSamplesError", "SegConfig",
    "SegDecoder", "accuracy", "aggregate_trials", "enrich", "evaluate_finetuned_dir", "extract_features",
    "finetune_classifier", "finetune_segmenter", "miou", "one_cycle_lr", "peak_step_of",
    "predict", "run_classification_trials", "run_segmentation_trials", "sample_episode",
    "sample_segmentation_episode", "train_linear_head",
]
