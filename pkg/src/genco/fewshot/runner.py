"""Multi-trial few-shot evaluation with per-trial artifacts."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .. import numcore as nc
from ..dataio import Dataset
from ..encoder import load_state_tensors, state_tensors
from ..pretrain import load_pretrained
from .classify import ClassifierConfig, extract_features, finetune_classifier
from .episodes import sample_episode, sample_segmentation_episode
from .metrics import accuracy, aggregate_trials, miou
from .segment import SegConfig, build_decoder, finetune_segmenter, predict_masks


def trial_seed(seed: int, k_shot: int, trial: int) -> int:
    """Shared by every ablation arm so episodes and head inits line up."""
    return nc.derive_seed(seed, "fewshot", k_shot, trial)


def run_classification_trials(checkpoint, dataset: Dataset, n_way: int, k_shot: int,
                              cfg: ClassifierConfig, seed: int, trials: int = 3,
                              query_per_class: int = 15, out_dir=None, meta: dict | None = None) -> dict:
    encoder, generator0, noise, _ = load_pretrained(checkpoint)
    accs, details = [], []
    for t in range(trials):
        ts = trial_seed(seed, k_shot, t)
        episode = sample_episode(dataset, n_way, k_shot, query_per_class, seed=ts)
        # each trial fine-tunes its own copy of the pretrained generator
        generator = load_pretrained(checkpoint)[1] if cfg.enrich else None
        res = finetune_classifier(encoder, generator, dataset.tiles, episode, cfg, ts, noise)
        accs.append(res.query_accuracy)
        details.append({"trial": t, "episode_seed": ts, "classes": episode.classes,
                        "support_accuracy": res.support_accuracy,
                        "query_accuracy": res.query_accuracy,
                        "train_rows_per_epoch": res.rows_per_epoch})
        if out_dir is not None:
            tensors = state_tensors(res.head, "head")
            if res.generator is not None:
                tensors.update(state_tensors(res.generator, "generator"))
            nc.save_checkpoint(Path(out_dir) / f"trial_{t:02d}", tensors,
                               {"kind": "classifier", "trial": t, "episode_seed": ts,
                                "n_way": n_way, "k_shot": k_shot,
                                "query_accuracy": res.query_accuracy, **(meta or {})})
    mean, std = aggregate_trials(accs)
    return {"task": "classification", "n_way": n_way, "k_shot": k_shot, "trials": accs,
            "mean": mean, "std": std, "details": details}


def seg_class_count(dataset: Dataset) -> int:
    spec = dataset.meta.get("spec", {})
    if "n_classes" in spec:
        return int(spec["n_classes"]) + 1
    valid = dataset.masks[dataset.masks != 255]
    return int(valid.max()) + 1


def run_segmentation_trials(checkpoint, dataset: Dataset, k_shot: int, cfg: SegConfig,
                            seed: int, trials: int = 3, out_dir=None, meta: dict | None = None) -> dict:
    if dataset.masks is None:
        raise ValueError("segmentation fine-tuning needs a dataset with masks")
    encoder, _, noise, _ = load_pretrained(checkpoint)
    n_classes = seg_class_count(dataset)
    train, query, details = [], [], []
    per_class = []
    for t in range(trials):
        ts = trial_seed(seed, k_shot, t)
        episode = sample_segmentation_episode(dataset, k_shot, cfg.query_size, seed=ts)
        generator = load_pretrained(checkpoint)[1] if cfg.enrich else None
        res = finetune_segmenter(encoder, generator, dataset.tiles, dataset.masks, episode,
                                 n_classes, cfg, ts, noise)
        train.append(res.train_miou)
        query.append(res.query_miou)
        per_class.append(res.query_per_class)
        details.append({"trial": t, "episode_seed": ts, "train_miou": res.train_miou,
                        "query_miou": res.query_miou, "final_loss": res.losses[-1]})
        if out_dir is not None:
            tensors = state_tensors(res.decoder, "decoder")
            if res.generator is not None:
                tensors.update(state_tensors(res.generator, "generator"))
            nc.save_checkpoint(Path(out_dir) / f"trial_{t:02d}", tensors,
                               {"kind": "segmenter", "trial": t, "episode_seed": ts,
                                "k_shot": k_shot, "n_classes": n_classes,
                                "query_size": cfg.query_size, "query_miou": res.query_miou,
                                **(meta or {})})
    mean, std = aggregate_trials(query)
    train_mean, _ = aggregate_trials(train)
    pc = _mean_per_class(per_class, n_classes)
    return {"task": "segmentation", "n_way": n_classes, "k_shot": k_shot, "trials": query,
            "mean": mean, "std": std, "train_trials": train, "train_mean": train_mean,
            "per_class": pc, "details": details}


def _trial_dirs(finetuned_dir) -> list[Path]:
    dirs = sorted(p for p in Path(finetuned_dir).glob("trial_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no trial_* checkpoints under {finetuned_dir}")
    return dirs


@torch.no_grad()
def evaluate_finetuned_dir(checkpoint, dataset: Dataset, finetuned_dir, query_per_class: int = 15) -> dict:
    """Reload saved heads or decoders and re-score each trial's query set."""
    encoder, _, _, _ = load_pretrained(checkpoint)
    dirs = _trial_dirs(finetuned_dir)
    kind = nc.load_checkpoint(dirs[0])[1].get("kind")
    if kind == "classifier":
        return _eval_classifiers(encoder, dataset, dirs, query_per_class)
    if kind == "segmenter":
        return _eval_segmenters(encoder, dataset, dirs)
    raise nc.CheckpointError(f"{dirs[0]} holds a {kind!r} checkpoint, not a fine-tuned model")


def _eval_classifiers(encoder, dataset, dirs, query_per_class):
    accs = []
    for d in dirs:
        tensors, meta = nc.load_checkpoint(d)
        n_way, k_shot = meta["n_way"], meta["k_shot"]
        episode = sample_episode(dataset, n_way, k_shot, query_per_class, seed=meta["episode_seed"])
        w, b = tensors["head.weight"], tensors["head.bias"]
        feats = extract_features(encoder, dataset.tiles[episode.query_indices])
        accs.append(accuracy((feats @ w.T + b).numpy(), episode.query_labels))
    mean, std = aggregate_trials(accs)
    return {"task": "classification", "n_way": n_way, "k_shot": k_shot, "trials": accs,
            "mean": mean, "std": std}


def _eval_segmenters(encoder, dataset, dirs):
    if dataset.masks is None:
        raise ValueError("segmentation evaluation needs a dataset with masks")
    scores, per_class = [], []
    for d in dirs:
        tensors, meta = nc.load_checkpoint(d)
        n_classes, k_shot = meta["n_classes"], meta["k_shot"]
        episode = sample_segmentation_episode(dataset, k_shot, meta["query_size"], seed=meta["episode_seed"])
        decoder = build_decoder(encoder.cfg, n_classes, meta["episode_seed"])
        load_state_tensors(decoder, tensors, "decoder")
        q = episode.query_indices
        pc, m = miou(predict_masks(encoder, decoder, dataset.tiles[q]), dataset.masks[q], n_classes)
        scores.append(m)
        per_class.append(pc)
    mean, std = aggregate_trials(scores)
    return {"task": "segmentation", "n_way": n_classes, "k_shot": k_shot, "trials": scores,
            "mean": mean, "std": std, "per_class": _mean_per_class(per_class, n_classes)}


def _mean_per_class(per_class, n_classes):
    out = []
    for c in range(n_classes):
        vals = [p[c] for p in per_class if p[c] is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out
