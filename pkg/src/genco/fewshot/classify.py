"""Linear-head few-shot classification on a frozen backbone."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .. import numcore as nc
from ..contrastive import Generator, NoiseSpec
from ..encoder import Encoder, parameter_hash
from .enrich import enrich
from .metrics import accuracy


@dataclass
class ClassifierConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    enrich: bool = True
    train_generator: bool = True
    freeze_enriched_set: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def extract_features(encoder: Encoder, tiles, batch_size: int = 256) -> torch.Tensor:
    """L2-normalized projection features in eval mode (the space the generator lives in)."""
    encoder.eval()
    x = torch.as_tensor(np.asarray(tiles))
    out = [encoder.forward_projection(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out)


def build_head(dim: int, n_way: int, seed: int) -> nn.Linear:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(nc.derive_seed(seed, "init", "head"))
        return nn.Linear(dim, n_way)


@dataclass
class ClassifierResult:
    head: nn.Linear
    generator: Generator | None
    support_accuracy: float
    query_accuracy: float | None
    rows_per_epoch: int
    losses: list[float]


def train_linear_head(features: torch.Tensor, labels: torch.Tensor, n_way: int,
                      cfg: ClassifierConfig, seed: int, generator: Generator | None = None,
                      noise: NoiseSpec | None = None) -> ClassifierResult:
    """Softmax cross-entropy on (optionally enriched) fixed features.

    With enrichment the generator is fine-tuned jointly and fresh noise is
    drawn every step, unless ``freeze_enriched_set`` materialises one
    generated copy up front.
    """
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_way):
        raise ValueError(f"label outside 0..{n_way - 1}")
    use_gen = cfg.enrich
    if use_gen and generator is None:
        raise ValueError("enrichment requested without a generator")
    noise = noise or NoiseSpec(dim=generator.noise_dim if generator else 128)
    head = build_head(features.shape[1], n_way, seed)
    named = [(f"head.{n}", p) for n, p in head.named_parameters()]
    train_gen = use_gen and cfg.train_generator and not cfg.freeze_enriched_set
    if use_gen:
        for p in generator.parameters():
            p.requires_grad_(train_gen)
    if train_gen:
        named += [(f"generator.{n}", p) for n, p in generator.named_parameters()]
    opt = nc.Optimizer(named, cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay)

    fixed = None
    if use_gen and cfg.freeze_enriched_set:
        with torch.no_grad():
            fixed = enrich(features, labels, generator, noise, nc.derive_seed(seed, "ft_noise_fixed"))

    m = features.shape[0]
    rows_per_epoch = 2 * m if use_gen else m
    losses, step = [], 0
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(np.random.default_rng(nc.derive_seed(seed, "ft_shuffle", epoch)).permutation(m))
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = features[idx], labels[idx]
            if fixed is not None:
                x = torch.cat([x, fixed.features[m + idx]])
                y = torch.cat([y, y])
            elif use_gen:
                es = enrich(x, y, generator, noise, nc.derive_seed(seed, "ft_noise", step))
                x, y = es.features, es.labels
            loss = nc.softmax_cross_entropy(head(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            step += 1
    if use_gen:
        for p in generator.parameters():
            p.requires_grad_(False)
    with torch.no_grad():
        support_acc = accuracy(head(features).numpy(), labels.numpy())
    return ClassifierResult(head, generator if use_gen else None, support_acc, None, rows_per_epoch, losses)


def finetune_classifier(encoder: Encoder, generator: Generator | None, tiles: np.ndarray,
                        episode, cfg: ClassifierConfig, seed: int,
                        noise: NoiseSpec | None = None) -> ClassifierResult:
    """Fit a linear head (and the generator) on an episode; score the query set.

    The backbone is frozen: its state hash is checked before and after.
    """
    before = parameter_hash(encoder)
    for p in encoder.parameters():
        p.requires_grad_(False)
    sup = extract_features(encoder, tiles[episode.support_indices])
    res = train_linear_head(sup, torch.from_numpy(episode.support_labels), episode.n_way,
                            cfg, seed, generator, noise)
    if len(episode.query):
        qf = extract_features(encoder, tiles[episode.query_indices])
        with torch.no_grad():
            res.query_accuracy = accuracy(res.head(qf).numpy(), episode.query_labels)
    if parameter_hash(encoder) != before:
        raise AssertionError("backbone parameters changed during fine-tuning")
    return res
