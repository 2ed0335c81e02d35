"""Stage 1: generator-augmented momentum-contrast pretraining."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numcore as nc
from .contrastive import (MemoryBank, MomentumPair, NoiseSpec, build_generator, generate,
                          genco_loss, moco_loss, sample_noise)
from .dataio import AugmentConfig, Dataset, augment_pair, load_dataset
from .encoder import Encoder, EncoderConfig, build_encoder, load_state_tensors, state_tensors

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    dataset: str = "data"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    bank_capacity: int = 512
    tau: float = 0.2
    momentum: float = 0.999
    symmetric_negatives: bool = False
    no_generator: bool = False
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.3
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    lr_milestones: list[tuple[int, float]] = field(default_factory=lambda: [(21, 0.03), (24, 0.003)])
    bn_splits: int = 4
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        prev = -1
        for epoch, lr in self.lr_milestones:
            if epoch <= prev:
                raise ValueError("lr_milestones must be strictly increasing in epoch")
            if lr <= 0:
                raise ValueError("milestone learning rates must be positive")
            prev = epoch
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.bn_splits < 1 or self.batch_size % self.bn_splits:
            raise ValueError(f"batch_size {self.batch_size} must be divisible by bn_splits {self.bn_splits}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = [list(m) for m in self.lr_milestones]
        d["augment"]["crop_scale_range"] = list(self.augment.crop_scale_range)
        d["augment"]["rotation_choices"] = list(self.augment.rotation_choices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        aug = dict(d.get("augment", {}))
        if "crop_scale_range" in aug:
            aug["crop_scale_range"] = tuple(aug["crop_scale_range"])
        if "rotation_choices" in aug:
            aug["rotation_choices"] = tuple(aug["rotation_choices"])
        d["augment"] = AugmentConfig(**aug)
        d["noise"] = NoiseSpec(**d.get("noise", {}))
        d["lr_milestones"] = [tuple(m) for m in d.get("lr_milestones", [])]
        return cls(**d)


def lr_at_epoch(cfg: PretrainConfig, epoch: int) -> float:
    """Step schedule: base_lr, then the lr of the latest milestone reached."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr = cfg.base_lr
    for start, value in cfg.lr_milestones:
        if start <= epoch:
            lr = value
    return lr


class TrainState:
    def __init__(self, cfg: PretrainConfig):
        self.cfg = cfg
        online = build_encoder(cfg.encoder, cfg.seed)
        self.pair = MomentumPair.from_online(online, Encoder(cfg.encoder), cfg.momentum)
        self.generator = build_generator(cfg.encoder.projection_dim, cfg.noise.dim, cfg.seed)
        self.bank = MemoryBank(cfg.bank_capacity, cfg.encoder.projection_dim)
        named = [(f"encoder.{n}", p) for n, p in online.named_parameters()]
        if not cfg.no_generator:
            named += [(f"generator.{n}", p) for n, p in self.generator.named_parameters()]
        self.opt = nc.Optimizer(named, "sgd-momentum", lr=lr_at_epoch(cfg, 0),
                                weight_decay=cfg.weight_decay, momentum=cfg.sgd_momentum)
        self.epoch = 0
        self.step = 0

    @property
    def encoder(self) -> Encoder:
        return self.pair.online

    def tensors(self) -> dict[str, torch.Tensor]:
        out = state_tensors(self.pair.online, "encoder")
        out.update(state_tensors(self.pair.offline, "momentum_encoder"))
        out.update(state_tensors(self.generator, "generator"))
        out.update(self.bank.state_tensors())
        out.update(self.opt.state_tensors())
        return out

    def save(self, path, extra_meta: dict | None = None) -> Path:
        meta = {"kind": "pretrain", "config": self.cfg.to_dict(), "seed": self.cfg.seed,
                "epoch": self.epoch, "step": self.step, "optimizer_t": self.opt.t}
        meta.update(extra_meta or {})
        return nc.save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path, cfg: PretrainConfig | None = None) -> "TrainState":
        tensors, meta = nc.load_checkpoint(path)
        if meta.get("kind") != "pretrain":
            raise nc.CheckpointError(f"{path} is not a pretraining checkpoint")
        state = cls(cfg or PretrainConfig.from_dict(meta["config"]))
        load_state_tensors(state.pair.online, tensors, "encoder")
        load_state_tensors(state.pair.offline, tensors, "momentum_encoder")
        load_state_tensors(state.generator, tensors, "generator")
        state.bank = MemoryBank.from_state(tensors)
        state.opt.load_state_tensors(tensors, meta["optimizer_t"])
        state.epoch, state.step = meta["epoch"], meta["step"]
        return state


def make_views(tiles: np.ndarray, sample_ids, epoch: int, cfg: PretrainConfig):
    pairs = [augment_pair(t, cfg.augment, nc.derive_seed(cfg.seed, "augment", epoch, int(i)))
             for t, i in zip(tiles, sample_ids)]
    xq = torch.from_numpy(np.stack([p[0] for p in pairs]))
    xk = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return xq, xk


def split_forward(model: Encoder, x: torch.Tensor, splits: int) -> torch.Tensor:
    """Projection with batch-norm statistics computed per contiguous group."""
    if splits == 1:
        return model.forward_projection(x)
    return torch.cat([model.forward_projection(c) for c in x.chunk(splits)])


def shuffled_key_forward(model: Encoder, x: torch.Tensor, splits: int, key: int) -> torch.Tensor:
    """Key projection with the batch permuted before grouping, then restored.

    Keys and queries of the same image land in different normalisation
    groups, so batch statistics cannot identify the positive.
    """
    perm = torch.randperm(x.shape[0], generator=nc.torch_generator(key))
    k = split_forward(model, x[perm], splits)
    return k[torch.argsort(perm)]


def pretrain_step(state: TrainState, tiles: np.ndarray, sample_ids, cfg: PretrainConfig | None = None) -> float:
    """One optimisation step on a batch of tiles; returns the loss."""
    cfg = cfg or state.cfg
    xq, xk = make_views(tiles, sample_ids, state.epoch, cfg)
    online, offline = state.pair.online, state.pair.offline
    online.train()
    offline.train()
    q = split_forward(online, xq, cfg.bn_splits)
    with torch.no_grad():
        k = shuffled_key_forward(offline, xk, cfg.bn_splits,
                                 nc.derive_seed(cfg.seed, "bn_shuffle", state.step))
    if cfg.no_generator:
        loss = moco_loss(q, k, state.bank, cfg.tau)
    else:
        z = sample_noise(cfg.noise, q.shape[0], nc.derive_seed(cfg.seed, "noise", state.step))
        q_prime = generate(state.generator, q, z)
        loss = genco_loss(q, q_prime, k, state.bank, cfg.tau, cfg.symmetric_negatives)

    state.opt.zero_grad()
    loss.backward()
    state.pair.assert_offline_gradient_free()
    state.opt.step()
    state.pair.update()
    state.bank.enqueue(k)
    state.step += 1
    return float(loss.item())


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the trailing partial batch is dropped."""
    order = np.random.default_rng(nc.derive_seed(seed, "shuffle", epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def pretrain_run(cfg: PretrainConfig, out_dir, resume=None, dataset: Dataset | None = None,
                 provenance: dict | None = None) -> Path:
    """Train for ``cfg.epochs``; writes metrics.jsonl, periodic and final checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset if dataset is not None else load_dataset(cfg.dataset)
    if data.tiles.shape[1] != cfg.encoder.in_channels:
        raise ValueError(f"dataset has {data.tiles.shape[1]} channels, encoder expects "
                         f"{cfg.encoder.in_channels}")
    if len(data) < cfg.batch_size:
        raise ValueError(f"dataset of {len(data)} tiles is smaller than batch_size {cfg.batch_size}")
    state = TrainState.load(resume, cfg) if resume else TrainState(cfg)
    extra = {"provenance": provenance or {}}

    epoch_means = []
    with open(out / "metrics.jsonl", "w") as fh:
        while state.epoch < cfg.epochs:
            lr = lr_at_epoch(cfg, state.epoch)
            state.opt.lr = lr
            losses = []
            for batch in epoch_batches(len(data), cfg.batch_size, cfg.seed, state.epoch):
                loss = pretrain_step(state, data.tiles[batch], batch, cfg)
                losses.append(loss)
                fh.write(json.dumps({"epoch": state.epoch, "step": state.step, "loss": loss, "lr": lr}) + "\n")
            epoch_means.append({"epoch": state.epoch, "mean_loss": float(np.mean(losses))})
            log.info("epoch %d lr %.4g mean loss %.4f", state.epoch, lr, epoch_means[-1]["mean_loss"])
            state.epoch += 1
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0 and state.epoch < cfg.epochs:
                state.save(out / "checkpoints" / f"epoch_{state.epoch:04d}", extra)
    final = state.save(out / "final", extra)
    summary = {"config": cfg.to_dict(), "seed": cfg.seed, "epochs": epoch_means,
               "checkpoint": "final", "provenance": provenance or {}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return final


def clone_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def load_pretrained(path):
    """Online encoder, generator and noise spec from a pretraining checkpoint."""
    tensors, meta = nc.load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise nc.CheckpointError(f"{path} is not a pretraining checkpoint")
    cfg = PretrainConfig.from_dict(meta["config"])
    encoder = Encoder(cfg.encoder)
    load_state_tensors(encoder, tensors, "encoder")
    generator = build_generator(cfg.encoder.projection_dim, cfg.noise.dim, cfg.seed)
    load_state_tensors(generator, tensors, "generator")
    encoder.eval()
    return encoder, generator, cfg.noise, meta
