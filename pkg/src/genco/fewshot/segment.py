"""Five-layer deconvolutional decoder over a frozen encoder (lightweight U-Net)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .. import numcore as nc
from ..contrastive import Generator, NoiseSpec, generate, sample_noise
from ..dataio import IGNORE
from ..encoder import Encoder, EncoderConfig, parameter_hash
from .metrics import miou
from .schedule import one_cycle_lr

N_UP = 5


class UpBlock(nn.Module):
    def __init__(self, cin: int, skip: int):
        super().__init__()
        cout = cin // 2
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = nn.Conv2d(cout + skip, cout, 3, padding=1)

    def forward(self, x, skip):
        x = nc.transposed_conv2d(x, self.up.weight, self.up.bias)
        x = nc.concat([x, skip], dim=1)
        return nc.relu(nc.conv2d(x, self.conv.weight, self.conv.bias))


class SegDecoder(nn.Module):
    """Each of the five layers doubles resolution with a 2x2 stride-2 deconvolution,
    halves the channel count and fuses the matching encoder skip.

    Skips, coarse to fine: the three inner stage outputs, the stem output and,
    at full resolution, the input tile itself.
    """

    def __init__(self, enc_cfg: EncoderConfig, n_classes: int):
        super().__init__()
        if len(enc_cfg.stage_widths) != N_UP - 1:
            raise ValueError(f"decoder needs a {N_UP - 1}-stage encoder, got {len(enc_cfg.stage_widths)}")
        c = enc_cfg.feature_dim
        if c >> N_UP < 1:
            raise ValueError(f"feature_dim {c} too small to halve {N_UP} times")
        skips = list(reversed(enc_cfg.stage_widths[:-1])) + [enc_cfg.stem_width, enc_cfg.in_channels]
        blocks = []
        for s in skips:
            blocks.append(UpBlock(c, s))
            c //= 2
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Conv2d(c, n_classes, 1)
        self.n_classes = n_classes

    def forward(self, bottleneck, skips):
        """``skips`` coarse to fine, ending with the input tile."""
        x = bottleneck
        for block, s in zip(self.blocks, skips):
            x = block(x, s)
        return nc.conv2d(x, self.classifier.weight, self.classifier.bias)


def build_decoder(enc_cfg: EncoderConfig, n_classes: int, seed: int) -> SegDecoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(nc.derive_seed(seed, "init", "decoder"))
        return SegDecoder(enc_cfg, n_classes)


@torch.no_grad()
def frozen_maps(encoder: Encoder, tiles) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Bottleneck map and decoder skips (coarse to fine, input last), eval mode."""
    encoder.eval()
    x = torch.as_tensor(np.asarray(tiles))
    if x.shape[-1] % (1 << N_UP) or x.shape[-2] % (1 << N_UP):
        raise ValueError(f"tile size {list(x.shape[-2:])} must be divisible by {1 << N_UP}")
    maps = encoder.feature_maps(x)
    return maps[-1], list(reversed(maps[:-1])) + [x]


def perturb_bottleneck(bottleneck: torch.Tensor, G: Generator, z: torch.Tensor) -> torch.Tensor:
    """Shift every spatial position by the generator's displacement of the pooled vector."""
    pooled = nc.global_avg_pool(bottleneck)
    norm = pooled.norm(dim=1, keepdim=True).clamp_min(1e-12)
    q = pooled / norm
    q_prime = generate(G, q, z)
    return bottleneck + ((q_prime - q) * norm)[:, :, None, None]


@dataclass
class SegConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 10
    lr: float = 3e-3
    weight_decay: float = 0.01
    pct_start: float = 0.3
    enrich: bool = True
    query_size: int = 20

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegResult:
    decoder: SegDecoder
    generator: Generator | None
    train_miou: float
    query_miou: float | None
    train_per_class: list
    query_per_class: list | None
    losses: list[float]


@torch.no_grad()
def predict_masks(encoder: Encoder, decoder: SegDecoder, tiles, batch_size: int = 64) -> np.ndarray:
    decoder.eval()
    out = []
    for i in range(0, len(tiles), batch_size):
        b, skips = frozen_maps(encoder, tiles[i:i + batch_size])
        out.append(decoder(b, skips).argmax(dim=1).numpy())
    return np.concatenate(out).astype(np.uint8)


def finetune_segmenter(encoder: Encoder, generator: Generator | None, tiles: np.ndarray,
                       masks: np.ndarray, episode, n_classes: int, cfg: SegConfig, seed: int,
                       noise: NoiseSpec | None = None) -> SegResult:
    """Train a fresh decoder (and the generator) on the support tiles; AdamW with a
    one-cycle schedule, 255-labelled pixels excluded from loss and metrics."""
    if tiles.shape[0] != masks.shape[0] or tiles.shape[2:] != masks.shape[1:]:
        raise ValueError(f"tiles {tiles.shape} and masks {masks.shape} do not pair up")
    before = parameter_hash(encoder)
    for p in encoder.parameters():
        p.requires_grad_(False)
    sup = episode.support_indices
    bottleneck, skips = frozen_maps(encoder, tiles[sup])
    target = torch.from_numpy(masks[sup].astype(np.int64))

    decoder = build_decoder(encoder.cfg, n_classes, seed)
    named = [(f"decoder.{n}", p) for n, p in decoder.named_parameters()]
    if cfg.enrich:
        if generator is None:
            raise ValueError("enrichment requested without a generator")
        if generator.feature_dim != bottleneck.shape[1]:
            raise nc.ShapeError("finetune_segmenter", bottleneck.shape, (generator.feature_dim,),
                                detail="bottleneck width vs generator")
        for p in generator.parameters():
            p.requires_grad_(True)
        named += [(f"generator.{n}", p) for n, p in generator.named_parameters()]
    noise = noise or NoiseSpec(dim=generator.noise_dim if generator else 128)
    opt = nc.Optimizer(named, "adamw", lr=cfg.lr, weight_decay=cfg.weight_decay)

    total = cfg.epochs * cfg.steps_per_epoch
    bs = min(cfg.batch_size, len(sup))
    rng = np.random.default_rng(nc.derive_seed(seed, "seg_batches"))
    losses = []
    decoder.train()
    for step in range(total):
        opt.lr = one_cycle_lr(step, total, cfg.lr, cfg.pct_start)
        idx = torch.from_numpy(rng.choice(len(sup), size=bs, replace=False))
        b, sk, y = bottleneck[idx], [s[idx] for s in skips], target[idx]
        if cfg.enrich:
            z = sample_noise(noise, bs, nc.derive_seed(seed, "seg_noise", step))
            b = torch.cat([b, perturb_bottleneck(b, generator, z)])
            sk = [torch.cat([s, s]) for s in sk]
            y = torch.cat([y, y])
        loss = nc.softmax_cross_entropy(decoder(b, sk), y, ignore_index=IGNORE)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    if generator is not None:
        for p in generator.parameters():
            p.requires_grad_(False)

    train_pc, train_m = miou(predict_masks(encoder, decoder, tiles[sup]), masks[sup], n_classes)
    query_pc = query_m = None
    if len(episode.query):
        q = episode.query_indices
        query_pc, query_m = miou(predict_masks(encoder, decoder, tiles[q]), masks[q], n_classes)
    if parameter_hash(encoder) != before:
        raise AssertionError("backbone parameters changed during fine-tuning")
    return SegResult(decoder, generator if cfg.enrich else None, train_m, query_m,
                     train_pc, query_pc, losses)
