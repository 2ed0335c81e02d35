"""Plain convolutional backbone with a two-layer projector."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from . import numcore as nc


class ChannelMismatchError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 4
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    projection_dim: int = 128

    def __post_init__(self):
        if self.in_channels not in (3, 4):
            raise ValueError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if not self.stage_widths or any(w <= 0 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be nonempty and positive: {self.stage_widths}")
        if self.blocks_per_stage < 1 or self.projection_dim < 1:
            raise ValueError("blocks_per_stage and projection_dim must be positive")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def stem_width(self) -> int:
        return self.stage_widths[0]

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBNReLU(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout, momentum=0.1)
        self.stride = stride

    def forward(self, x):
        x = nc.conv2d(x, self.conv.weight, None, stride=self.stride)
        x = nc.batch_norm(x, self.bn.weight, self.bn.bias, self.bn.running_mean,
                          self.bn.running_var, self.training, momentum=0.1, eps=self.bn.eps)
        if self.training:
            self.bn.num_batches_tracked += 1
        return nc.relu(x)


class Encoder(nn.Module):
    """Stem (stride 2) then one stride-2 stage per entry of ``stage_widths``.

    A 32x32 tile with four stages ends at 1x1; every stage output plus the
    stem output is kept for the segmentation decoder's skips.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBNReLU(cfg.in_channels, cfg.stem_width, stride=2)
        stages = []
        cin = cfg.stem_width
        for width in cfg.stage_widths:
            blocks = [ConvBNReLU(cin, width, stride=2)]
            blocks += [ConvBNReLU(width, width) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = width
        self.stages = nn.ModuleList(stages)
        d = cfg.feature_dim
        self.projector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.projection_dim))

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ChannelMismatchError(
                f"expected [B, {self.cfg.in_channels}, H, W] input, got {list(x.shape)}")

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """[stem, stage1, ..., stageN] feature maps, finest first."""
        self._check(x)
        maps = [self.stem(x)]
        for stage in self.stages:
            maps.append(stage(maps[-1]))
        return maps

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return nc.global_avg_pool(self.feature_maps(x)[-1])

    def project(self, features: torch.Tensor) -> torch.Tensor:
        return nc.l2_normalize(self.projector(features), dim=1)

    def forward_projection(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.forward_features(x))

    forward = forward_projection


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(nc.derive_seed(seed, "init", "encoder"))
        return Encoder(cfg)


def parameter_count(cfg: EncoderConfig) -> int:
    """Trainable parameter count, computed from the config alone."""
    n = 9 * cfg.in_channels * cfg.stem_width + 2 * cfg.stem_width
    cin = cfg.stem_width
    for w in cfg.stage_widths:
        n += 9 * cin * w + 2 * w
        n += (cfg.blocks_per_stage - 1) * (9 * w * w + 2 * w)
        cin = w
    d = cfg.feature_dim
    n += d * d + d + d * cfg.projection_dim + cfg.projection_dim
    return n


def expand_input_channels(weight: torch.Tensor) -> torch.Tensor:
    """[W, 3, k, k] stem weights -> [W, 4, k, k] with the NIR slice copied from red (index 0)."""
    if weight.dim() != 4 or weight.shape[1] != 3:
        raise ChannelMismatchError(f"expected [W, 3, k, k] stem weights, got {list(weight.shape)}")
    return torch.cat([weight, weight[:, :1]], dim=1)


def expand_encoder(model: Encoder) -> Encoder:
    """A 4-channel copy of a 3-channel encoder; NIR weights start as the red weights."""
    if model.cfg.in_channels != 3:
        raise ChannelMismatchError(f"encoder already has {model.cfg.in_channels} input channels")
    cfg = EncoderConfig(**{**model.cfg.to_dict(), "in_channels": 4})
    out = Encoder(cfg)
    state = dict(model.state_dict())
    state["stem.conv.weight"] = expand_input_channels(state["stem.conv.weight"])
    out.load_state_dict(state)
    return out


def state_tensors(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_state_tensors(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    own = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    expected = module.state_dict()
    missing = sorted(set(expected) - set(own))
    if missing:
        raise nc.CheckpointError(f"checkpoint lacks {prefix}.{missing[0]}")
    module.load_state_dict({k: own[k].to(expected[k].dtype) for k in expected})


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
