"""Feature generator, memory bank, momentum encoder and the contrastive losses.

The generator-augmented loss for one query is

    L = -log (e^{q.k/t} + e^{q'.k/t}) / (sum_neg e^{q.k-/t} + e^{q.k/t} + e^{q'.k/t})

i.e. two positives (the real query and the generated one against the same
key) and negatives scored against the real query only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import numcore as nc


class DegenerateNormError(ValueError):
    pass


class StructureMismatchError(ValueError):
    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")


@dataclass
class NoiseSpec:
    dim: int = 128
    mean: float = 0.0
    variance: float = 0.1


def sample_noise(spec: NoiseSpec, batch: int, rng_key: int, dtype=torch.float32) -> torch.Tensor:
    g = nc.torch_generator(rng_key)
    z = torch.randn(batch, spec.dim, generator=g, dtype=torch.float64)
    return (spec.mean + math.sqrt(spec.variance) * z).to(dtype)


class Generator(nn.Module):
    """Three linear layers with a ReLU between successive ones: (q, z) -> q'."""

    def __init__(self, feature_dim: int = 128, noise_dim: int = 128):
        super().__init__()
        self.feature_dim = feature_dim
        self.noise_dim = noise_dim
        d = feature_dim + noise_dim
        self.net = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(),
            nn.Linear(d, d), nn.ReLU(),
            nn.Linear(d, feature_dim),
        )

    def forward(self, q, z):
        return self.net(nc.concat([q, z], dim=1))


def build_generator(feature_dim: int, noise_dim: int, seed: int) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(nc.derive_seed(seed, "init", "generator"))
        return Generator(feature_dim, noise_dim)


def generate(G: Generator, q: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """L2-normalized q' = G(q, z)."""
    if q.dim() != 2 or q.shape[1] != G.feature_dim:
        raise nc.ShapeError("generate", q.shape, (q.shape[0] if q.dim() else 0, G.feature_dim),
                            detail="query width vs generator feature_dim")
    if z.dim() != 2 or z.shape != (q.shape[0], G.noise_dim):
        raise nc.ShapeError("generate", z.shape, (q.shape[0], G.noise_dim), detail="noise")
    raw = G(q, z)
    norms = raw.norm(dim=1, keepdim=True)
    if bool((norms <= 1e-12).any()):
        raise DegenerateNormError("generator output has (near-)zero norm; cannot normalize")
    return raw / norms


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Fixed-capacity FIFO of L2-normalized keys, initially empty."""

    def __init__(self, capacity: int, dim: int = 128, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.write_pointer = 0
        self.fill_count = 0

    def __len__(self):
        return self.fill_count

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        if keys.requires_grad:
            raise ValueError("enqueued keys must be detached from the graph")
        if keys.dim() != 2 or keys.shape[1] != self.dim:
            raise nc.ShapeError("enqueue", keys.shape, (keys.shape[0], self.dim))
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds bank capacity {self.capacity}")
        if b and not torch.allclose(keys.norm(dim=1).double(),
                                    torch.ones(b, dtype=torch.float64), atol=1e-5):
            raise ValueError("enqueued keys must be L2-normalized")
        idx = (self.write_pointer + torch.arange(b)) % self.capacity
        self.storage[idx] = keys.to(self.storage.dtype)
        self.write_pointer = (self.write_pointer + b) % self.capacity
        self.fill_count = min(self.fill_count + b, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Stored keys in slot order (slot 0 first)."""
        return self.storage[: self.fill_count]

    def ordered(self) -> torch.Tensor:
        """Stored keys oldest first."""
        if self.fill_count < self.capacity:
            return self.storage[: self.fill_count]
        p = self.write_pointer
        return torch.cat([self.storage[p:], self.storage[:p]])

    def state_tensors(self, prefix: str = "bank") -> dict[str, torch.Tensor]:
        return {f"{prefix}.storage": self.storage.clone(),
                f"{prefix}.pointers": torch.tensor([self.write_pointer, self.fill_count], dtype=torch.int64)}

    @classmethod
    def from_state(cls, tensors: dict[str, torch.Tensor], prefix: str = "bank") -> "MemoryBank":
        storage = tensors[f"{prefix}.storage"]
        bank = cls(storage.shape[0], storage.shape[1], dtype=storage.dtype)
        bank.storage = storage.clone()
        bank.write_pointer, bank.fill_count = (int(v) for v in tensors[f"{prefix}.pointers"])
        return bank


# ---------------------------------------------------------------------------
# momentum pair


def momentum_update(online: nn.Module, offline: nn.Module, m: float) -> None:
    """offline <- m * offline + (1 - m) * online, for every parameter."""
    if not 0 < m <= 1:
        raise ValueError(f"momentum {m} outside (0, 1]")
    on = dict(online.named_parameters())
    off = dict(offline.named_parameters())
    for name in sorted(set(on) | set(off)):
        if name not in on or name not in off:
            raise StructureMismatchError(name, "present in only one of the parameter trees")
        if on[name].shape != off[name].shape:
            raise StructureMismatchError(name, f"shape {list(on[name].shape)} vs {list(off[name].shape)}")
    if m == 1:
        return
    with torch.no_grad():
        for name, p_k in off.items():
            p_k.mul_(m).add_(on[name].detach(), alpha=1 - m)


class MomentumPair:
    """Online network plus its momentum-updated, gradient-free offline copy."""

    def __init__(self, online: nn.Module, offline: nn.Module, m: float = 0.999):
        self.online = online
        self.offline = offline
        self.m = m
        for p in offline.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_online(cls, online: nn.Module, clone: nn.Module, m: float = 0.999) -> "MomentumPair":
        clone.load_state_dict(online.state_dict())
        return cls(online, clone, m)

    def update(self) -> None:
        momentum_update(self.online, self.offline, self.m)

    def assert_offline_gradient_free(self) -> None:
        for name, p in self.offline.named_parameters():
            if p.grad is not None or p.requires_grad:
                raise AssertionError(f"momentum parameter {name!r} is attached to autograd")


# ---------------------------------------------------------------------------
# losses


def _validate(q: torch.Tensor, k: torch.Tensor, tau: float, bank: MemoryBank) -> None:
    if q.dim() != 2 or q.shape[0] == 0:
        raise ValueError("empty batch")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if k.shape != q.shape:
        raise nc.ShapeError("contrastive loss", q.shape, k.shape)
    if bank.dim != q.shape[1]:
        raise nc.ShapeError("contrastive loss", q.shape, (bank.capacity, bank.dim), detail="bank width")


def _rowdot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(dim=1)


def _negative_logits(q: torch.Tensor, negs: torch.Tensor, tau: float) -> torch.Tensor:
    # elementwise product + per-pair reduction, then a sort: the summation
    # order is then independent of where a key sits in the bank
    sims = (q[:, None, :] * negs.to(q.dtype)[None, :, :]).sum(dim=2) / tau
    return torch.sort(sims, dim=1).values


def infonce_from_logits(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Per-sample -log(sum e^pos / (sum e^neg + sum e^pos)) for [B, P] and [B, N] logits."""
    return nc.log_sum_exp(torch.cat([neg, pos], dim=1), dim=1) - nc.log_sum_exp(pos, dim=1)


def genco_loss(q: torch.Tensor, q_prime: torch.Tensor, k: torch.Tensor, bank: MemoryBank,
               tau: float = 0.2, symmetric_negatives: bool = False) -> torch.Tensor:
    _validate(q, k, tau, bank)
    if q_prime.shape != q.shape:
        raise nc.ShapeError("genco_loss", q.shape, q_prime.shape)
    k = k.detach()
    pos = torch.stack([_rowdot(q, k), _rowdot(q_prime, k)], dim=1) / tau
    negs = bank.negatives()
    neg = _negative_logits(q, negs, tau)
    if symmetric_negatives:
        neg = torch.cat([neg, _negative_logits(q_prime, negs, tau)], dim=1)
    return infonce_from_logits(pos, neg).mean()


def moco_loss(q: torch.Tensor, k: torch.Tensor, bank: MemoryBank, tau: float = 0.2) -> torch.Tensor:
    _validate(q, k, tau, bank)
    k = k.detach()
    pos = (_rowdot(q, k) / tau)[:, None]
    neg = _negative_logits(q, bank.negatives(), tau)
    return infonce_from_logits(pos, neg).mean()
