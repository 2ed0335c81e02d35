"""Feature-space enrichment: one generated row per real support row."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ..contrastive import Generator, NoiseSpec, generate, sample_noise
from ..numcore import ShapeError


@dataclass
class EnrichedSet:
    features: torch.Tensor  # [2M, d]; rows M.. are generated
    labels: torch.Tensor  # [2M]
    generated: torch.Tensor  # [2M] bool provenance flag

    def __len__(self) -> int:
        return self.features.shape[0]


def enrich(features: torch.Tensor, labels: torch.Tensor, G: Generator, noise: NoiseSpec,
           rng_key: int) -> EnrichedSet:
    """Real rows followed by G(real, z) rows with fresh noise and copied labels.

    Gradients flow into G, so calling this every optimisation step trains the
    generator alongside the head.
    """
    if features.dim() != 2 or features.shape[1] != G.feature_dim:
        raise ShapeError("enrich", features.shape, (features.shape[0], G.feature_dim),
                         detail="feature width vs generator")
    if noise.dim != G.noise_dim:
        raise ShapeError("enrich", (noise.dim,), (G.noise_dim,), detail="noise width")
    m = features.shape[0]
    z = sample_noise(noise, m, rng_key, dtype=features.dtype)
    fake = generate(G, features, z)
    flags = torch.cat([torch.zeros(m, dtype=torch.bool), torch.ones(m, dtype=torch.bool)])
    return EnrichedSet(torch.cat([features, fake]), torch.cat([labels, labels]), flags)
