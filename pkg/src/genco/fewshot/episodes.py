"""N-way K-shot episode sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dataio import Dataset
from ..numcore import derive_seed


class InsufficientSamplesError(ValueError):
    def __init__(self, label: int, have: int, need: int):
        self.label = label
        super().__init__(f"class {label} has {have} samples, episode needs {need}")


@dataclass
class Episode:
    """Support/query split with labels remapped to 0..n_way-1.

    ``support`` and ``query`` hold (dataset index, episode label) pairs;
    ``classes[j]`` is the dataset label behind episode label j.
    """

    n_way: int
    k_shot: int
    support: list[tuple[int, int]]
    query: list[tuple[int, int]]
    classes: list[int] = field(default_factory=list)
    seed: int = 0

    @property
    def support_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.support], dtype=np.int64)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.int64)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.query], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.int64)


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, query_per_class: int = 15,
                   seed: int = 0) -> Episode:
    groups = {y: idx for y, idx in dataset.by_label().items() if y >= 0}
    if n_way < 1 or k_shot < 1:
        raise ValueError("n_way and k_shot must be positive")
    if n_way > len(groups):
        raise ValueError(f"{n_way}-way episode requested but dataset has {len(groups)} classes")
    rng = np.random.default_rng(derive_seed(seed, "episode"))
    classes = sorted(int(c) for c in rng.choice(sorted(groups), size=n_way, replace=False))
    need = k_shot + query_per_class
    for c in classes:
        if len(groups[c]) < need:
            raise InsufficientSamplesError(c, len(groups[c]), need)
    support, query = [], []
    for j, c in enumerate(classes):
        picked = rng.permutation(groups[c])[:need]
        support += [(int(i), j) for i in picked[:k_shot]]
        query += [(int(i), j) for i in picked[k_shot:]]
    return Episode(n_way, k_shot, support, query, classes, seed)


def sample_segmentation_episode(dataset: Dataset, k_shot: int, n_query: int = 20,
                                seed: int = 0) -> Episode:
    """``k_shot`` support tiles and ``n_query`` disjoint query tiles from the whole pool.

    Every synthetic shapes tile carries several classes, so support is not
    balanced per label; records keep their guaranteed class as the label.
    """
    if dataset.masks is None:
        raise ValueError("segmentation episodes need a dataset with masks")
    if k_shot + n_query > len(dataset):
        raise InsufficientSamplesError(-1, len(dataset), k_shot + n_query)
    rng = np.random.default_rng(derive_seed(seed, "seg_episode"))
    order = rng.permutation(len(dataset))
    labels = dataset.labels
    support = [(int(i), int(labels[i])) for i in order[:k_shot]]
    query = [(int(i), int(labels[i])) for i in order[k_shot:k_shot + n_query]]
    n_classes = int(dataset.masks[dataset.masks != 255].max()) + 1
    return Episode(n_classes, k_shot, support, query, list(range(n_classes)), seed)
