"""Tile and mask files, synthetic corpora, and two-view augmentation."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .numcore import derive_seed

TILE_MAGIC = b"GCTL"
MASK_MAGIC = b"GCMK"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBBHII")
IGNORE = 255


class TileFormatError(ValueError):
    """Malformed tile or mask file; ``offset`` is the byte where parsing failed."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {reason} at offset {offset}")


class AugmentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# file formats


def write_tile(tile: np.ndarray, path) -> None:
    """Write a [C, H, W] float tile (C in {3, 4}, values in [0, 1])."""
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[0] not in (3, 4):
        raise ValueError(f"tile must be [3|4, H, W], got {list(tile.shape)}")
    if not np.all(np.isfinite(tile)) or tile.min(initial=0) < 0 or tile.max(initial=0) > 1:
        raise ValueError("tile values must be finite and within [0, 1]")
    c, h, w = tile.shape
    head = HEADER.pack(TILE_MAGIC, FORMAT_VERSION, c, 0, h, w)
    Path(path).write_bytes(head + tile.astype("<f4").tobytes(order="C"))


def read_tile(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TileFormatError(path, len(raw), "truncated header")
    magic, version, c, _, h, w = HEADER.unpack_from(raw)
    if magic != TILE_MAGIC:
        raise TileFormatError(path, 0, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TileFormatError(path, 4, f"unsupported version {version}")
    if c not in (3, 4):
        raise TileFormatError(path, 5, f"channel count {c} not in {{3, 4}}")
    need = HEADER.size + 4 * c * h * w
    if len(raw) != need:
        raise TileFormatError(path, min(len(raw), need), f"expected {need} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(c, h, w)
    return data.astype(np.float32)


def write_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be [H, W], got {list(mask.shape)}")
    h, w = mask.shape
    head = HEADER.pack(MASK_MAGIC, FORMAT_VERSION, 0, 0, h, w)
    Path(path).write_bytes(head + mask.astype(np.uint8).tobytes(order="C"))


def read_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TileFormatError(path, len(raw), "truncated header")
    magic, version, _, _, h, w = HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise TileFormatError(path, 0, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TileFormatError(path, 4, f"unsupported version {version}")
    need = HEADER.size + h * w
    if len(raw) != need:
        raise TileFormatError(path, min(len(raw), need), f"expected {need} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=HEADER.size).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthSpec:
    n_classes: int = 3
    n_per_class: int = 200
    channels: int = 4
    size: int = 32
    seed: int = 0
    task: str = "classification"


def _class_texture(rng: np.random.Generator, cls: int, n_classes: int, channels: int, size: int) -> np.ndarray:
    # class identity lives in spatial frequency and colour; orientation varies
    # by class but 90-degree augmentation symmetry means it is a weak cue
    freqs = (1.5, 4.0, 9.0)
    freq = freqs[cls % 3] * (1.0 + 0.35 * (cls // 3))
    theta = math.pi * ((cls * 0.382) % 1.0) + rng.normal(0, 0.08)
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)

    blob = np.zeros((size, size))
    sigma = 0.5 / freq
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0, 1, 2)
        blob += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    blob = blob / max(blob.max(), 1e-9)

    pattern = 0.6 * wave + 0.4 * (2 * blob - 1)
    hue = np.random.default_rng(1000 + cls).uniform(0.2, 0.8, channels)
    tile = np.empty((channels, size, size))
    for c in range(channels):
        tile[c] = hue[c] + 0.18 * pattern * (1 if c % 2 == 0 else 0.7)
    tile += rng.normal(0, 0.03, tile.shape)
    return np.clip(tile, 0, 1).astype(np.float32)


_SHAPE_COLOURS = np.array([
    [0.85, 0.20, 0.15, 0.60],
    [0.15, 0.75, 0.25, 0.90],
    [0.20, 0.30, 0.85, 0.30],
    [0.85, 0.80, 0.15, 0.50],
    [0.70, 0.20, 0.80, 0.75],
    [0.15, 0.80, 0.80, 0.20],
])


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(0.12, 0.22) * size
    cx, cy = rng.uniform(r, size - r, 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    kind = kind % 3
    if kind == 0:  # axis-aligned square
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if kind == 1:  # disk
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (1.15 * r) ** 2
    # upward triangle
    top, bottom = cy - 1.1 * r, cy + 1.1 * r
    half = (yy - top) / (bottom - top) * 1.2 * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def _shapes_tile(rng: np.random.Generator, primary: int, n_fg: int, channels: int, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bg = 0.45 + 0.05 * np.sin(2 * math.pi * 3 * (xx + yy) + rng.uniform(0, 6.3))
    tile = np.repeat(bg[None], channels, axis=0) + rng.normal(0, 0.03, (channels, size, size))
    mask = np.zeros((size, size), dtype=np.int64)
    classes = [primary] + list(rng.integers(1, n_fg + 1, int(rng.integers(0, 4))))
    for cls in classes:
        region = _shape_mask(cls - 1, size, rng)
        colour = _SHAPE_COLOURS[(cls - 1) % len(_SHAPE_COLOURS)][:channels]
        if cls > len(_SHAPE_COLOURS):
            colour = 1 - colour
        tile[:, region] = colour[:, None] + rng.normal(0, 0.03, (channels, int(region.sum())))
        mask[region] = cls
    # one-pixel band around every label boundary is ignored
    pad = np.pad(mask, 1, mode="edge")
    edge = np.zeros_like(mask, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            edge |= pad[1 + dy:1 + dy + size, 1 + dx:1 + dx + size] != mask
    mask[edge] = IGNORE
    return np.clip(tile, 0, 1).astype(np.float32), mask.astype(np.uint8)


def synth_dataset(spec: SynthSpec, out_dir, provenance: dict | None = None) -> Path:
    """Write a deterministic synthetic corpus and its ``index.jsonl``.

    Classification: ``n_classes`` texture families. Segmentation: ``n_classes``
    foreground shape classes (mask values 0..n_classes, background 0, 255 on
    shape boundaries); each record's label is the tile's guaranteed shape class.
    """
    if spec.n_classes < 2 and spec.task == "classification":
        raise ValueError("n_classes must be >= 2")
    if spec.n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if spec.task not in ("classification", "segmentation"):
        raise ValueError(f"unknown task {spec.task!r}")
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    if spec.task == "segmentation":
        (out / "masks").mkdir(exist_ok=True)
    records = []
    idx = 0
    for cls in range(spec.n_classes):
        for j in range(spec.n_per_class):
            rng = np.random.default_rng(derive_seed(spec.seed, "synth", cls, j))
            rec = {"tile": f"tiles/{idx:06d}.gct"}
            if spec.task == "classification":
                tile = _class_texture(rng, cls, spec.n_classes, spec.channels, spec.size)
                rec["label"] = cls
            else:
                tile, mask = _shapes_tile(rng, cls + 1, spec.n_classes, spec.channels, spec.size)
                rec["mask"] = f"masks/{idx:06d}.gcm"
                rec["label"] = cls + 1
                write_mask(mask, out / rec["mask"])
            write_tile(tile, out / rec["tile"])
            records.append(rec)
            idx += 1
    with open(out / "index.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    meta = {"spec": asdict(spec), "provenance": provenance or {}}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    root: Path
    tiles: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64, -1 when absent
    masks: np.ndarray | None = None  # [N, H, W] uint8
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def task(self) -> str:
        return "segmentation" if self.masks is not None else "classification"

    def by_label(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, y in enumerate(self.labels.tolist()):
            out.setdefault(y, []).append(i)
        return dict(sorted(out.items()))


def load_dataset(root) -> Dataset:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.is_file():
        raise FileNotFoundError(f"no dataset index at {index}")
    tiles, labels, masks = [], [], []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        tiles.append(read_tile(root / rec["tile"]))
        labels.append(rec.get("label", -1))
        if "mask" in rec:
            m = read_mask(root / rec["mask"])
            if m.shape != tiles[-1].shape[1:]:
                raise ValueError(f"{rec['mask']}: mask {m.shape} does not match tile {tiles[-1].shape}")
            masks.append(m)
    if masks and len(masks) != len(tiles):
        raise ValueError("index mixes records with and without masks")
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    return Dataset(root, np.stack(tiles), np.asarray(labels, dtype=np.int64),
                   np.stack(masks) if masks else None, meta)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_prob: float = 0.2
    rotation_choices: tuple[int, ...] = (0, 90, 180, 270)
    output_size: int = 32

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range {self.crop_scale_range} must lie within (0, 1]")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name}={p} outside [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.rotation_choices or any(r not in (0, 90, 180, 270) for r in self.rotation_choices):
            raise ValueError(f"rotation_choices {self.rotation_choices} must be a nonempty subset of 0/90/180/270")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")


def _resize(crop: np.ndarray, size: int) -> np.ndarray:
    if crop.shape[1] == size and crop.shape[2] == size:
        return crop.copy()
    t = torch.from_numpy(np.ascontiguousarray(crop))[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy()


def _gray(x: np.ndarray) -> np.ndarray:
    return x[:3].mean(axis=0)


def _view(tile: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    c, h, w = tile.shape
    scale = rng.uniform(*cfg.crop_scale_range)
    side = int(round(math.sqrt(scale * h * w)))
    side = min(side, h, w)
    if side < 1:
        raise AugmentError(f"crop scale {scale:.3g} yields a sub-pixel region on a {h}x{w} tile")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    x = _resize(tile[:, top:top + side, left:left + side], cfg.output_size)

    if rng.random() < cfg.flip_prob:
        x = x[:, :, ::-1]
    rot = cfg.rotation_choices[int(rng.integers(0, len(cfg.rotation_choices)))]
    if rot:
        x = np.rot90(x, k=rot // 90, axes=(1, 2))
    x = np.array(x, dtype=np.float32)

    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        ct = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        x = np.clip(x * b, 0, 1)
        mean = x.mean(axis=(1, 2), keepdims=True)
        x = np.clip((x - mean) * ct + mean, 0, 1)
        g = _gray(x)
        x[:3] = np.clip((x[:3] - g) * s + g, 0, 1)
    if rng.random() < cfg.grayscale_prob:
        x[:3] = _gray(x)
    return x.astype(np.float32)


def augment_pair(tile: np.ndarray, cfg: AugmentConfig, rng_key: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views (x_q, x_k) of ``tile``, fully determined by ``rng_key``.

    Brightness and contrast touch every channel; saturation and grayscale
    only the RGB channels, so NIR keeps its radiometry.
    """
    if tile.shape[1] < cfg.output_size or tile.shape[2] < cfg.output_size:
        raise AugmentError(f"tile {list(tile.shape)} smaller than output_size {cfg.output_size}")
    q = _view(tile, cfg, np.random.default_rng(derive_seed(rng_key, "q")))
    k = _view(tile, cfg, np.random.default_rng(derive_seed(rng_key, "k")))
    return q, k
