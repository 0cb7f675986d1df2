"""Synthetic multi-object scene datasets.

Scenes are 3xHxW float32 images in [0, 1]: a gray, lightly noisy
background with 1-4 colored glyphs. Labels are multi-hot class sets;
which classes may appear together is governed by an allowed-pairs list,
so the train split's co-occurrence matrix is exactly the pair vocabulary
once every pair has been sampled.

Two render distributions share class names and glyph assignment but
differ in palette, background, and object size statistics, giving a
controlled domain gap for transfer experiments.
"""

from __future__ import annotations

import colorsys
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import atomic_write_bytes, atomic_write_text
from .errors import ConfigError, DataFormatError
from .rng import Streams

DATASET_MAGIC = b"GAMD"
DATASET_VERSION = 1

# Glyph vocabulary: order is part of the artifact contract.
GLYPH_NAMES = ("disk", "ring", "square", "diamond", "cross", "ex",
               "triangle", "vee", "bars", "rails")

DISTRIBUTIONS = {
    "shapes-a": dict(hue_shift=0.00, sat=0.85, val=0.92, bg_level=0.45,
                     bg_noise=0.03, pixel_noise=0.015, size_lo=4.0, size_hi=6.5,
                     contrast=0.40),
    "shapes-b": dict(hue_shift=0.13, sat=0.60, val=0.98, bg_level=0.55,
                     bg_noise=0.05, pixel_noise=0.025, size_lo=4.5, size_hi=7.5,
                     contrast=0.40),
}


def class_palette(n_classes: int, distribution_id: str) -> np.ndarray:
    style = DISTRIBUTIONS[distribution_id]
    cols = np.empty((n_classes, 3), dtype=np.float32)
    for i in range(n_classes):
        hue = (i / n_classes + style["hue_shift"]) % 1.0
        cols[i] = colorsys.hsv_to_rgb(hue, style["sat"], style["val"])
    return cols


def _soft(x: np.ndarray) -> np.ndarray:
    # half-pixel linear edge ramp
    return np.clip(x + 0.5, 0.0, 1.0)


def glyph_mask(glyph: str, h: int, w: int, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy = yy - cy
    dx = xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if glyph == "disk":
        return _soft(s - np.sqrt(dy * dy + dx * dx))
    if glyph == "ring":
        d = np.sqrt(dy * dy + dx * dx)
        return _soft(0.32 * s - np.abs(d - 0.75 * s))
    if glyph == "square":
        return _soft(0.9 * s - np.maximum(ady, adx))
    if glyph == "diamond":
        return _soft(1.2 * s - (ady + adx))
    if glyph == "cross":
        v = np.minimum(_soft(0.35 * s - adx), _soft(s - ady))
        hbar = np.minimum(_soft(0.35 * s - ady), _soft(s - adx))
        return np.maximum(v, hbar)
    if glyph == "ex":
        u = (dx + dy) / np.sqrt(2.0)
        t = (dx - dy) / np.sqrt(2.0)
        a = np.minimum(_soft(0.35 * s - np.abs(u)), _soft(s - np.abs(t)))
        b = np.minimum(_soft(0.35 * s - np.abs(t)), _soft(s - np.abs(u)))
        return np.maximum(a, b)
    if glyph == "triangle":
        grow = _soft(0.62 * (dy + s) - adx)
        return np.minimum(grow, _soft(s - ady))
    if glyph == "vee":
        stroke = _soft(0.30 * s - np.abs(adx - 0.55 * (dy + s)))
        return np.minimum(stroke, _soft(s - ady))
    if glyph == "bars":
        return np.minimum(_soft(0.25 * s - np.abs(adx - 0.6 * s)), _soft(s - ady))
    if glyph == "rails":
        return np.minimum(_soft(0.25 * s - np.abs(ady - 0.6 * s)), _soft(s - adx))
    raise ConfigError(f"unknown glyph {glyph!r}")


@dataclass
class DatasetConfig:
    n_classes: int = 6
    n_samples: int = 600
    dims: tuple = (3, 32, 32)
    distribution_id: str = "shapes-a"
    allowed_pairs: list | str = "auto"
    seed: int = 0
    max_objects: int = 4
    singleton_fraction: float = 0.3
    test_fraction: float = 0.2


@dataclass
class SceneDataset:
    images: np.ndarray          # (N, T, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N, C) uint8 multi-hot
    class_names: list
    allowed_pairs: list         # [(i, j), ...] with i < j
    split_indices: dict         # {"train": ndarray, "test": ndarray}
    distribution_id: str
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def dims(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split_indices[split]
        return self.images[idx], self.labels[idx]


def auto_pairs(n_classes: int) -> list[tuple[int, int]]:
    """Default pair vocabulary: a ring over the classes plus cross-chords."""
    pairs = {tuple(sorted((i, (i + 1) % n_classes))) for i in range(n_classes)}
    half = n_classes // 2
    for i in range(half):
        pairs.add(tuple(sorted((i, i + half))))
    return sorted(pairs)


def _validate_config(cfg: DatasetConfig) -> list[tuple[int, int]]:
    c = cfg.n_classes
    if not 6 <= c <= 10:
        raise ConfigError(f"n_classes must be in [6, 10], got {c}")
    if cfg.n_samples < c:
        raise ConfigError(f"n_samples must be >= n_classes, got {cfg.n_samples}")
    if cfg.distribution_id not in DISTRIBUTIONS:
        raise ConfigError(f"unknown distribution {cfg.distribution_id!r}; "
                          f"known: {sorted(DISTRIBUTIONS)}")
    t, h, w = cfg.dims
    if t != 3 or h < 16 or w < 16:
        raise ConfigError(f"dims must be (3, H>=16, W>=16), got {cfg.dims}")
    if not 1 <= cfg.max_objects <= 4:
        raise ConfigError(f"max_objects must be in [1, 4], got {cfg.max_objects}")
    if cfg.allowed_pairs == "auto":
        pairs = auto_pairs(c)
    else:
        pairs = [tuple(sorted((int(i), int(j)))) for i, j in cfg.allowed_pairs]
        if len(set(pairs)) != len(pairs):
            raise ConfigError("allowed_pairs contains duplicates")
        for i, j in pairs:
            if i == j or not (0 <= i < c and 0 <= j < c):
                raise ConfigError(f"bad pair ({i}, {j}) for {c} classes")
    if not pairs and cfg.max_objects > 1:
        raise ConfigError("allowed_pairs must be nonempty when max_objects > 1")
    if not 0.05 <= cfg.test_fraction <= 0.5:
        raise ConfigError(f"test_fraction must be in [0.05, 0.5], got {cfg.test_fraction}")
    return pairs


def _plan_label_sets(cfg: DatasetConfig, pairs: list, train_order: np.ndarray,
                     test_order: np.ndarray, rng: np.random.Generator) -> list:
    """Assign a class set to every sample index. The first train samples
    walk each class and each allowed pair once, so coverage of both is
    guaranteed whenever the train split is large enough."""
    c = cfg.n_classes
    label_sets: list = [None] * cfg.n_samples

    def random_set() -> tuple:
        if cfg.max_objects == 1 or not pairs or rng.random() < cfg.singleton_fraction:
            return (int(rng.integers(0, c)),)
        return pairs[int(rng.integers(0, len(pairs)))]

    coverage: list[tuple] = [(k,) for k in range(c)]
    if cfg.max_objects > 1:
        coverage += list(pairs)
    for pos, idx in enumerate(train_order):
        label_sets[idx] = coverage[pos] if pos < len(coverage) else random_set()
    for idx in test_order:
        label_sets[idx] = random_set()
    return label_sets


def _render_scene(label_set: tuple, cfg: DatasetConfig, palette: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    style = DISTRIBUTIONS[cfg.distribution_id]
    _, h, w = cfg.dims
    img = np.full((3, h, w), style["bg_level"], dtype=np.float32)
    img += rng.uniform(-style["bg_noise"], style["bg_noise"],
                       size=(1, h, w)).astype(np.float32)

    if cfg.max_objects == 1:
        instances = list(label_set)
    else:
        budget = cfg.max_objects - len(label_set)
        extras = int(rng.integers(0, budget + 1)) if budget > 0 else 0
        instances = list(label_set) + [int(label_set[int(rng.integers(0, len(label_set)))])
                                       for _ in range(extras)]

    placed: list[tuple[float, float, float]] = []
    for cls in instances:
        s = float(rng.uniform(style["size_lo"], style["size_hi"]))
        margin = s + 1.5
        cy = cx = None
        for _ in range(40):
            ty = float(rng.uniform(margin, h - 1 - margin))
            tx = float(rng.uniform(margin, w - 1 - margin))
            if all((ty - py) ** 2 + (tx - px) ** 2 >= (1.1 * max(s, ps)) ** 2
                   for py, px, ps in placed):
                cy, cx = ty, tx
                break
        if cy is None:  # crowded canvas: accept the last draw
            cy = float(rng.uniform(margin, h - 1 - margin))
            cx = float(rng.uniform(margin, w - 1 - margin))
        placed.append((cy, cx, s))
        mask = glyph_mask(GLYPH_NAMES[cls], h, w, cy, cx, s)
        intensity = float(rng.uniform(0.75, 1.0))
        # low glyph-background contrast keeps classifier margins near the
        # attack budget; full-contrast glyphs are unflippable at eps=10/255
        color = style["bg_level"] + style["contrast"] * (palette[cls] * intensity
                                                         - style["bg_level"])
        img = img * (1.0 - mask) + color[:, None, None] * mask

    img += rng.normal(0.0, style["pixel_noise"], size=(3, h, w)).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(cfg: DatasetConfig) -> SceneDataset:
    """Deterministically build scenes, labels, and a disjoint train/test
    split from the config's seed alone."""
    pairs = _validate_config(cfg)
    streams = Streams(cfg.seed)
    plan_rng = streams.stream("dataset", 0)

    n = cfg.n_samples
    perm = plan_rng.permutation(n)
    n_test = max(1, int(round(n * cfg.test_fraction)))
    test_order = perm[:n_test]
    train_order = perm[n_test:]
    label_sets = _plan_label_sets(cfg, pairs, train_order, test_order, plan_rng)

    c = cfg.n_classes
    palette = class_palette(c, cfg.distribution_id)
    t, h, w = cfg.dims
    images = np.empty((n, t, h, w), dtype=np.float32)
    labels = np.zeros((n, c), dtype=np.uint8)
    for i in range(n):
        sample_rng = streams.stream("dataset", 1 + i)
        images[i] = _render_scene(label_sets[i], cfg, palette, sample_rng)
        for cls in label_sets[i]:
            labels[i, cls] = 1

    return SceneDataset(
        images=images,
        labels=labels,
        class_names=list(GLYPH_NAMES[:c]),
        allowed_pairs=pairs,
        split_indices={"train": np.sort(train_order), "test": np.sort(test_order)},
        distribution_id=cfg.distribution_id,
        seed=cfg.seed,
        extra={"max_objects": cfg.max_objects},
    )


def compute_cooccurrence(dataset: SceneDataset, split: str = "train") -> np.ndarray:
    """Symmetric (C, C) binary matrix: 1 where two classes share a scene."""
    if split not in dataset.split_indices:
        raise ConfigError(f"unknown split {split!r}")
    _, labels = dataset.subset(split)
    c = labels.shape[1]
    o = np.zeros((c, c), dtype=np.uint8)
    for row in labels:
        present = np.flatnonzero(row)
        for a_i in range(len(present)):
            for b_i in range(a_i + 1, len(present)):
                o[present[a_i], present[b_i]] = 1
                o[present[b_i], present[a_i]] = 1
    return o


def captions(dataset: SceneDataset) -> list[str]:
    """Ground-truth caption per sample: class names joined with 'and'
    under the fixed prefix, in class-index order."""
    out = []
    for row in dataset.labels:
        names = [dataset.class_names[i] for i in np.flatnonzero(row)]
        out.append("a photo depicts " + " and ".join(names))
    return out


# serialization -----------------------------------------------------------


def _pack_labels(row: np.ndarray) -> bytes:
    nbytes = (len(row) + 7) // 8
    out = bytearray(nbytes)
    for i, v in enumerate(row):
        if v:
            out[i >> 3] |= 1 << (i & 7)  # LSB-first within each byte
    return bytes(out)


def _unpack_labels(raw: bytes, c: int) -> np.ndarray:
    row = np.zeros(c, dtype=np.uint8)
    for i in range(c):
        if raw[i >> 3] & (1 << (i & 7)):
            row[i] = 1
    return row


def save_dataset(dataset: SceneDataset, path: str | Path) -> None:
    n, t, h, w = dataset.images.shape
    c = dataset.n_classes
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    buf.write(struct.pack("<H", c))
    buf.write(struct.pack("<I", n))
    buf.write(struct.pack("<B", t))
    buf.write(struct.pack("<H", h))
    buf.write(struct.pack("<H", w))
    for i in range(n):
        buf.write(_pack_labels(dataset.labels[i]))
        buf.write(np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes())
    payload = buf.getvalue()
    atomic_write_bytes(path, payload + struct.pack("<I", zlib.crc32(payload)))

    manifest = {
        "distribution_id": dataset.distribution_id,
        "seed": dataset.seed,
        "class_names": dataset.class_names,
        "allowed_pairs": [list(p) for p in dataset.allowed_pairs],
        "split_indices": {k: [int(i) for i in v]
                          for k, v in dataset.split_indices.items()},
        "extra": dataset.extra,
    }
    atomic_write_text(Path(str(path) + ".json"),
                      json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_dataset(path: str | Path) -> SceneDataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such dataset {path}")
    data = path.read_bytes()
    if len(data) < 21:
        raise DataFormatError(f"truncated dataset {path}")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored:
        raise DataFormatError(f"checksum mismatch in {path}")
    body = data[:-4]
    if body[:4] != DATASET_MAGIC:
        raise DataFormatError(f"bad magic in {path}")
    version, = struct.unpack_from("<H", body, 4)
    if version != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    c, = struct.unpack_from("<H", body, 6)
    n, = struct.unpack_from("<I", body, 8)
    t, = struct.unpack_from("<B", body, 12)
    h, = struct.unpack_from("<H", body, 13)
    w, = struct.unpack_from("<H", body, 15)
    pos = 17
    label_bytes = (c + 7) // 8
    frame = 4 * t * h * w
    if len(body) != pos + n * (label_bytes + frame):
        raise DataFormatError(f"size mismatch in {path}")
    labels = np.zeros((n, c), dtype=np.uint8)
    images = np.empty((n, t, h, w), dtype=np.float32)
    for i in range(n):
        labels[i] = _unpack_labels(body[pos:pos + label_bytes], c)
        pos += label_bytes
        images[i] = np.frombuffer(body[pos:pos + frame], dtype="<f4").reshape(t, h, w)
        pos += frame

    side = Path(str(path) + ".json")
    if not side.exists():
        raise DataFormatError(f"missing dataset manifest {side}")
    try:
        manifest = json.loads(side.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"corrupt dataset manifest {side}: {e}") from e

    return SceneDataset(
        images=images,
        labels=labels,
        class_names=list(manifest["class_names"]),
        allowed_pairs=[tuple(p) for p in manifest["allowed_pairs"]],
        split_indices={k: np.asarray(v, dtype=np.int64)
                       for k, v in manifest["split_indices"].items()},
        distribution_id=manifest["distribution_id"],
        seed=int(manifest["seed"]),
        extra=manifest.get("extra", {}),
    )
