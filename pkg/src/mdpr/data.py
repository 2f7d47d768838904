"""Datasets, augmentation and the identity-balanced batch sampler."""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AugmentConfig

logger = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    identity: int
    camera: int
    split: str
    path: str | None = None

    @property
    def is_junk(self) -> bool:
        return self.identity < 0


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W, normalized
    labels: torch.Tensor
    cameras: torch.Tensor


def parse_filename(name: str) -> tuple[int, int]:
    """Return ``(identity, camera)`` from a Market-1501 style file name."""
    m = _NAME_RE.match(Path(name).name)
    if m is None:
        raise ValueError(f"cannot parse identity/camera from {name!r}")
    return int(m.group(1)), int(m.group(2))


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if pixels.shape[:2] == tuple(size):
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).clamp(0, 1).numpy()


def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return resize(arr, size) if size is not None else arr


def load_directory_dataset(
    root: str | Path,
    size: tuple[int, int],
    splits: Sequence[str] = ("train", "query", "gallery"),
) -> list[ImageRecord]:
    """Load a Market-1501 style directory tree.

    Unparsable file names are skipped and counted. A requested split with no
    images raises ``ValueError("empty <split> split")``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    records: list[ImageRecord] = []
    skipped = 0
    for split in splits:
        folder = root / SPLIT_DIRS[split]
        files = sorted(folder.glob("*.jpg")) + sorted(folder.glob("*.png")) if folder.is_dir() else []
        count = 0
        for f in files:
            try:
                pid, cam = parse_filename(f.name)
            except ValueError:
                skipped += 1
                continue
            records.append(ImageRecord(read_image(f, size), pid, cam, split, str(f)))
            count += 1
        if count == 0:
            raise ValueError(f"empty {split} split")
    if skipped:
        logger.warning("skipped %d files with unparsable names under %s", skipped, root)
    return records


_PALETTE = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.60, 0.85],
        [0.90, 0.80, 0.25],
        [0.25, 0.70, 0.30],
        [0.55, 0.30, 0.70],
        [0.15, 0.15, 0.15],
    ],
    dtype=np.float32,
)


def _identity_style(seed: int, pid: int) -> dict:
    # colours come from a small shared palette so identities overlap in
    # colour statistics and differ mainly by layout and texture
    rng = np.random.default_rng([seed, pid, 7919])
    upper, lower, accent = rng.choice(len(_PALETTE), size=3, replace=False)
    return {
        "upper": _PALETTE[upper],
        "lower": _PALETTE[lower],
        "accent": _PALETTE[accent],
        "period": int(rng.integers(3, 10)),
        "split": float(rng.uniform(0.35, 0.65)),
        "vertical": bool(rng.integers(0, 2)),
    }


def _render(style: dict, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    img += rng.normal(0, 0.08, size=(h, w, 1)).astype(np.float32)

    dy = int(rng.integers(-h // 10, h // 10 + 1))
    dx = int(rng.integers(-w // 6, w // 6 + 1))
    top, bottom = max(0, h // 12 + dy), min(h, h - h // 20 + dy)
    left, right = max(0, w // 5 + dx), min(w, w - w // 5 + dx)
    mid = top + int((bottom - top) * style["split"])

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    img[top:mid, left:right] = style["upper"]
    stripes = ((cols if style["vertical"] else rows) // style["period"]) % 2 == 0
    stripes = np.broadcast_to(stripes, (h, w))
    region = np.zeros((h, w), dtype=bool)
    region[top:mid, left:right] = True
    img[region & stripes] = style["accent"]
    img[mid:bottom, left:right] = style["lower"]

    # a random palette-coloured occluder
    oh, ow = int(rng.integers(h // 8, h // 3)), int(rng.integers(w // 6, w // 2))
    oy, ox = int(rng.integers(0, h - oh)), int(rng.integers(0, w - ow))
    img[oy : oy + oh, ox : ox + ow] = _PALETTE[rng.integers(len(_PALETTE))]

    img *= np.float32(rng.uniform(0.7, 1.3))
    img += rng.normal(0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(
    n_ids: int,
    images_per_id: int,
    size: tuple[int, int],
    seed: int,
    split: str = "train",
    start_index: int = 0,
) -> list[ImageRecord]:
    """Procedural pedestrians: each identity is a fixed colour/stripe outfit.

    Instances differ by position, brightness, background and pixel noise.
    Cameras alternate 0/1 by image index. ``start_index`` offsets the
    per-image jitter stream so held-out images of the same identities can be
    generated without overlapping the training ones.
    """
    if n_ids < 2 or images_per_id < 2:
        raise ValueError("need at least 2 identities and 2 images per identity")
    records = []
    for pid in range(n_ids):
        style = _identity_style(seed, pid)
        for j in range(start_index, start_index + images_per_id):
            rng = np.random.default_rng([seed, pid, j])
            records.append(ImageRecord(_render(style, size, rng), pid, j % 2, split))
    return records


def synthetic_splits(
    n_ids: int,
    train_per_id: int,
    eval_per_id: int,
    size: tuple[int, int],
    seed: int,
) -> tuple[list[ImageRecord], list[ImageRecord], list[ImageRecord]]:
    """Train set plus a held-out query/gallery split over the same identities.

    The first held-out image of each identity (camera 0) is the query; the
    rest form the gallery.
    """
    train = generate_synthetic_dataset(n_ids, train_per_id, size, seed, "train")
    held = generate_synthetic_dataset(
        n_ids, eval_per_id, size, seed, "gallery", start_index=train_per_id + (train_per_id % 2)
    )
    query, gallery = [], []
    for i, rec in enumerate(held):
        if i % eval_per_id == 0:
            rec.split = "query"
            query.append(rec)
        else:
            gallery.append(rec)
    return train, query, gallery


def dump_records(records: Sequence[ImageRecord], out_dir: str | Path) -> list[Path]:
    """Write records as Market-1501 style PNG files for inspection."""
    out_dir = Path(out_dir)
    paths = []
    for i, rec in enumerate(records):
        folder = out_dir / SPLIT_DIRS[rec.split]
        folder.mkdir(parents=True, exist_ok=True)
        p = folder / f"{rec.identity:04d}_c{rec.camera}s1_{i:06d}_00.png"
        Image.fromarray((rec.pixels * 255).round().astype(np.uint8)).save(p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- augmentation


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def normalize(pixels: np.ndarray) -> torch.Tensor:
    """HWC image in [0, 1] -> normalized CHW tensor."""
    out = (pixels - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32))


def _sample_rect(
    h: int,
    w: int,
    area: tuple[float, float],
    aspect: tuple[float, float],
    rng: np.random.Generator,
    attempts: int = 100,
) -> tuple[int, int] | None:
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        rh = int(round(math.sqrt(target * ratio)))
        rw = int(round(math.sqrt(target / ratio)))
        if 0 < rh < h and 0 < rw < w:
            return rh, rw
    return None


def random_erase(
    pixels: np.ndarray,
    rng: np.random.Generator,
    area: tuple[float, float] = (0.02, 0.4),
    aspect: tuple[float, float] = (0.3, 3.33),
) -> tuple[np.ndarray, tuple[int, int, int, int] | None]:
    """Fill one random rectangle with the channel means.

    Returns the new image and the ``(top, left, height, width)`` rectangle,
    or ``None`` when no rectangle fit.
    """
    h, w = pixels.shape[:2]
    hw = _sample_rect(h, w, area, aspect, rng)
    if hw is None:
        return pixels, None
    rh, rw = hw
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    out = pixels.copy()
    out[top : top + rh, left : left + rw] = IMAGENET_MEAN
    return out, (top, left, rh, rw)


def random_patch(
    pixels: np.ndarray,
    source: np.ndarray,
    rng: np.random.Generator,
    area: tuple[float, float] = (0.01, 0.5),
    aspect: tuple[float, float] = (0.1, 10.0),
) -> np.ndarray:
    """Paste a random crop of ``source`` at a random spot of ``pixels``."""
    h, w = pixels.shape[:2]
    hw = _sample_rect(h, w, area, aspect, rng)
    if hw is None:
        return pixels
    rh, rw = hw
    sy = int(rng.integers(0, source.shape[0] - rh + 1))
    sx = int(rng.integers(0, source.shape[1] - rw + 1))
    patch = source[sy : sy + rh, sx : sx + rw]
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    ty = int(rng.integers(0, h - rh + 1))
    tx = int(rng.integers(0, w - rw + 1))
    out = pixels.copy()
    out[ty : ty + rh, tx : tx + rw] = patch
    return out


class Augmenter:
    """Training transform: resize, flip, erase, patch, normalize.

    ``pool`` holds the images random-patch may copy from; the trainer sets it
    to the images of the current epoch.
    """

    def __init__(self, size: tuple[int, int], cfg: AugmentConfig | None = None):
        self.size = tuple(size)
        self.cfg = cfg or AugmentConfig()
        self.pool: list[np.ndarray] = []

    def __call__(self, record: ImageRecord, rng: np.random.Generator) -> torch.Tensor:
        return augment(record, rng, self.size, self.cfg, self.pool)


def augment(
    record: ImageRecord,
    rng: np.random.Generator,
    size: tuple[int, int],
    cfg: AugmentConfig | None = None,
    pool: Sequence[np.ndarray] = (),
) -> torch.Tensor:
    cfg = cfg or AugmentConfig()
    img = resize(record.pixels, size)
    if rng.random() < cfg.flip_prob:
        img = hflip(img)
    if rng.random() < cfg.erase_prob:
        img, _ = random_erase(img, rng, cfg.erase_area, cfg.erase_aspect)
    if rng.random() < cfg.patch_prob and len(pool) > 0:
        source = resize(pool[int(rng.integers(0, len(pool)))], size)
        img = random_patch(img, source, rng, cfg.patch_area, cfg.patch_aspect)
    return normalize(img)


def eval_transform(record: ImageRecord, size: tuple[int, int]) -> torch.Tensor:
    return normalize(resize(record.pixels, size))


# -------------------------------------------------------------------- sampler


class PKSampler:
    """Yields index lists of P identities x S images each.

    An epoch has ``max(ceil(n_ids / P), n_images // (P * S))`` batches and
    visits every identity at least once. Identities with fewer than S images
    are filled by sampling with replacement. Each epoch's order depends only
    on ``(seed, epoch)``.
    """

    def __init__(self, records: Sequence[ImageRecord], P: int, S: int, seed: int = 0):
        self.P, self.S, self.seed = P, S, seed
        index = defaultdict(list)
        for i, rec in enumerate(records):
            if not rec.is_junk:
                index[rec.identity].append(i)
        self.index = dict(sorted(index.items()))
        if len(self.index) < P:
            raise ValueError(f"need at least P={P} identities, found {len(self.index)}")
        n_images = sum(len(v) for v in self.index.values())
        self.batches_per_epoch = max(math.ceil(len(self.index) / P), n_images // (P * S))

    def __len__(self) -> int:
        return self.batches_per_epoch

    def epoch(self, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng([self.seed, epoch, 104729])
        ids = list(self.index)
        queue: list[int] = []
        batches = []
        for _ in range(self.batches_per_epoch):
            chosen: list[int] = []
            while len(chosen) < self.P:
                if not queue:
                    queue = [ids[i] for i in rng.permutation(len(ids))]
                for k, pid in enumerate(queue):
                    if pid not in chosen:
                        chosen.append(queue.pop(k))
                        break
                else:
                    queue = []
            batch = []
            for pid in chosen:
                pool = self.index[pid]
                if len(pool) >= self.S:
                    picks = rng.choice(pool, size=self.S, replace=False)
                else:
                    extra = rng.choice(pool, size=self.S - len(pool), replace=True)
                    picks = np.concatenate([rng.permutation(pool), extra])
                batch.extend(int(i) for i in picks)
            batches.append(batch)
        return batches


def pk_batches(
    records: Sequence[ImageRecord],
    sampler: PKSampler,
    epoch: int,
    transform=None,
) -> Iterator[Batch]:
    """Materialize one epoch of :class:`Batch` objects.

    ``transform(record, rng)`` defaults to normalization only. Augmentation
    randomness is seeded from ``(sampler.seed, epoch)`` so batch contents are
    reproducible.
    """
    rng = np.random.default_rng([sampler.seed, epoch, 15485863])
    for idx in sampler.epoch(epoch):
        recs = [records[i] for i in idx]
        if transform is None:
            imgs = [normalize(r.pixels) for r in recs]
        else:
            imgs = [transform(r, rng) for r in recs]
        yield Batch(
            images=torch.stack(imgs),
            labels=torch.tensor([r.identity for r in recs], dtype=torch.long),
            cameras=torch.tensor([r.camera for r in recs], dtype=torch.long),
        )


def pk_sampler(
    records: Sequence[ImageRecord], P: int, S: int, seed: int = 0, epochs: int = 1, transform=None
) -> Iterator[Batch]:
    """Stream of batches over ``epochs`` epochs."""
    sampler = PKSampler(records, P, S, seed)
    for e in range(epochs):
        yield from pk_batches(records, sampler, e, transform)
