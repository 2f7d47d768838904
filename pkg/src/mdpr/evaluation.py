"""Inference feature assembly, cosine ranking and mAP/CMC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageOps

from .config import TRAINING_ONLY_NAMES
from .data import ImageRecord, eval_transform, read_image

# fixed concatenation order; partition names are slotted in after f_hard_g5
_ORDER_HEAD = ("f_hard_g5",)
_ORDER_TAIL = ("f_soft_g5", "f_soft_g4", "f_fusion")


def feature_order(names: Sequence[str]) -> list[str]:
    parts = sorted((n for n in names if n.startswith("f_hard_p")), key=lambda n: int(n[len("f_hard_p"):]))
    ordered = [n for n in _ORDER_HEAD if n in names] + parts + [n for n in _ORDER_TAIL if n in names]
    return ordered


def assemble_features(
    features: dict[str, torch.Tensor], selection: Sequence[str], normalize_components: bool = False
) -> torch.Tensor:
    """Concatenate the selected ``B x D`` features in the documented order:
    ``f_hard_g5, f_hard_p1..pN, f_soft_g5, f_soft_g4, f_fusion``."""
    for name in selection:
        if name in TRAINING_ONLY_NAMES:
            raise ValueError(f"{name} is a training-only feature and cannot be used for inference")
        if name not in features:
            raise ValueError(f"unknown feature name {name!r}")
    parts = [features[n] for n in feature_order(selection)]
    if normalize_components:
        parts = [torch.nn.functional.normalize(p, dim=1) for p in parts]
    return torch.cat(parts, dim=1)


@torch.no_grad()
def extract_features(
    model: torch.nn.Module,
    records: Sequence[ImageRecord],
    size: tuple[int, int],
    selection: Sequence[str],
    batch_size: int = 64,
    normalize_components: bool = False,
) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            images = torch.stack([eval_transform(r, size) for r in chunk])
            bundle = model(images)
            out.append(assemble_features(bundle.post, selection, normalize_components))
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()


@dataclass
class RankingResult:
    query: int
    order: np.ndarray  # gallery indices after filtering, ascending distance
    matches: np.ndarray  # bool per entry of ``order``
    ap: float
    first_match: int  # 1-based rank of the first true match, 0 if none

    @property
    def valid(self) -> bool:
        return bool(self.matches.any())


@dataclass
class RetrievalMetrics:
    mAP: float
    cmc1: float
    cmc5: float
    num_valid: int
    num_excluded: int

    def as_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc1": self.cmc1,
            "cmc5": self.cmc5,
            "num_valid": self.num_valid,
            "num_excluded": self.num_excluded,
        }


def cosine_distance(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm inference vector")
    return 1.0 - (q / qn) @ (g / gn).T


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a true match."""
    matches = np.asarray(matches, dtype=bool)
    if not matches.any():
        return 0.0
    hits = np.cumsum(matches)
    ranks = np.flatnonzero(matches) + 1
    return float(np.mean(hits[matches] / ranks))


def rank(
    query: np.ndarray,
    gallery: np.ndarray,
    query_ids: Sequence[int],
    query_cams: Sequence[int],
    gallery_ids: Sequence[int],
    gallery_cams: Sequence[int],
) -> list[RankingResult]:
    """Rank the gallery for each query by cosine distance.

    Gallery entries with the query's identity *and* camera are dropped, as are
    junk entries (identity -1). Ties keep gallery index order.
    """
    if query.shape[1] != gallery.shape[1]:
        raise ValueError(f"dimension mismatch: query {query.shape[1]} vs gallery {gallery.shape[1]}")
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    dist = cosine_distance(query, gallery)
    g_ids = np.asarray(gallery_ids)
    g_cams = np.asarray(gallery_cams)
    results = []
    for qi in range(len(query)):
        order = np.argsort(dist[qi], kind="stable")
        keep = (g_ids[order] != -1) & ~((g_ids[order] == query_ids[qi]) & (g_cams[order] == query_cams[qi]))
        order = order[keep]
        matches = g_ids[order] == query_ids[qi]
        first = int(np.argmax(matches)) + 1 if matches.any() else 0
        results.append(RankingResult(qi, order, matches, average_precision(matches), first))
    return results


def compute_map_cmc(results: Sequence[RankingResult]) -> RetrievalMetrics:
    valid = [r for r in results if r.valid]
    if not valid:
        raise ValueError("no valid queries: every query lacks a cross-camera true match")
    firsts = np.array([r.first_match for r in valid])
    return RetrievalMetrics(
        mAP=float(np.mean([r.ap for r in valid])),
        cmc1=float(np.mean(firsts <= 1)),
        cmc5=float(np.mean(firsts <= 5)),
        num_valid=len(valid),
        num_excluded=len(results) - len(valid),
    )


def write_rankings(results: Sequence[RankingResult], path: str | Path, gallery_names: Sequence | None = None) -> Path:
    """One CSV row per query: query index, AP, first match rank, ranked gallery ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "valid", "ap", "first_match", "ranking"])
        for r in results:
            ids = r.order if gallery_names is None else [gallery_names[i] for i in r.order]
            w.writerow([r.query, int(r.valid), f"{r.ap:.6f}", r.first_match, " ".join(map(str, ids))])
    return path


def _tile(img, size: tuple[int, int]) -> Image.Image:
    if isinstance(img, (str, Path)):
        img = read_image(img)
    arr = (np.clip(np.asarray(img, dtype=np.float32), 0, 1) * 255).round().astype(np.uint8)
    return Image.fromarray(arr).resize((size[1], size[0]), Image.BILINEAR)


def export_ranking_strip(
    query,
    gallery: Sequence,
    match_flags: Sequence[bool],
    out_path: str | Path,
    tile_size: tuple[int, int] = (128, 64),
    border: int = 3,
    gap: int = 4,
) -> Path:
    """Compose query + ranked gallery thumbnails into one image.

    Images may be HxWx3 arrays in [0, 1] or file paths. Mismatched gallery
    entries get a red border, matches a green one.
    """
    if len(gallery) != len(match_flags):
        raise ValueError("need one match flag per gallery image")
    h, w = tile_size
    th, tw = h + 2 * border, w + 2 * border
    n = len(gallery) + 1
    canvas = Image.new("RGB", (n * tw + (n - 1) * gap, th), (255, 255, 255))
    canvas.paste(ImageOps.expand(_tile(query, tile_size), border, (0, 0, 0)), (0, 0))
    for i, (img, ok) in enumerate(zip(gallery, match_flags), start=1):
        color = (0, 160, 0) if ok else (255, 0, 0)
        canvas.paste(ImageOps.expand(_tile(img, tile_size), border, color), (i * (tw + gap), 0))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path
