"""Attention heatmap export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .data import normalize, read_image, resize
from .model import MDPR


def _to_uint8(arr: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))


def colorize(heat: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Min-max scale a 2-D map and apply a matplotlib colormap -> HxWx3."""
    lo, hi = float(heat.min()), float(heat.max())
    scaled = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    return colormaps[cmap](scaled)[..., :3]


@torch.no_grad()
def attention_maps(model: MDPR, pixels: np.ndarray) -> dict[int, np.ndarray]:
    """Per-stage ``(K+1) x H x W`` maps upsampled to the model's input size."""
    size = model.cfg.image_size
    model.eval()
    x = normalize(resize(pixels, size))[None]
    bundle = model(x)
    out = {}
    for stack in (bundle.a5, bundle.a4):
        up = F.interpolate(stack.maps, size=size, mode="bilinear", align_corners=False)
        out[stack.stage] = up[0].numpy()
    return out


def export_attention(
    model: MDPR, pixels: np.ndarray, out_dir: str | Path, stem: str, alpha: float = 0.5
) -> list[Path]:
    """Write one heatmap per attention map and one overlay per stage.

    Files are ``{stem}_A{stage}_{k}.png`` for foreground maps,
    ``{stem}_A{stage}_bg.png`` for the background and
    ``{stem}_A{stage}_overlay.png`` blending the summed foreground with the
    input image.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = resize(pixels, model.cfg.image_size)
    paths = []
    for stage, maps in sorted(attention_maps(model, pixels).items()):
        for k, heat in enumerate(maps):
            tag = "bg" if k == len(maps) - 1 else str(k + 1)
            p = out_dir / f"{stem}_A{stage}_{tag}.png"
            _to_uint8(colorize(heat)).save(p)
            paths.append(p)
        overlay = (1 - alpha) * image + alpha * colorize(maps[:-1].sum(axis=0))
        p = out_dir / f"{stem}_A{stage}_overlay.png"
        _to_uint8(overlay).save(p)
        paths.append(p)
    return paths


def visualize_directory(model: MDPR, images_dir: str | Path, out_dir: str | Path) -> list[Path]:
    images_dir = Path(images_dir)
    files = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no images found in {images_dir}")
    paths = []
    for f in files:
        paths += export_attention(model, read_image(f), out_dir, f.stem)
    return paths
