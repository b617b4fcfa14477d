"""Alpha-blended mask overlays and the sampled-progress contact sheet."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import PALETTE
from .metrics import boundary

SHEET_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def overlay(frame: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend palette color k into pixels labeled k; object contours drawn solid."""
    out = frame.astype(np.float32).copy()
    labels = np.asarray(labels)
    for k in np.unique(labels):
        if k == 0:
            continue
        region = labels == k
        color = PALETTE[int(k)].astype(np.float32)
        out[region] = (1 - alpha) * out[region] + alpha * color
        out[boundary(region)] = color
    return np.clip(out, 0, 255).astype(np.uint8)


def sheet_indices(n_frames: int, fractions=SHEET_FRACTIONS) -> list:
    return [int(round(f * (n_frames - 1))) for f in fractions]


def contact_sheet(images, fractions=SHEET_FRACTIONS, pad: int = 4, caption: int = 14) -> np.ndarray:
    """Tile the frames at the given progress fractions side by side, captioned with the percentage."""
    idx = sheet_indices(len(images), fractions)
    h, w = images[0].shape[:2]
    sheet = Image.new("RGB", (len(idx) * (w + pad) + pad, h + 2 * pad + caption), "white")
    draw = ImageDraw.Draw(sheet)
    for slot, (i, f) in enumerate(zip(idx, fractions)):
        x = pad + slot * (w + pad)
        sheet.paste(Image.fromarray(images[i]), (x, pad))
        draw.text((x, h + pad + 1), f"{int(round(f * 100))}%", fill="black")
    return np.array(sheet)


def render_sequence(frames, label_maps, outdir, alpha: float = 0.5) -> list:
    """Write ``overlay_#####.png`` per frame plus ``contact_sheet.png``; returns written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    images = [overlay(np.asarray(f), m, alpha) for f, m in zip(frames, label_maps)]
    paths = []
    for i, img in enumerate(images):
        p = outdir / f"overlay_{i:05d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    p = outdir / "contact_sheet.png"
    Image.fromarray(contact_sheet(images)).save(p)
    paths.append(p)
    return paths
