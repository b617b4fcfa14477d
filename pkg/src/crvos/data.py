"""DAVIS-layout ingestion, indexed-color mask IO, and synthetic moving-shape sequences.

Frames are uint8 ``(H, W, 3)`` arrays; masks are integer label maps ``(H, W)``
with 0 for background and k for object k.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .config import ConfigError, DataConfig, default_data_root, DATA_ROOT_ENV
from .geometry import STRIDE

log = logging.getLogger(__name__)

IMAGE_EXTS = (".jpg", ".jpeg", ".png")


class DataError(ValueError):
    pass


def davis_palette() -> np.ndarray:
    """The 256-entry PASCAL/DAVIS color map, ``(256, 3)`` uint8."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


PALETTE = davis_palette()


def read_mask(path) -> np.ndarray:
    """Read an annotation as raw label values (palette indices for mode-P images)."""
    with Image.open(path) as im:
        if im.mode in ("P", "L", "I", "I;16"):
            arr = np.array(im)
        else:
            arr = np.array(im.convert("L"))
    return arr.astype(np.int64)


def write_mask(path, labels: np.ndarray) -> None:
    """Write a label map as an indexed-color PNG with the DAVIS palette."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("labels must lie in [0, 255] for indexed PNG output")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(PALETTE.ravel().tolist())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


@dataclass
class SequenceRecord:
    """One video. Either file-backed (paths) or in-memory (``frames``/``masks`` arrays)."""

    name: str
    frame_paths: list = field(default_factory=list)
    mask_paths: list = field(default_factory=list)
    num_targets: int = 1
    frames: Optional[np.ndarray] = None  # (T, H, W, 3) uint8
    masks: Optional[np.ndarray] = None  # (T, H, W) int
    binarize: bool = False

    def __len__(self) -> int:
        return len(self.frames) if self.frames is not None else len(self.frame_paths)

    @property
    def num_annotated(self) -> int:
        return len(self.masks) if self.masks is not None else len(self.mask_paths)

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i]
        return read_frame(self.frame_paths[i])

    def mask(self, i: int) -> np.ndarray:
        if self.masks is not None:
            return self.masks[i]
        m = read_mask(self.mask_paths[i])
        return (m > 0).astype(np.int64) if self.binarize else m

    def load_frames(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        stop = len(self) if stop is None else stop
        if self.frames is not None:
            return self.frames[start:stop]
        return np.stack([self.frame(i) for i in range(start, stop)])

    def load_masks(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        stop = self.num_annotated if stop is None else stop
        if self.masks is not None:
            return self.masks[start:stop]
        return np.stack([self.mask(i) for i in range(start, stop)])

    def materialize(self) -> "SequenceRecord":
        """In-memory copy of a file-backed record."""
        return SequenceRecord(self.name, list(self.frame_paths), list(self.mask_paths), self.num_targets,
                              frames=self.load_frames(), masks=self.load_masks())


def _images(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _layout_dir(root: Path, name: str) -> Path:
    base = root / name
    # The official archives nest sequences under a resolution folder.
    for res in ("480p", "Full-Resolution"):
        if (base / res).is_dir():
            return base / res
    return base


def load_davis_layout(root, year_style: int = 2017) -> list:
    """Scan ``root/JPEGImages/<seq>/`` and ``root/Annotations/<seq>/``.

    2016-style coerces every nonzero label to 1; 2017-style keeps palette
    indices and sets ``num_targets`` to the largest label in frame 0.
    Sequences without a frame-0 annotation are skipped with an error logged.
    """
    if year_style not in (2016, 2017):
        raise ValueError("year_style must be 2016 or 2017")
    root = Path(root)
    img_root, ann_root = _layout_dir(root, "JPEGImages"), _layout_dir(root, "Annotations")
    if not img_root.is_dir():
        log.warning("no JPEGImages directory under %s; returning no sequences", root)
        return []
    records = []
    for seq_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
        frames = _images(seq_dir)
        ann_dir = ann_root / seq_dir.name
        masks = _images(ann_dir) if ann_dir.is_dir() else []
        if not frames:
            continue
        if not masks or masks[0].stem != frames[0].stem:
            log.error("sequence %s has no frame-0 annotation; skipped", seq_dir.name)
            continue
        if 1 < len(masks) != len(frames):
            n = min(len(frames), len(masks))
            log.warning("sequence %s: %d frames vs %d masks, truncating to %d",
                        seq_dir.name, len(frames), len(masks), n)
            frames, masks = frames[:n], masks[:n]
        first = read_mask(masks[0])
        binarize = year_style == 2016
        k = 1 if binarize else int(first.max())
        records.append(SequenceRecord(seq_dir.name, frames, masks, max(k, 1), binarize=binarize))
    if not records:
        log.warning("no sequences found under %s", root)
    return records


def write_davis_layout(root, records: list) -> None:
    """Write in-memory records as JPEG frames and indexed PNG annotations."""
    root = Path(root)
    for rec in records:
        img_dir = root / "JPEGImages" / rec.name
        img_dir.mkdir(parents=True, exist_ok=True)
        for i in range(len(rec)):
            # Lossless PNG keeps regenerated frames bit-identical.
            Image.fromarray(rec.frame(i)).save(img_dir / f"{i:05d}.png")
        for i in range(rec.num_annotated):
            write_mask(root / "Annotations" / rec.name / f"{i:05d}.png", rec.mask(i))


def resize_policy(frame: np.ndarray, mask: Optional[np.ndarray], target) -> tuple:
    """Resize to ``target=(H, W)``: bilinear for the frame, nearest for the mask."""
    th, tw = (int(v) for v in target)
    if th <= 0 or tw <= 0 or th % STRIDE or tw % STRIDE:
        raise ValueError(f"target resolution {th}x{tw} must be positive multiples of {STRIDE}")
    if frame.shape[:2] != (th, tw):
        frame = np.array(Image.fromarray(frame).resize((tw, th), Image.BILINEAR))
    if mask is not None and mask.shape[:2] != (th, tw):
        mask = np.array(Image.fromarray(mask.astype(np.int32), mode="I").resize((tw, th), Image.NEAREST))
        mask = mask.astype(np.int64)
    return frame, mask


def resize_record(rec: SequenceRecord, target) -> SequenceRecord:
    pairs = [resize_policy(rec.frame(i), rec.mask(i) if i < rec.num_annotated else None, target)
             for i in range(len(rec))]
    frames = np.stack([f for f, _ in pairs])
    masks = np.stack([m for _, m in pairs if m is not None])
    return SequenceRecord(rec.name, list(rec.frame_paths), list(rec.mask_paths), rec.num_targets,
                          frames=frames, masks=masks)


@dataclass
class SyntheticSpec:
    canvas: tuple = (64, 64)
    num_targets: int = 1
    shapes: tuple = ("square", "disk")
    size: float = 16.0  # side for squares, diameter for disks, px
    translation: Optional[tuple] = None  # (dx, dy) px/frame; None draws a random velocity
    max_speed: float = 2.0
    scale_drift: float = 0.0  # relative size change per frame
    rotation: float = 0.0  # degrees per frame (squares)
    length: int = 10
    seed: int = 0
    distractors: int = 0  # unlabeled shapes drawn like targets
    same_color: bool = False  # every shape drawn in one color

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.shapes = tuple(self.shapes)
        if self.translation is not None:
            self.translation = tuple(float(v) for v in self.translation)
        bad = set(self.shapes) - {"square", "disk"}
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        if self.num_targets < 1 or self.length < 1:
            raise ValueError("need at least one target and one frame")
        grown = self.size * (1 + abs(self.scale_drift)) ** max(self.length - 1, 0) * math.sqrt(2)
        if grown >= min(self.canvas):
            raise ValueError(f"shape of size {self.size} does not fit a {self.canvas} canvas")


def _texture(rng, h, w) -> np.ndarray:
    coarse = rng.uniform(40, 140, size=(max(h // 8, 2), max(w // 8, 2), 3)).astype(np.float32)
    smooth = np.array(Image.fromarray(coarse.astype(np.uint8)).resize((w, h), Image.BILINEAR), np.float32)
    return smooth + rng.normal(0, 6, size=(h, w, 3)).astype(np.float32)


def _start(rng, lo, hi, span):
    """Start coordinate keeping a linear path of length ``span`` inside [lo, hi] if possible."""
    a, b = (lo, hi - span) if span >= 0 else (lo - span, hi)
    if a <= b:
        return rng.uniform(a, b)
    return rng.uniform(lo, hi)


def _bounce(p, lo, hi):
    if hi <= lo:
        return (lo + hi) / 2
    period = 2 * (hi - lo)
    q = (p - lo) % period
    return lo + (q if q <= hi - lo else period - q)


def generate_synthetic(spec: SyntheticSpec, name: str = "synthetic") -> SequenceRecord:
    """Colored squares/disks moving over a textured background, with exact masks.

    Objects reflect off the canvas borders so they never leave it. Targets are
    painted in index order (later targets occlude earlier ones); distractors
    are painted first and carry no label.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    background = _texture(rng, h, w)
    n_obj = spec.distractors + spec.num_targets
    base_color = rng.uniform(150, 255, size=3)
    objects = []
    for i in range(n_obj):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        if spec.translation is not None:
            v = np.array(spec.translation, dtype=np.float64)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            v = rng.uniform(0.5, 1.0) * spec.max_speed * np.array([np.cos(ang), np.sin(ang)])
        half = spec.size * (1 + abs(spec.scale_drift)) ** max(spec.length - 1, 0) * math.sqrt(2) / 2
        span = v * (spec.length - 1)
        x0 = _start(rng, half, w - half, span[0])
        y0 = _start(rng, half, h - half, span[1])
        color = base_color if spec.same_color else rng.uniform(0, 255, size=3)
        objects.append(dict(shape=shape, v=v, x0=x0, y0=y0, half=half, color=color,
                            angle0=rng.uniform(0, 90)))
    frames = np.empty((spec.length, h, w, 3), dtype=np.uint8)
    masks = np.zeros((spec.length, h, w), dtype=np.int64)
    for t in range(spec.length):
        img = background.copy()
        labels = np.zeros((h, w), dtype=np.int64)
        for i, ob in enumerate(objects):
            cx = _bounce(ob["x0"] + ob["v"][0] * t, ob["half"], w - ob["half"])
            cy = _bounce(ob["y0"] + ob["v"][1] * t, ob["half"], h - ob["half"])
            size = spec.size * (1 + spec.scale_drift) ** t
            dx, dy = xx - cx, yy - cy
            if ob["shape"] == "disk":
                inside = dx**2 + dy**2 <= (size / 2) ** 2
            else:
                a = np.deg2rad(ob["angle0"] * (spec.rotation != 0) + spec.rotation * t)
                u = np.cos(a) * dx + np.sin(a) * dy
                v = -np.sin(a) * dx + np.cos(a) * dy
                inside = np.maximum(np.abs(u), np.abs(v)) <= size / 2
            img[inside] = ob["color"]
            target = i - spec.distractors + 1
            labels[inside] = max(target, 0)
        frames[t] = np.clip(img, 0, 255).astype(np.uint8)
        masks[t] = labels
    return SequenceRecord(name, num_targets=spec.num_targets, frames=frames, masks=masks)


def synthetic_dataset(spec: SyntheticSpec, num_sequences: int, prefix: str = "synth") -> list:
    """``num_sequences`` records from consecutive seeds starting at ``spec.seed``."""
    out = []
    for i in range(num_sequences):
        s = SyntheticSpec(**{**spec.__dict__, "seed": spec.seed + i})
        out.append(generate_synthetic(s, name=f"{prefix}{i:03d}"))
    return out


def build_dataset(cfg: DataConfig, split: str = "train") -> list:
    """Records for the train or eval split described by a data config section."""
    if cfg.kind == "synthetic":
        try:
            spec = SyntheticSpec(**cfg.synthetic)
        except TypeError as exc:
            raise ConfigError(f"bad 'data.synthetic' section: {exc}") from exc
        if split == "train":
            return synthetic_dataset(spec, cfg.num_sequences, prefix="train")
        spec.seed += cfg.eval_seed_offset
        return synthetic_dataset(spec, cfg.eval_num_sequences, prefix="eval")
    key = "data.root" if split == "train" or not cfg.eval_root else "data.eval_root"
    root = cfg.root if key == "data.root" else cfg.eval_root
    root = root or default_data_root()
    if not root:
        raise ConfigError(f"{key} is required for davis data (or set {DATA_ROOT_ENV})")
    if not Path(root).is_dir():
        raise ConfigError(f"{key}: directory {root} does not exist")
    return load_davis_layout(root, cfg.year)
