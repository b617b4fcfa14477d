"""Frame-by-frame multi-target inference and throughput benchmarking."""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DataError
from .geometry import STRIDE, CoordChannels, ShapeError, build_clue, make_coord_channels, one_hot_mask
from .model import CRVOS, dtype_device, preprocess, specifier_from_clue


@dataclass
class SequenceState:
    frame_index: int
    per_target_prev_mask: list  # K soft masks (2, H, W)
    coords: CoordChannels

    def __post_init__(self):
        if not self.per_target_prev_mask:
            raise ValueError("SequenceState needs at least one target")
        shapes = {tuple(m.shape) for m in self.per_target_prev_mask}
        if len(shapes) != 1:
            raise ShapeError(f"target masks disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple:
        return tuple(self.per_target_prev_mask[0].shape[-2:])

    @property
    def num_targets(self) -> int:
        return len(self.per_target_prev_mask)


def _check_labels(labels: np.ndarray, num_targets=None) -> int:
    labels = np.asarray(labels)
    k = int(labels.max(initial=0)) if num_targets is None else int(num_targets)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > k:
        raise DataError(f"initial mask labels must lie in 0..{k}, found "
                        f"{int(labels.min())}..{int(labels.max())}")
    return max(k, 1)


def init_state(initial_mask: np.ndarray, num_targets=None, dtype=torch.float32, device=None) -> SequenceState:
    """Seed the recurrence from the given frame-0 label map."""
    k = _check_labels(initial_mask, num_targets)
    labels = torch.as_tensor(np.asarray(initial_mask), device=device)
    h, w = labels.shape
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"frame size {h}x{w} is not divisible by {STRIDE}")
    masks = [one_hot_mask(labels == t, dtype) for t in range(1, k + 1)]
    coords = make_coord_channels(h // STRIDE, w // STRIDE, dtype).to(device=device)
    return SequenceState(0, masks, coords)


class _Timer:
    def __init__(self, sink, key):
        self.sink, self.key = sink, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.key] += time.perf_counter() - self.t0


@torch.no_grad()
def step(state: SequenceState, frame, model: CRVOS, timings=None):
    """Predict every target's soft mask on ``frame``; returns ``(masks, next_state)``.

    The frame is encoded once; each target gets its own Clue and decode.
    """
    timings = defaultdict(float) if timings is None else timings
    frame = np.asarray(frame)
    if tuple(frame.shape[:2]) != state.shape:
        raise ShapeError(f"frame {state.frame_index + 1} is {frame.shape[:2]}, sequence is {state.shape}")
    config = model.config
    dtype, device = dtype_device(model)
    with _Timer(timings, "encode"):
        pyramid = model.encode(preprocess(frame, dtype).to(device))
    masks = []
    for prev in state.per_target_prev_mask:
        with _Timer(timings, "clue"):
            clue = build_clue(prev.unsqueeze(0), state.coords, hard=config.hard_clue_mask)
        with _Timer(timings, "decode"):
            masks.append(model.decode(pyramid, specifier_from_clue(clue, config))[0])
    return masks, SequenceState(state.frame_index + 1, masks, state.coords)


def overlap(per_target_masks, mode: str = "argmax") -> np.ndarray:
    """Merge K soft masks into one label map.

    ``argmax``: background where every target has fg < bg, otherwise the target
    with the largest fg (lowest index wins ties). ``paint``: targets painted in
    index order wherever fg >= bg, later ones on top.
    """
    if len(per_target_masks) == 0:
        raise ValueError("overlap needs at least one target mask")
    stack = torch.stack([torch.as_tensor(m) for m in per_target_masks]).detach().cpu().numpy()
    fg, bg = stack[:, 0], stack[:, 1]
    claimed = fg >= bg
    if mode == "argmax":
        labels = np.argmax(fg, axis=0) + 1
        labels[~claimed.any(axis=0)] = 0
    elif mode == "paint":
        labels = np.zeros(fg.shape[1:], dtype=np.int64)
        for k in range(len(fg)):
            labels[claimed[k]] = k + 1
    else:
        raise ValueError(f"unknown overlap mode {mode!r}")
    return labels.astype(np.int64)


def propagate(frames, initial_mask, model: CRVOS, num_targets=None):
    """Yield per-target soft masks for frames 1..T-1."""
    state = init_state(initial_mask, num_targets, *dtype_device(model))
    model.eval()
    for t in range(1, len(frames)):
        masks, state = step(state, frames[t], model)
        yield masks


def run_sequence(frames, initial_mask, model: CRVOS, overlap_mode: str = "argmax", num_targets=None) -> list:
    """Label maps for every frame; frame 0 is the given mask, unchanged."""
    if len(frames) < 1:
        raise ValueError("run_sequence needs at least one frame")
    initial_mask = np.asarray(initial_mask)
    _check_labels(initial_mask, num_targets)
    out = [initial_mask.copy()]
    for masks in propagate(frames, initial_mask, model, num_targets):
        out.append(overlap(masks, overlap_mode))
    return out


@dataclass
class BenchReport:
    frames_processed: int
    wall_seconds: float
    per_stage_ms: dict
    num_targets: int = 1
    frame_size: tuple = ()
    metadata: dict = field(default_factory=lambda: {
        "timed": "step + overlap per frame; frames already in memory, disk I/O excluded"})

    @property
    def fps(self) -> float:
        return self.frames_processed / self.wall_seconds if self.wall_seconds > 0 else float("inf")

    def as_dict(self) -> dict:
        return {"frames_processed": self.frames_processed, "wall_seconds": self.wall_seconds,
                "fps": self.fps, "per_stage_ms": dict(self.per_stage_ms), "num_targets": self.num_targets,
                "frame_size": list(self.frame_size), "metadata": dict(self.metadata)}


@torch.no_grad()
def benchmark(frames, initial_mask, model: CRVOS, warmup: int = 2, overlap_mode: str = "argmax",
              num_targets=None) -> BenchReport:
    """Time step+overlap on every frame; the first ``warmup`` frames are not counted.

    The state is seeded from ``initial_mask`` and frame 0 is processed like the
    rest, so ``frames_processed == len(frames) - warmup``.
    """
    if not 0 <= warmup < len(frames):
        raise ValueError(f"warmup ({warmup}) must be smaller than the number of frames ({len(frames)})")
    model.eval()
    state = init_state(initial_mask, num_targets, *dtype_device(model))
    frames = [np.asarray(f) for f in frames]
    stages = defaultdict(float)
    wall = 0.0
    for i, frame in enumerate(frames):
        timings = defaultdict(float)
        t0 = time.perf_counter()
        masks, state = step(state, frame, model, timings)
        with _Timer(timings, "overlap"):
            overlap(masks, overlap_mode)
        elapsed = time.perf_counter() - t0
        if i >= warmup:
            wall += elapsed
            for k, v in timings.items():
                stages[k] += v
    per_stage_ms = {k: stages[k] * 1000 for k in ("encode", "clue", "decode", "overlap")}
    return BenchReport(len(frames) - warmup, wall, per_stage_ms, state.num_targets, state.shape)
