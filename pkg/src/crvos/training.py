"""Recurrent clip training: NLL loss, clip sampling, augmentation, and the stage loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig, to_plain
from .data import DataError, resize_record
from .geometry import STRIDE, build_clue, make_coord_channels, one_hot_mask
from .model import CRVOS, dtype_device, preprocess, read_checkpoint, save_checkpoint, specifier_from_clue

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


def nll_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean per-pixel negative log-likelihood of a soft mask ``(..., 2, H, W)``.

    ``target`` is a binary ``(..., H, W)`` map; 1 selects the foreground channel.
    """
    if torch.isnan(pred).any():
        raise FloatingPointError("NaN in predicted mask")
    target = torch.as_tensor(target, device=pred.device)
    picked = torch.where(target > 0, pred[..., 0, :, :], pred[..., 1, :, :])
    return -torch.log(picked.clamp_min(EPS)).mean()


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    masks: np.ndarray  # (T, H, W) binary for the chosen target
    sequence: str = ""
    target: int = 1
    start: int = 0


def sample_clip(dataset, clip_len: int, rng: np.random.Generator, max_tries: int = 100) -> Clip:
    """Consecutive ``clip_len`` frames from a uniformly chosen sequence and start.

    One target present in the clip's first frame is chosen uniformly and the
    masks are binarized for it.
    """
    eligible = [r for r in dataset if len(r) >= clip_len and r.num_annotated >= clip_len]
    if not eligible:
        raise DataError(f"no sequence has {clip_len} annotated frames")
    for _ in range(max_tries):
        rec = eligible[int(rng.integers(len(eligible)))]
        start = int(rng.integers(len(rec) - clip_len + 1))
        first = rec.mask(start)
        present = [k for k in range(1, rec.num_targets + 1) if np.any(first == k)]
        if not present:
            continue
        target = present[int(rng.integers(len(present)))]
        masks = (rec.load_masks(start, start + clip_len) == target).astype(np.int64)
        return Clip(rec.load_frames(start, start + clip_len), masks, rec.name, target, start)
    raise DataError("could not find a clip whose first frame shows any target")


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not -30 <= self.rotation_deg <= 30:
            raise ValueError(f"rotation {self.rotation_deg} outside [-30, 30] degrees")
        if not -30 <= self.shear_deg <= 30:
            raise ValueError(f"shear {self.shear_deg} outside [-30, 30] degrees")
        if not 0.75 <= self.scale <= 1.25:
            raise ValueError(f"scale {self.scale} outside [0.75, 1.25]")

    @property
    def is_affine_identity(self) -> bool:
        return self.rotation_deg == 0 and self.shear_deg == 0 and self.scale == 1


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(bool(rng.random() < 0.5), float(rng.uniform(-30, 30)),
                         float(rng.uniform(-30, 30)), float(rng.uniform(0.75, 1.25)))


def _affine_theta(params: AugmentParams, h: int, w: int) -> torch.Tensor:
    """Output->input sampling matrix in normalized coordinates (about the image center)."""
    r, s = math.radians(params.rotation_deg), math.radians(params.shear_deg)
    rot = np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])
    shear = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
    fwd = params.scale * rot @ shear
    half = np.diag([w / 2, h / 2])
    inv = np.linalg.inv(half) @ np.linalg.inv(fwd) @ half
    theta = np.zeros((1, 2, 3))
    theta[0, :, :2] = inv
    return torch.as_tensor(theta, dtype=torch.float64)


def augment_clip(frames: np.ndarray, masks: np.ndarray, params: AugmentParams):
    """Apply one flip/rotate/shear/scale transform to every frame and mask of a clip.

    Frames are resampled bilinearly, masks by nearest neighbor; regions mapped
    from outside the image become zero (background).
    """
    frames, masks = np.asarray(frames), np.asarray(masks)
    if params.hflip:
        frames, masks = frames[:, :, ::-1], masks[:, :, ::-1]
    if params.is_affine_identity:
        return np.ascontiguousarray(frames), np.ascontiguousarray(masks)
    t, h, w = masks.shape
    grid = F.affine_grid(_affine_theta(params, h, w).expand(t, 2, 3), (t, 1, h, w), align_corners=False)
    x = torch.as_tensor(np.ascontiguousarray(frames), dtype=torch.float64).permute(0, 3, 1, 2)
    warped = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    m = torch.as_tensor(np.ascontiguousarray(masks), dtype=torch.float64).unsqueeze(1)
    warped_m = F.grid_sample(m, grid, mode="nearest", padding_mode="zeros", align_corners=False)
    out_frames = warped.permute(0, 2, 3, 1).round().clamp(0, 255).numpy().astype(frames.dtype)
    return out_frames, warped_m[:, 0].round().numpy().astype(masks.dtype)


def unroll_clip(model: CRVOS, frames: torch.Tensor, masks: torch.Tensor, backprop_through_clue: bool = False):
    """Per-frame losses for frames 1..T-1 of a ``(B, T, 3, H, W)`` clip batch.

    Frame 0's ground truth seeds the first Clue; later Clues come from the
    model's own predictions (detached unless ``backprop_through_clue``).
    """
    b, t, _, h, w = frames.shape
    coords = make_coord_channels(h // STRIDE, w // STRIDE, frames.dtype).to(device=frames.device)
    prev = one_hot_mask(masks[:, 0], frames.dtype)
    losses = []
    for i in range(1, t):
        pyramid = model.encode(frames[:, i])
        src = prev if backprop_through_clue else prev.detach()
        clue = build_clue(src, coords, hard=model.config.hard_clue_mask)
        pred = model.decode(pyramid, specifier_from_clue(clue, model.config))
        losses.append(nll_loss(pred, masks[:, i]))
        prev = pred
    return losses


def clip_tensors(clips, dtype=torch.float32, device=None):
    clips = [clips] if isinstance(clips, Clip) else list(clips)
    frames = torch.stack([preprocess(c.frames, dtype) for c in clips])
    masks = torch.stack([torch.as_tensor(c.masks) for c in clips])
    return frames.to(device), masks.to(device)


def train_clip(model: CRVOS, optimizer, clips, config: TrainConfig) -> float:
    """One optimizer update on a clip (or a batch of equal-sized clips); returns the mean loss."""
    clips_list = [clips] if isinstance(clips, Clip) else list(clips)
    if len(clips_list[0].frames) < 2:
        raise ValueError("a training clip needs at least 2 frames")
    model.train()
    frames, masks = clip_tensors(clips_list, *dtype_device(model))
    names = ", ".join(f"{c.sequence}[{c.start}:] target {c.target}" for c in clips_list)
    try:
        losses = unroll_clip(model, frames, masks, config.backprop_through_clue)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"{exc} on clip(s) {names}") from exc
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss.item()} on clip(s) {names}; per-frame "
                               f"{[float(x) for x in losses]}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class StageResult:
    epoch_losses: list = field(default_factory=list)
    step: int = 0
    checkpoint: Optional[Path] = None


def prepare_dataset(dataset, resolution) -> list:
    """Resize every record to the stage resolution (in memory)."""
    out = []
    for rec in dataset:
        if rec.frames is not None and tuple(rec.frames.shape[1:3]) == tuple(resolution):
            out.append(rec)
        else:
            out.append(resize_record(rec, resolution))
    return out


def _log_line(fh, record):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def run_stage(model: CRVOS, dataset, config: TrainConfig, out_dir=None, resume=None) -> StageResult:
    """Train for ``config.epochs`` epochs of sampled clips.

    An epoch is ``clips_per_epoch`` clips (default: one per sequence), grouped
    into updates of ``batch_size``. With ``out_dir`` this writes ``train.log``
    (one JSON record per update and per epoch) and ``checkpoint.pt``.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    dataset = prepare_dataset(dataset, config.resolution)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    result = StageResult()
    start_epoch = 0
    if resume is not None:
        payload = read_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        if "optimizer" in payload:
            optimizer.load_state_dict(payload["optimizer"])
        extra = payload.get("extra", {})
        rng.bit_generator.state = extra["rng"]
        torch.set_rng_state(extra["torch_rng"])
        start_epoch = extra["epoch"]
        result.epoch_losses = list(extra.get("epoch_losses", []))
        result.step = payload["step"]
    out_dir = Path(out_dir) if out_dir is not None else None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train.log", "a")
    per_epoch = config.clips_per_epoch or len(dataset)
    updates = max(1, math.ceil(per_epoch / config.batch_size))
    t0 = time.perf_counter()

    def checkpoint(epoch):
        if out_dir is None:
            return None
        path = out_dir / "checkpoint.pt"
        extra = {"epoch": epoch, "rng": rng.bit_generator.state, "torch_rng": torch.get_rng_state(),
                 "epoch_losses": list(result.epoch_losses), "train_config": to_plain(config)}
        save_checkpoint(path, model, result.step, optimizer, extra)
        return path

    try:
        for epoch in range(start_epoch, config.epochs):
            losses = []
            for _ in range(updates):
                clips = []
                for _ in range(config.batch_size):
                    clip = sample_clip(dataset, config.clip_len, rng)
                    if config.augment:
                        params = sample_augment_params(rng)
                        clip.frames, clip.masks = augment_clip(clip.frames, clip.masks, params)
                    clips.append(clip)
                loss = train_clip(model, optimizer, clips, config)
                result.step += 1
                losses.append(loss)
                _log_line(fh, {"step": result.step, "stage": config.stage, "epoch": epoch, "loss": loss,
                               "lr": config.lr, "wall_time": time.perf_counter() - t0})
            mean = float(np.mean(losses))
            result.epoch_losses.append(mean)
            _log_line(fh, {"epoch": epoch, "stage": config.stage, "mean_loss": mean})
            log.info("%s epoch %d: mean loss %.4f", config.stage, epoch, mean)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                checkpoint(epoch + 1)
        result.checkpoint = checkpoint(config.epochs)
    finally:
        if fh is not None:
            fh.close()
    return result


def overfit(model: CRVOS, clip: Clip, updates: int, lr: float = 1e-3, target_loss: Optional[float] = None,
            backprop_through_clue: bool = False) -> list:
    """Repeatedly fit one clip; stops early once ``target_loss`` is reached."""
    cfg = TrainConfig(stage="pretrain", clip_len=max(2, len(clip.frames)),
                      resolution=clip.masks.shape[1:], lr=lr, epochs=0, augment=False,
                      backprop_through_clue=backprop_through_clue)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for _ in range(updates):
        history.append(train_clip(model, optimizer, clip, cfg))
        if target_loss is not None and history[-1] < target_loss:
            break
    return history
