"""Residual encoder, deconvolution refine modules, and the CRVOS network.

Tensors are NCHW. Images enter as float tensors normalized by
:func:`preprocess` (ImageNet mean/std on [0, 1] RGB). The decoder returns a
soft mask ``(N, 2, H, W)``: channel 0 foreground, channel 1 background.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig, to_plain
from .geometry import STRIDE, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CHECKPOINT_FORMAT = "crvos-checkpoint/1"


def preprocess(frames, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` or ``(N, H, W, 3)`` frames -> normalized ``(N, 3, H, W)``."""
    arr = np.asarray(frames)
    x = torch.as_tensor(arr)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) frames, got {tuple(x.shape)}")
    x = x.permute(0, 3, 1, 2).to(dtype)
    if arr.dtype == np.uint8:
        x = x / 255.0
    mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    groups = math.gcd(channels, 4)
    return nn.GroupNorm(groups, channels)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, norm):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout, norm)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout, norm)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout, norm))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


@dataclass
class FeaturePyramid:
    f4: torch.Tensor
    f8: torch.Tensor
    f16: torch.Tensor

    def select(self, index) -> "FeaturePyramid":
        return FeaturePyramid(self.f4[index], self.f8[index], self.f16[index])


class Encoder(nn.Module):
    """Stem to stride 4, then residual stages emitting strides 4, 8 and 16."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c4, c8, c16 = config.stage_widths
        n4, n8, n16 = config.blocks_per_stage
        stem = max(1, c4 // 2)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem, 3, 2, 1, bias=False), _norm(stem, config.norm), nn.ReLU(),
            nn.Conv2d(stem, c4, 3, 2, 1, bias=False), _norm(c4, config.norm), nn.ReLU(),
        )
        self.layer4 = self._stage(c4, c4, n4, 1, config.norm)
        self.layer8 = self._stage(c4, c8, n8, 2, config.norm)
        self.layer16 = self._stage(c8, c16, n16, 2, config.norm)
        self.channels = (c4, c8, c16)

    @staticmethod
    def _stage(cin, cout, blocks, stride, norm):
        layers = [BasicBlock(cin, cout, stride, norm)]
        layers += [BasicBlock(cout, cout, 1, norm) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"input {h}x{w} is not divisible by {STRIDE}")
        f4 = self.layer4(self.stem(x))
        f8 = self.layer8(f4)
        f16 = self.layer16(f8)
        return FeaturePyramid(f4, f8, f16)


class BilinearUp(nn.Module):
    """Parameter-free 2x bilinear resize (a module so the graph can be audited)."""

    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class RefineModule(nn.Module):
    """Fuse ``[skip | input | previous logits]`` with a 3x3 conv, then upscale 2x to 2 channels.

    With ``use_deconv`` the upscale is a 4x4 stride-2 transposed convolution;
    otherwise a 1x1 channel-reducing convolution followed by bilinear resize.
    """

    def __init__(self, skip_channels, input_channels, prev_channels, width, use_deconv, norm="group"):
        super().__init__()
        self.in_channels = skip_channels + input_channels + prev_channels
        self.expects = (skip_channels, input_channels, prev_channels)
        self.fuse = nn.Conv2d(self.in_channels, width, 3, 1, 1)
        self.n = _norm(width, norm)
        self.use_deconv = use_deconv
        if use_deconv:
            self.up = nn.ConvTranspose2d(width, 2, 4, 2, 1)
        else:
            self.up = nn.Sequential(nn.Conv2d(width, 2, 1), BilinearUp())

    def forward(self, input_features, skip_features, prev_refine_logits=None):
        parts = [skip_features]
        for t, expected, name in ((input_features, self.expects[1], "input_features"),
                                  (prev_refine_logits, self.expects[2], "prev_refine_logits")):
            got = 0 if t is None else t.shape[1]
            if got != expected:
                raise ShapeError(f"{name} has {got} channels, module expects {expected}")
            if t is not None:
                parts.append(t)
        size = skip_features.shape[-2:]
        for t in parts[1:]:
            if t.shape[-2:] != size:
                raise ShapeError(f"refine inputs disagree spatially: {tuple(t.shape[-2:])} vs {tuple(size)}")
        h = F.relu(self.n(self.fuse(torch.cat(parts, 1))))
        return self.up(h)


class Decoder(nn.Module):
    """Three refine modules, stride 16 -> 8 -> 4 -> 2, then a 2x resize and softmax.

    Module 1 fuses f16 with the specifier; modules 2 and 3 fuse f8 / f4 with
    the previous module's 2-channel output.
    """

    def __init__(self, config: ModelConfig, encoder_channels):
        super().__init__()
        c4, c8, c16 = encoder_channels
        w = config.decoder_width
        dc, n = config.use_deconv, config.norm
        self.combine = config.effective_combine
        self.specifier_channels = config.specifier_channels
        self.refine1 = RefineModule(c16, config.specifier_channels, 0, w, dc, n)
        self.refine2 = RefineModule(c8, 0, 2, w, dc, n)
        self.refine3 = RefineModule(c4, 0, 2, w, dc, n)

    def forward(self, pyramid: FeaturePyramid, specifier: Optional[torch.Tensor]) -> torch.Tensor:
        got = 0 if specifier is None else specifier.shape[1]
        if got != self.specifier_channels:
            raise ConfigError(f"variant expects a {self.specifier_channels}-channel specifier, got {got}")
        o8 = self.refine1(specifier, pyramid.f16)
        o4 = self.refine2(None, pyramid.f8, o8)
        o2 = self.refine3(None, pyramid.f4, o4)
        logits = o2
        if self.combine == "sum":
            size = o2.shape[-2:]
            logits = (o2 + F.interpolate(o4, size=size, mode="bilinear", align_corners=False)
                      + F.interpolate(o8, size=size, mode="bilinear", align_corners=False))
        logits = F.interpolate(logits, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.softmax(logits, dim=1)


class CRVOS(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config, self.encoder.channels)
        self.calls = Counter()
        self.reset_parameters(config.seed)
        if config.backbone_init != "random":
            load_backbone(self, config.backbone_init)

    def reset_parameters(self, seed: int = 0) -> None:
        """Fan-in scaled uniform init for conv weights, zero biases, unit norms."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    w = m.weight
                    if isinstance(m, nn.ConvTranspose2d):
                        fan_in = w.shape[0] * w.shape[2] * w.shape[3] / 4  # stride-2 overlap
                    else:
                        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
                    bound = math.sqrt(6.0 / max(fan_in, 1))
                    w.copy_(torch.empty(w.shape, dtype=w.dtype).uniform_(-bound, bound, generator=gen))
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.GroupNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def encode(self, images: torch.Tensor) -> FeaturePyramid:
        self.calls["encode"] += 1
        return self.encoder(images)

    def decode(self, pyramid: FeaturePyramid, specifier: Optional[torch.Tensor]) -> torch.Tensor:
        self.calls["decode"] += 1
        return self.decoder(pyramid, specifier)

    def forward(self, images, specifier=None):
        return self.decode(self.encode(images), specifier)


def dtype_device(model: nn.Module):
    p = next(model.parameters())
    return p.dtype, p.device


def specifier_from_clue(clue: torch.Tensor, config: ModelConfig) -> Optional[torch.Tensor]:
    """Slice a full 5-channel Clue down to what the variant consumes."""
    n = config.specifier_channels
    return None if n == 0 else clue[:, :n]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def audit(model: CRVOS) -> dict:
    """Introspect the decoder graph: layer counts inside the refine modules."""
    refines = [m for m in model.modules() if isinstance(m, RefineModule)]
    deconv = sum(isinstance(m, nn.ConvTranspose2d) for r in refines for m in r.modules())
    bilinear = sum(isinstance(m, BilinearUp) for r in refines for m in r.modules())
    return {
        "refine_modules": len(refines),
        "deconv_layers": deconv,
        "bilinear_layers": bilinear,
        "refine_in_channels": [r.in_channels for r in refines],
        "parameters": count_parameters(model),
    }


def save_checkpoint(path, model: CRVOS, step: int = 0, optimizer=None, extra: Optional[dict] = None) -> None:
    """Write a checkpoint: format tag, config echo, named parameters, step counter.

    Optimizer state and ``extra`` (e.g. RNG state for resuming) are optional.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": to_plain(model.config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": int(step),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return payload


def load_checkpoint(path, expect_variant: Optional[str] = None):
    """Rebuild the model from a checkpoint. Returns ``(model, payload)``."""
    payload = read_checkpoint(path)
    cfg = dict(payload["config"])
    cfg["backbone_init"] = "random"
    config = ModelConfig(**cfg)
    if expect_variant is not None and expect_variant != config.variant:
        raise ConfigError(f"checkpoint was trained as variant {config.variant}, refusing --variant {expect_variant}")
    model = CRVOS(config)
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    mismatch = shape_diff(model.state_dict(), payload["state_dict"])
    if mismatch:
        raise ConfigError("checkpoint does not match config:\n" + "\n".join(mismatch))
    model.load_state_dict(payload["state_dict"])
    model.config.backbone_init = payload["config"].get("backbone_init", "random")
    return model, payload


def shape_diff(expected: dict, got: dict) -> list:
    lines = []
    for k in sorted(set(expected) | set(got)):
        a = tuple(expected[k].shape) if k in expected else None
        b = tuple(got[k].shape) if k in got else None
        if a != b:
            lines.append(f"  {k}: model {a} vs checkpoint {b}")
    return lines


def load_backbone(model: CRVOS, path) -> None:
    """Load encoder weights from a state-dict file (keys relative to the encoder)."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"cannot load backbone weights from {path}: {exc}") from exc
    if "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("encoder."): v for k, v in state.items()}
    mismatch = shape_diff(model.encoder.state_dict(), state)
    if mismatch:
        raise ValueError(f"backbone file {path} does not fit the encoder:\n" + "\n".join(mismatch))
    model.encoder.load_state_dict(state)
