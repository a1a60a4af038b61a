"""All-pairs correlation pyramid, windowed lookup, and cost-volume modes.

Tensors are batched: feature maps are ``(B, d, h, w)`` and coarse flows
``(B, 2, h, w)`` in feature-grid units (channel 0 horizontal, channel 1
vertical). Unbatched ``(d, h, w)`` inputs are accepted and get a batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import instrument

FLOPS_PER_BILINEAR_SAMPLE = 7
FLOPS_PER_POOLED_ENTRY = 4


class ContractError(ValueError):
    """Raised when tensor shapes violate an operation's preconditions."""


@dataclass(frozen=True)
class CostVolumeMode:
    kind: str = "active"
    p: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("active", "fading", "removed"):
            raise ValueError(f"unknown cost-volume mode {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.p}")

    @classmethod
    def active(cls) -> "CostVolumeMode":
        return cls("active")

    @classmethod
    def fading(cls, p: float) -> "CostVolumeMode":
        return cls("fading", float(p))

    @classmethod
    def removed(cls) -> "CostVolumeMode":
        return cls("removed")

    @property
    def uses_volume(self) -> bool:
        return self.kind != "removed"

    def __str__(self) -> str:
        return f"fading({self.p:g})" if self.kind == "fading" else self.kind

    @classmethod
    def parse(cls, text: str) -> "CostVolumeMode":
        text = text.strip()
        if text.startswith("fading(") and text.endswith(")"):
            return cls.fading(float(text[7:-1]))
        return cls(text)


@dataclass
class CostVolumePyramid:
    """Level ``l`` has shape ``(B, h*w, h_l, w_l)``; row ``i*w + j`` belongs to grid pixel (i, j)."""

    levels: list[torch.Tensor]
    radius: int = 4

    @property
    def grid_size(self) -> tuple[int, int]:
        return tuple(self.levels[0].shape[-2:])

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def _pool2x2(level: torch.Tensor) -> torch.Tensor:
    # degenerate (size-1) axes are carried through unpooled
    b, n, h, w = level.shape
    kh, kw = (2 if h > 1 else 1), (2 if w > 1 else 1)
    pooled = F.avg_pool2d(level.reshape(b * n, 1, h, w), (kh, kw), stride=(kh, kw))
    return pooled.reshape(b, n, *pooled.shape[-2:])


def correlate(
    f1: torch.Tensor, f2: torch.Tensor, num_levels: int = 4, radius: int = 4
) -> CostVolumePyramid:
    """Dense dot-product correlation of every pixel pair, scaled by 1/sqrt(d), then pooled."""
    f1, f2 = _batched(f1), _batched(f2)
    if f1.shape != f2.shape:
        raise ContractError(f"feature maps differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    b, d, h, w = f1.shape
    n = h * w
    corr = torch.matmul(f1.reshape(b, d, n).transpose(1, 2), f2.reshape(b, d, n))
    corr = (corr / math.sqrt(d)).reshape(b, n, h, w)
    instrument.count("correlate_calls")
    instrument.count("correlate_flops", 2 * d * n * n * b)
    instrument.count("costvolume_flops", 2 * d * n * n * b)
    levels = [instrument.track(corr)]
    for _ in range(num_levels - 1):
        corr = _pool2x2(corr)
        pool_flops = FLOPS_PER_POOLED_ENTRY * corr.numel()
        instrument.count("pool_flops", pool_flops)
        instrument.count("costvolume_flops", pool_flops)
        levels.append(instrument.track(corr))
    return CostVolumePyramid(levels, radius)


def correlate_limited(f1: torch.Tensor, f2: torch.Tensor, max_disp: int) -> torch.Tensor:
    """Correlation restricted to offsets within ``max_disp``; shape ``(B, (2D+1)^2, h, w)``.

    Channel ``(di + D) * (2D + 1) + (dj + D)`` holds the offset (di rows, dj columns);
    targets outside the grid correlate to zero.
    """
    f1, f2 = _batched(f1), _batched(f2)
    if max_disp < 0:
        raise ContractError("max_disp must be non-negative")
    b, d, h, w = f1.shape
    D = int(max_disp)
    padded = F.pad(f2, (D, D, D, D))
    out = []
    for di in range(-D, D + 1):
        for dj in range(-D, D + 1):
            shifted = padded[:, :, D + di : D + di + h, D + dj : D + dj + w]
            out.append((f1 * shifted).sum(dim=1))
    return torch.stack(out, dim=1) / math.sqrt(d)


def coords_grid(b: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs, ys]).unsqueeze(0).expand(b, 2, h, w)


def lookup(pyramid: CostVolumePyramid, flow: torch.Tensor) -> torch.Tensor:
    """Sample a (2r+1)^2 window per level around each pixel's flow target.

    Output channel ``l*(2r+1)^2 + a*(2r+1) + c`` holds level ``l`` at vertical
    offset ``a - r`` and horizontal offset ``c - r``.
    """
    flow = _batched(flow)
    r = pyramid.radius
    k = 2 * r + 1
    b, _, h, w = flow.shape
    target = coords_grid(b, h, w, flow.dtype) + flow
    target = target.permute(0, 2, 3, 1).reshape(b * h * w, 1, 2)
    offs = torch.arange(-r, r + 1, dtype=flow.dtype)
    dy, dx = torch.meshgrid(offs, offs, indexing="ij")
    delta = torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1).unsqueeze(0)
    out = []
    for lvl, volume in enumerate(pyramid.levels):
        hl, wl = volume.shape[-2:]
        pts = target / 2**lvl + delta
        # pixel-centre normalisation stays finite for 1-pixel levels
        grid = torch.stack(
            [(2 * pts[..., 0] + 1) / wl - 1, (2 * pts[..., 1] + 1) / hl - 1], dim=-1
        )
        sampled = F.grid_sample(
            volume.reshape(b * h * w, 1, hl, wl),
            grid.unsqueeze(1),
            mode="bilinear",
            padding_mode="zeros",
            align_corners=False,
        )
        out.append(sampled.reshape(b, h, w, k * k))
    n_samples = b * h * w * k * k * len(pyramid.levels)
    instrument.count("lookup_samples", n_samples)
    instrument.count("lookup_flops", FLOPS_PER_BILINEAR_SAMPLE * n_samples)
    instrument.count("costvolume_flops", FLOPS_PER_BILINEAR_SAMPLE * n_samples)
    feats = torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()
    return instrument.track(feats)


def apply_mode(
    motion_features: torch.Tensor,
    mode: CostVolumeMode,
    generator: torch.Generator | int | None = None,
) -> torch.Tensor:
    """Gate lookup features by the cost-volume lifecycle mode.

    Fading drops whole pixels with probability ``p`` and does not rescale the
    survivors, so ``fading(1.0)`` yields exact zeros like ``removed``.
    """
    if mode.kind == "active":
        return motion_features
    if mode.kind == "removed":
        return torch.zeros_like(motion_features)
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    x = _batched(motion_features)
    b, _, h, w = x.shape
    keep = torch.rand(b, 1, h, w, generator=generator) >= mode.p
    out = x * keep.to(x.dtype)
    return out.reshape(motion_features.shape)
