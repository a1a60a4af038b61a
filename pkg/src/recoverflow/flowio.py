"""Frames, flow fields, the Middlebury ``.flo`` format, PNG I/O, and flow colouring."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

FLO_SENTINEL = np.float32(202021.25)
_HEADER = np.dtype([("tag", "<f4"), ("width", "<i4"), ("height", "<i4")])


class FlowFormatError(ValueError):
    pass


class FlowSizeError(FlowFormatError):
    pass


class UnsupportedMaskError(ValueError):
    pass


@dataclass
class Frame:
    """RGB image, ``data`` of shape (3, H, W) with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"frame data must have shape (3, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("frame contains non-finite values")
        if self.data.min(initial=0.0) < 0.0 or self.data.max(initial=0.0) > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass
class FlowField:
    """Per-pixel displacement ``uv`` (2, H, W) in pixels plus a boolean ``valid`` mask (H, W)."""

    uv: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.uv = np.asarray(self.uv, dtype=np.float32)
        if self.uv.ndim != 3 or self.uv.shape[0] != 2:
            raise ValueError(f"flow must have shape (2, H, W), got {self.uv.shape}")
        if self.valid is None:
            self.valid = np.ones(self.uv.shape[1:], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.uv.shape[1:]:
            raise ValueError("validity mask does not match flow resolution")

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[1], self.uv.shape[2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.uv[0], self.uv[1])


def write_flo(flow: FlowField, path) -> None:
    if not flow.valid.all():
        raise UnsupportedMaskError(".flo has no validity channel; flow must be fully valid")
    h, w = flow.shape
    header = np.array([(FLO_SENTINEL, w, h)], dtype=_HEADER)
    payload = np.ascontiguousarray(flow.uv.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(payload.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise FlowSizeError(f"{path}: file too short for a .flo header")
    header = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if header["tag"] != FLO_SENTINEL:
        raise FlowFormatError(f"{path}: bad sentinel {header['tag']!r}, expected 202021.25")
    w, h = int(header["width"]), int(header["height"])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = _HEADER.itemsize + 8 * w * h
    if len(raw) != expected:
        raise FlowSizeError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.itemsize).reshape(h, w, 2)
    return FlowField(data.transpose(2, 0, 1).astype(np.float32))


def _hue_to_rgb(hue_deg: np.ndarray) -> np.ndarray:
    # six equal segments R-Y-G-C-B-M, linear in RGB, so wheel angle equals HSV hue
    anchors = np.array(
        [[1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 1, 1], [0, 0, 1], [1, 0, 1], [1, 0, 0]],
        dtype=np.float64,
    )
    pos = (np.mod(hue_deg, 360.0) / 60.0).ravel()
    k0 = np.floor(pos).astype(int) % 6
    frac = (pos - np.floor(pos))[:, None]
    rgb = (1 - frac) * anchors[k0] + frac * anchors[k0 + 1]
    return rgb.reshape(*hue_deg.shape, 3)


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> Frame:
    """Colour-wheel rendering: hue from the direction atan2(v, u), saturation from magnitude.

    Magnitudes are normalised by ``max_magnitude`` (default: the 99th percentile
    of valid magnitudes) and clipped at 1. Zero motion is white, invalid pixels black.
    """
    u = flow.uv[0].astype(np.float64)
    v = flow.uv[1].astype(np.float64)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        vals = mag[flow.valid]
        max_magnitude = float(np.percentile(vals, 99)) if vals.size else 0.0
    if not max_magnitude > 0:
        max_magnitude = 1.0
    rad = np.clip(mag / max_magnitude, 0.0, 1.0)[..., None]
    hue = np.degrees(np.arctan2(v, u))
    rgb = 1.0 - rad * (1.0 - _hue_to_rgb(hue))
    rgb[~flow.valid] = 0.0
    return Frame(np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1))


class Padding(NamedTuple):
    bottom: int
    right: int


def pad_to_multiple(frame: Frame, m: int) -> tuple[Frame, Padding]:
    """Replicate-pad bottom/right so both sides are multiples of ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = frame.shape
    pad = Padding((-h) % m, (-w) % m)
    data = np.pad(frame.data, ((0, 0), (0, pad.bottom), (0, pad.right)), mode="edge")
    return Frame(data), pad


def crop(x, padding: Padding):
    """Undo :func:`pad_to_multiple` on a Frame, FlowField, or array whose last two axes are (H, W)."""
    def _crop(a):
        h, w = a.shape[-2:]
        return a[..., : h - padding.bottom, : w - padding.right]

    if isinstance(x, Frame):
        return Frame(_crop(x.data))
    if isinstance(x, FlowField):
        return FlowField(_crop(x.uv), _crop(x.valid))
    return _crop(x)


def save_png(frame: Frame, path) -> None:
    img = np.round(frame.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def load_png(path) -> Frame:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return Frame(img.transpose(2, 0, 1))


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)
