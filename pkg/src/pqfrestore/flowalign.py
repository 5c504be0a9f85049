"""Bicubic resizing, bilinear warping and a small pyramid flow estimator.

Sampling convention used everywhere in the package: a flow field stores
``(dy, dx)`` per pixel and ``warp(x, flow)[y, x] = x[y + dy, x + dx]``,
sampled bilinearly with border replication.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArgumentError

CUBIC_A = -0.5


def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x < 1.0
    far = (x >= 1.0) & (x < 2.0)
    xn = x[near]
    xf = x[far]
    out[near] = ((a + 2.0) * xn - (a + 3.0)) * xn * xn + 1.0
    out[far] = (((xf - 5.0) * xf + 8.0) * xf - 4.0) * a
    return out


@lru_cache(maxsize=256)
def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``(out_size, in_size)`` bicubic interpolation matrix.

    The kernel is stretched by the reduction factor when downsampling
    (antialiasing) and renormalised where it is truncated by the border,
    which is the convention of the common image libraries.
    """
    if in_size < 1 or out_size < 1:
        raise ArgumentError(f"resize sizes must be positive, got {in_size}->{out_size}")
    scale = in_size / out_size
    support_scale = max(scale, 1.0)
    support = 2.0 * support_scale
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), in_size)
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps - center + 0.5) / support_scale)
        total = w.sum()
        if total != 0.0:
            w = w / total
        weights[i, lo:hi] = w
    weights.setflags(write=False)
    return weights


def _output_size(size: int, scale) -> int:
    out = Fraction(scale).limit_denominator(10_000) * size
    out = int(out.numerator * 2 + out.denominator) // (2 * out.denominator)
    if out < 1:
        raise ArgumentError(f"scale {scale} maps size {size} to {out} pixels")
    return out


def bicubic_resize(frame: np.ndarray, scale=None, size=None) -> np.ndarray:
    """Resize an ``H x W x C`` (or ``H x W``) frame with bicubic filtering.

    Args:
        frame: image array.
        scale: rational scale factor, e.g. ``Fraction(1, 4)``.
        size: explicit ``(H', W')``; overrides ``scale``.
    """
    frame = np.asarray(frame)
    if scale is not None and Fraction(scale).limit_denominator(10_000) <= 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    h, w = frame.shape[:2]
    if size is None:
        if scale is None:
            raise ArgumentError("either scale or size is required")
        size = (_output_size(h, scale), _output_size(w, scale))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ArgumentError(f"non-positive output size {size}")
    if (oh, ow) == (h, w):
        return frame.astype(np.float32, copy=True)
    wy = resize_weights(h, oh)
    wx = resize_weights(w, ow)
    x = frame.astype(np.float64)
    out = np.tensordot(wy, x, axes=(1, 0))
    out = np.moveaxis(np.tensordot(wx, out, axes=(1, 1)), 0, 1)
    return out.astype(np.float32)


def resize_tensor(x: torch.Tensor, size) -> torch.Tensor:
    """Differentiable bicubic resize of ``(..., H, W)`` tensors."""
    h, w = x.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    wy = torch.tensor(resize_weights(h, oh), dtype=x.dtype, device=x.device)
    wx = torch.tensor(resize_weights(w, ow), dtype=x.dtype, device=x.device)
    return torch.einsum("oh,...hw,pw->...op", wy, x, wx)


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``features`` by ``flow`` with bilinear sampling.

    Args:
        features: ``(B, C, H, W)`` or ``(C, H, W)``.
        flow: ``(B, 2, H, W)`` or ``(2, H, W)``; channel 0 is dy, channel 1 dx.

    Returns:
        Tensor shaped like ``features``. Out-of-range sample positions are
        clamped to the border.
    """
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    if isinstance(flow, FlowField):
        flow = flow.as_tensor().to(features.device)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    b, c, h, w = features.shape
    if flow.shape[-2:] != (h, w) or flow.shape[1] != 2:
        raise ArgumentError(
            f"flow of shape {tuple(flow.shape)} does not match features {tuple(features.shape)}"
        )
    if flow.shape[0] != b:
        flow = flow.expand(b, -1, -1, -1)
    flow = flow.to(features.dtype)
    gy = torch.arange(h, dtype=features.dtype, device=features.device).view(1, h, 1)
    gx = torch.arange(w, dtype=features.dtype, device=features.device).view(1, 1, w)
    ys = (gy + flow[:, 0]).clamp(0, h - 1)
    xs = (gx + flow[:, 1]).clamp(0, w - 1)
    # NaN positions gather pixel 0 and stay NaN through the weights, so
    # callers can report them instead of crashing on a bad index
    y0 = ys.detach().nan_to_num(0.0).floor().clamp(max=max(h - 2, 0))
    x0 = xs.detach().nan_to_num(0.0).floor().clamp(max=max(w - 2, 0))
    wy = ys - y0
    wx = xs - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = features.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    wy = wy.unsqueeze(1)
    wx = wx.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out[0] if squeeze else out


def upsample_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinearly upsample ``(B, 2, h, w)`` flow and rescale its vectors."""
    if factor == 1:
        return flow
    up = F.interpolate(flow, scale_factor=factor, mode="bilinear", align_corners=False)
    return up * factor


@dataclass
class FlowField:
    """Per-pixel displacement map, ``vectors[y, x] = (dy, dx)`` in pixels."""

    vectors: np.ndarray
    max_magnitude: float | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise ArgumentError(f"flow vectors must be H x W x 2, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ArgumentError("flow contains non-finite values")
        bound = self.max_magnitude if self.max_magnitude is not None else max(self.resolution)
        if self.vectors.size and np.abs(self.vectors).max() > bound:
            raise ArgumentError(f"flow magnitude exceeds bound {bound}")

    @property
    def resolution(self):
        return self.vectors.shape[:2]

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.vectors.transpose(2, 0, 1)))

    @classmethod
    def from_tensor(cls, flow: torch.Tensor) -> "FlowField":
        return cls(flow.detach().cpu().numpy().transpose(1, 2, 0))

    def dump(self, path) -> None:
        """Write ``uint32 H, uint32 W`` then H*W*2 little-endian float32."""
        h, w = self.resolution
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", h, w))
            fh.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FlowField":
        data = Path(path).read_bytes()
        h, w = struct.unpack("<II", data[:8])
        vec = np.frombuffer(data[8:], dtype="<f4").reshape(h, w, 2)
        return cls(vec.copy(), max_magnitude=float("inf"))


@dataclass(frozen=True)
class FlowEstimatorConfig:
    pyramid_levels: int = 3
    channels: int = 16
    trainable: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ArgumentError("pyramid_levels must be >= 1")


class _FlowLevel(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(8, channels, 3, 1, 1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, 2, 3, 1, 1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, ref, target, flow):
        warped = warp(target, flow)
        return flow + self.body(torch.cat([ref, warped, flow], dim=1))


class FlowEstimator(nn.Module):
    """Coarse-to-fine residual flow network.

    Each level upsamples the coarser estimate, warps the target towards the
    reference and predicts a residual correction. The last convolution of
    every level is zero-initialised, so an untrained estimator outputs zero
    flow.
    """

    def __init__(self, cfg: FlowEstimatorConfig = FlowEstimatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.levels = nn.ModuleList(_FlowLevel(cfg.channels) for _ in range(cfg.pyramid_levels))
        if not cfg.trainable:
            self.requires_grad_(False)

    @property
    def divisor(self) -> int:
        return 2 ** (self.cfg.pyramid_levels - 1)

    def forward(self, ref: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Flow from ``ref`` to ``target`` at the inputs' own resolution.

        Inputs are ``(B, 3, h, w)`` with h and w divisible by
        ``2 ** (levels - 1)``.
        """
        if ref.shape != target.shape:
            raise ArgumentError(f"shape mismatch {tuple(ref.shape)} vs {tuple(target.shape)}")
        refs, tgts = [ref], [target]
        for _ in range(self.cfg.pyramid_levels - 1):
            refs.append(F.avg_pool2d(refs[-1], 2))
            tgts.append(F.avg_pool2d(tgts[-1], 2))
        b, _, h, w = refs[-1].shape
        flow = ref.new_zeros(b, 2, h, w)
        for level, (r, t) in enumerate(zip(reversed(refs), reversed(tgts))):
            if level > 0:
                flow = upsample_flow(flow, 2)
            flow = self.levels[level](r, t, flow)
        return flow


def estimate_flow(ref: np.ndarray, target: np.ndarray, estimator: FlowEstimator) -> FlowField:
    """Full-resolution flow between two ``H x W x 3`` frames.

    The estimator runs on x4 bicubically downsampled copies; the result is
    upsampled back with its displacements multiplied by 4.
    """
    ref = np.asarray(ref, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if ref.shape != target.shape:
        raise ArgumentError(f"shape mismatch {ref.shape} vs {target.shape}")
    h, w = ref.shape[:2]
    if h % 4 or w % 4:
        raise ArgumentError(f"frame size {h}x{w} must be divisible by 4")
    low = (h // 4, w // 4)
    if min(low) < estimator.divisor or low[0] % estimator.divisor or low[1] % estimator.divisor:
        raise ArgumentError(
            f"frame {h}x{w} is too small or not aligned for a {estimator.cfg.pyramid_levels}-level pyramid"
        )
    param = next(estimator.parameters())

    def prep(frame):
        t = torch.from_numpy(frame.transpose(2, 0, 1).copy()).unsqueeze(0).to(param)
        return resize_tensor(t, low)

    with torch.no_grad():
        flow = estimator(prep(ref), prep(target))
        flow = upsample_flow(flow, 4)
    return FlowField(flow[0].cpu().numpy().transpose(1, 2, 0), max_magnitude=float(max(h, w)))
