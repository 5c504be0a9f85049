"""Stage-I multi-frame network.

Component names double as parameter-name prefixes, which is what the
progressive trainer relies on when it moves weights between phases:

    E      feature extraction (two strided convs + residual blocks)
    flow   pyramid flow estimator, run on x4 downsampled frames
    P      PQF-guided bidirectional propagation
    R1-R6  reconstruction groups (5, 10, 10, 10, 10, 10 residual blocks)
    S      two x2 pixel-shuffle stages
    R      output block; its result is added to the (upsampled) input
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowalign
from .errors import ArgumentError, ConfigError, NumericsError, PadError
from .flowalign import FlowEstimator, FlowEstimatorConfig, resize_tensor, upsample_flow

PASS_NAMES = ("backward", "forward")
SLOT_NAMES = ("prev", "next", "prev_pqf", "next_pqf")


@dataclass(frozen=True)
class StageIConfig:
    channels: int = 32
    extract_blocks: int = 5
    rec_group_sizes: tuple = (5, 10, 10, 10, 10, 10)
    active_groups: int = 6
    scale: int = 1
    propagation_passes: int = 2
    fusion_blocks: int = 2
    flow_levels: int = 3
    flow_channels: int = 16
    use_pqf: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rec_group_sizes", tuple(int(s) for s in self.rec_group_sizes))
        if not 1 <= self.active_groups <= len(self.rec_group_sizes):
            raise ConfigError(f"active_groups must be in [1, {len(self.rec_group_sizes)}], got {self.active_groups}")
        if self.scale not in (1, 4):
            raise ConfigError(f"scale must be 1 or 4, got {self.scale}")
        if self.channels < 1 or any(s < 1 for s in self.rec_group_sizes):
            raise ConfigError("channels and group sizes must be positive")
        if self.propagation_passes < 1:
            raise ConfigError("propagation_passes must be >= 1")

    @property
    def trunk_blocks(self) -> int:
        return sum(self.rec_group_sizes[: self.active_groups])

    @property
    def pad_multiple(self) -> int:
        return 4 * 2 ** (self.flow_levels - 1)

    def with_groups(self, k: int) -> "StageIConfig":
        d = self.to_dict()
        d["active_groups"] = k
        return StageIConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rec_group_sizes"] = list(self.rec_group_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageIConfig":
        return cls(**d)

    def components(self) -> list[str]:
        return ["E", "flow", "P", *(f"R{i}" for i in range(1, self.active_groups + 1)), "S", "R"]


def _zero_conv(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def _conv(cin, cout, stride=1):
    conv = nn.Conv2d(cin, cout, 3, stride, 1)
    # keeps activation scale roughly constant through the stack
    nn.init.kaiming_normal_(conv.weight, a=0.1, nonlinearity="leaky_relu")
    nn.init.zeros_(conv.bias)
    return conv


class ResidualBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 with identity skip; the second conv starts at zero."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _zero_conv(_conv(channels, channels))

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def residual_group(channels, n):
    return nn.Sequential(*(ResidualBlock(channels) for _ in range(n)))


def residual_block_params(channels: int) -> int:
    return 2 * (9 * channels * channels) + 2 * channels


class FeatureExtractor(nn.Module):
    def __init__(self, channels, n_blocks, stride):
        super().__init__()
        self.conv1 = _conv(3, channels, stride)
        self.conv2 = _conv(channels, channels, stride)
        self.blocks = residual_group(channels, n_blocks)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.1)
        x = F.leaky_relu(self.conv2(x), 0.1)
        return self.blocks(x)


class _Pass(nn.Module):
    """One propagation pass: align four sources to frame t and fuse."""

    def __init__(self, channels, n_blocks):
        super().__init__()
        c = channels
        self.offset = nn.Sequential(_conv(2 * c + 2, c), nn.LeakyReLU(0.1), _zero_conv(_conv(c, 2)))
        self.fuse_in = _conv(c * (1 + len(SLOT_NAMES)), c)
        self.blocks = residual_group(c, n_blocks)
        self.fuse_out = _conv(c, c)

    def align(self, src, own, flow):
        warped = flowalign.warp(src, flow)
        refined = flow + self.offset(torch.cat([warped, own, flow], dim=1))
        return flowalign.warp(src, refined)

    def fuse(self, own, aligned):
        y = F.leaky_relu(self.fuse_in(torch.cat([own, *aligned], dim=1)), 0.1)
        return own + self.fuse_out(self.blocks(y))


class Propagation(nn.Module):
    def __init__(self, channels, n_blocks, passes):
        super().__init__()
        self.passes = nn.ModuleList(_Pass(channels, n_blocks) for _ in range(passes))


class Upsampler(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = _conv(channels, 4 * channels)
        self.conv2 = _conv(channels, 4 * channels)

    def forward(self, x):
        x = F.leaky_relu(F.pixel_shuffle(self.conv1(x), 2), 0.1)
        return F.leaky_relu(F.pixel_shuffle(self.conv2(x), 2), 0.1)


class OutputBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _zero_conv(_conv(channels, 3))

    def forward(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), 0.1))


@dataclass(frozen=True)
class PropagationSources:
    """Source frames feeding frame ``t``; ``None`` marks a missing or
    collapsed slot."""

    t: int
    prev: int | None = None
    next: int | None = None
    prev_pqf: int | None = None
    next_pqf: int | None = None

    @property
    def slots(self):
        return (self.prev, self.next, self.prev_pqf, self.next_pqf)

    @property
    def indices(self) -> set[int]:
        return {s for s in self.slots if s is not None}


def compute_sources(t: int, pqf_labels, n: int) -> PropagationSources:
    """Neighbours t-1, t+1 and the nearest strictly earlier/later PQFs."""
    if not 0 <= t < n:
        raise ArgumentError(f"t={t} outside [0, {n})")
    labels = list(pqf_labels) if pqf_labels is not None else [False] * n
    if len(labels) != n:
        raise ArgumentError(f"{len(labels)} labels for {n} frames")
    prev = t - 1 if t > 0 else None
    nxt = t + 1 if t < n - 1 else None
    prev_pqf = next((i for i in range(t - 1, -1, -1) if labels[i]), None)
    next_pqf = next((i for i in range(t + 1, n) if labels[i]), None)
    if prev_pqf == prev:
        prev_pqf = None
    if next_pqf == nxt:
        next_pqf = None
    return PropagationSources(t, prev, nxt, prev_pqf, next_pqf)


class Stage1Net(nn.Module):
    def __init__(self, cfg: StageIConfig = StageIConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.E = FeatureExtractor(c, cfg.extract_blocks, 2 if cfg.scale == 1 else 1)
        self.flow = FlowEstimator(FlowEstimatorConfig(cfg.flow_levels, cfg.flow_channels))
        self.P = Propagation(c, cfg.fusion_blocks, cfg.propagation_passes)
        for i in range(cfg.active_groups):
            setattr(self, f"R{i + 1}", residual_group(c, cfg.rec_group_sizes[i]))
        self.S = Upsampler(c)
        self.R = OutputBlock(c)

    def groups(self):
        return [getattr(self, f"R{i + 1}") for i in range(self.cfg.active_groups)]

    # -- sub-operations -------------------------------------------------

    def extract_features(self, frames: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W)`` -> ``(N, c, h, w)``."""
        h, w = frames.shape[-2:]
        if self.cfg.scale == 1 and (h % 4 or w % 4):
            raise PadError(f"frame size {h}x{w} must be divisible by 4; reflect-pad first")
        return self.E(frames)

    def sources(self, labels, n):
        if not self.cfg.use_pqf:
            labels = None
        return [compute_sources(t, labels, n) for t in range(n)]

    def compute_flows(self, low: torch.Tensor, sources, feat_hw):
        """Flows ``t -> s`` for every (sample, t, s) pair the sources need.

        Returns a dict keyed by ``(b, t, s)`` with ``(2, h, w)`` tensors at
        feature resolution.
        """
        pairs = sorted({(b, src.t, s) for b, per in enumerate(sources) for src in per for s in src.indices})
        if not pairs:
            return {}
        ref = torch.stack([low[b, t] for b, t, _ in pairs])
        tgt = torch.stack([low[b, s] for b, _, s in pairs])
        flow = self.flow(ref, tgt)
        factor = feat_hw[0] // flow.shape[-2]
        flow = upsample_flow(flow, factor)
        return {p: flow[i] for i, p in enumerate(pairs)}

    def propagate(self, feats: torch.Tensor, sources, flows) -> torch.Tensor:
        """Run the propagation passes over ``(B, T, c, h, w)`` features.

        Each pass reads only the previous pass's states, so its result does
        not depend on visiting order; passes are named backward/forward and
        own separate parameters.
        """
        b, n = feats.shape[:2]
        hidden = feats
        zero_flow = feats.new_zeros(2, *feats.shape[-2:])
        for p, layer in enumerate(self.P.passes):
            own = hidden.reshape(b * n, *hidden.shape[2:])
            aligned = []
            for j in range(len(SLOT_NAMES)):
                rows, src_b, src_t, flist = [], [], [], []
                for bi in range(b):
                    for t in range(n):
                        s = sources[bi][t].slots[j]
                        if s is None:
                            continue
                        rows.append(bi * n + t)
                        src_b.append(bi)
                        src_t.append(s)
                        flist.append(flows.get((bi, t, s), zero_flow))
                if not rows:
                    aligned.append(own)
                    continue
                idx = torch.tensor(rows, device=feats.device)
                src = hidden[torch.tensor(src_b), torch.tensor(src_t)]
                out = layer.align(src, own[idx], torch.stack(flist))
                aligned.append(own.index_copy(0, idx, out))
            new = layer.fuse(own, aligned).reshape_as(hidden)
            finite = torch.isfinite(new.detach()).reshape(b, n, -1).all(-1)
            if not bool(finite.all()):
                bi, t = (int(v) for v in torch.nonzero(~finite)[0])
                name = PASS_NAMES[p % 2]
                raise NumericsError(f"non-finite features at frame {t} (sample {bi}) in {name} pass {p}", t, name)
            hidden = new
        return hidden

    def reconstruct(self, fused: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """``R(S(Rk(...R1(fused))))`` plus the global residual.

        Args:
            fused: ``(N, c, h, w)``.
            inputs: ``(N, 3, H, W)`` LQ frames.
        """
        y = fused
        for g in self.groups():
            y = g(y)
        y = self.R(self.S(y))
        base = inputs
        if self.cfg.scale == 4:
            base = resize_tensor(inputs, (4 * inputs.shape[-2], 4 * inputs.shape[-1]))
        return y + base

    # -- full model -----------------------------------------------------

    def forward(self, lq: torch.Tensor, labels=None) -> torch.Tensor:
        """Enhance ``(B, T, 3, H, W)`` clips.

        Args:
            labels: per-sample PQF label lists (length T), or None.
        """
        if lq.dim() == 4:
            return self.forward(lq.unsqueeze(0), [labels] if labels is not None else None)[0]
        b, n, _, h, w = lq.shape
        if labels is None:
            labels = [None] * b
        m = self.cfg.pad_multiple
        ph, pw = (-h) % m, (-w) % m
        x = lq.reshape(b * n, 3, h, w)
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        hp, wp = x.shape[-2:]
        feats = self.extract_features(x)
        fh, fw = feats.shape[-2:]
        low = resize_tensor(x, (hp // 4, wp // 4)).reshape(b, n, 3, hp // 4, wp // 4)
        sources = [self.sources(lab, n) for lab in labels]
        flows = self.compute_flows(low, sources, (fh, fw))
        fused = self.propagate(feats.reshape(b, n, *feats.shape[1:]), sources, flows)
        out = self.reconstruct(fused.reshape(b * n, *fused.shape[2:]), x)
        s = self.cfg.scale
        out = out[..., : h * s, : w * s]
        return out.reshape(b, n, 3, h * s, w * s)


def count_parameters(cfg: StageIConfig) -> int:
    with torch.device("meta"):
        model = Stage1Net(cfg)
    return sum(p.numel() for p in model.parameters())


def zero_residual_branches(model: Stage1Net) -> Stage1Net:
    """Zero the last conv of every trunk block and of the output block."""
    with torch.no_grad():
        for g in model.groups():
            for blk in g:
                _zero_conv(blk.conv2)
        _zero_conv(model.R.conv2)
    return model


def to_tensor(frames: np.ndarray) -> torch.Tensor:
    """``(..., H, W, 3)`` numpy -> ``(..., 3, H, W)`` float tensor."""
    a = np.ascontiguousarray(np.moveaxis(np.asarray(frames, dtype=np.float32), -1, -3))
    return torch.from_numpy(a)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(t.detach().cpu().numpy(), -3, -1))


def enhance_frames(model: Stage1Net, frames: np.ndarray, labels=None) -> np.ndarray:
    """Run the model on an ``(N, H, W, 3)`` array."""
    param = next(model.parameters())
    with torch.no_grad():
        out = model(to_tensor(frames).to(param), labels)
    return to_numpy(out)


def forward(seq, model: Stage1Net):
    """Stage-I enhancement of a VideoSequence, clamped to [0, 1]."""
    from .videodata import VideoSequence

    out = np.clip(enhance_frames(model, seq.frames, seq.pqf_labels), 0.0, 1.0)
    return VideoSequence(seq.id, out, seq.fps, seq.pqf_labels)


def build_model(cfg: StageIConfig, params: dict | None = None, seed: int | None = None) -> Stage1Net:
    """Instantiate a model, optionally loading a strict parameter dict."""
    if seed is not None:
        torch.manual_seed(seed)
    model = Stage1Net(cfg)
    if params is not None:
        state = {k: torch.as_tensor(np.asarray(v)) for k, v in params.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise ConfigError(f"parameters do not match config: missing={missing[:5]} unexpected={unexpected[:5]}")
    return model
