"""Frame I/O, surrogate compression, duplicate removal, PQF labelling and
patch sampling."""

from __future__ import annotations

import json
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.fft import dctn, idctn

from .errors import ArgumentError, DegradeError, IngestError, LabelError, PairingError
from .flowalign import bicubic_resize

DEFAULT_PATTERN = "frame_%05d.png"
BLOCK = 8
# frequency ramp of the toy quantiser: coarser steps for higher frequencies
QUANT_MATRIX = 1.0 + 0.5 * np.add.outer(np.arange(BLOCK), np.arange(BLOCK))
QUANT_UNIT = 0.02


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float32) / np.float32(255.0)


@dataclass
class VideoSequence:
    """An ordered stack of RGB frames, ``frames.shape == (N, H, W, 3)``.

    Pixel values are float32 in ``[0, 1]``.
    """

    id: str
    frames: np.ndarray
    fps: Fraction | None = None
    pqf_labels: list[bool] | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or len(self.frames) < 1:
            raise ArgumentError(f"sequence {self.id!r}: expected (N, H, W, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ArgumentError(f"sequence {self.id!r} has non-finite pixels")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ArgumentError(f"sequence {self.id!r} has pixels outside [0, 1]")
        if self.pqf_labels is not None:
            self.pqf_labels = [bool(v) for v in self.pqf_labels]
            if len(self.pqf_labels) != len(self.frames):
                raise ArgumentError(
                    f"sequence {self.id!r}: {len(self.pqf_labels)} labels for {len(self.frames)} frames"
                )
            if not any(self.pqf_labels):
                raise ArgumentError(f"sequence {self.id!r}: at least one PQF label must be true")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames.shape[1:3]

    def subset(self, indices) -> "VideoSequence":
        indices = list(indices)
        labels = None
        if self.pqf_labels is not None:
            labels = [self.pqf_labels[i] for i in indices]
            if not any(labels):
                labels = None
        return VideoSequence(self.id, self.frames[indices], self.fps, labels)


@dataclass(frozen=True)
class DegradationProfile:
    """Compression settings. Frames at GOP positions ``t % gop_period == 0``
    are peak-quality frames and are coded with ``pqf_strength``."""

    mode: str = "surrogate-codec"
    gop_period: int = 4
    base_strength: float = 2.0
    pqf_strength: float = 0.5
    downsample_factor: int = 1
    seed: int = 0
    # per-frame multiplicative strength jitter in [1 - j, 1 + j], drawn from seed
    strength_jitter: float = 0.0
    # repeated raw frames are coded as copies of the previous output frame
    skip_repeats: bool = False
    encoder_cmd: str | None = None

    def __post_init__(self):
        if self.mode not in ("surrogate-codec", "external-codec"):
            raise ArgumentError(f"unknown degradation mode {self.mode!r}")
        if self.gop_period < 2:
            raise ArgumentError("gop_period must be >= 2")
        if self.base_strength < 0 or not (0 <= self.pqf_strength < self.base_strength):
            raise ArgumentError("need 0 <= pqf_strength < base_strength")
        if self.downsample_factor not in (1, 4):
            raise ArgumentError("downsample_factor must be 1 or 4")
        if not 0 <= self.strength_jitter < 1:
            raise ArgumentError("strength_jitter must lie in [0, 1)")
        if self.mode == "external-codec" and not self.encoder_cmd:
            raise ArgumentError("external-codec mode requires encoder_cmd")

    def strength(self, t: int) -> float:
        return self.pqf_strength if t % self.gop_period == 0 else self.base_strength

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class PairedSample:
    lq: VideoSequence
    gt: VideoSequence
    crop_origin: tuple[int, int] = (0, 0)
    temporal_window: tuple[int, int] = (0, 0)
    scale: int = 1

    def __post_init__(self):
        if len(self.lq) != len(self.gt):
            raise PairingError(f"lq has {len(self.lq)} frames, gt has {len(self.gt)}")
        lh, lw = self.lq.shape
        if self.gt.shape != (lh * self.scale, lw * self.scale):
            raise PairingError(f"gt size {self.gt.shape} != lq size {self.lq.shape} x {self.scale}")


# --------------------------------------------------------------------- I/O


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%0?(\d*)d", pattern)
    if m is None:
        raise ArgumentError(f"pattern {pattern!r} needs a %d field")
    width = m.group(1)
    digits = rf"(\d{{{int(width)}}})" if width else r"(\d+)"
    return re.compile(re.escape(pattern[: m.start()]) + digits + re.escape(pattern[m.end() :]) + "$")


def load_sequence(dir_path, expected_pattern: str = DEFAULT_PATTERN, seq_id: str | None = None) -> VideoSequence:
    """Load a directory of numbered 8-bit RGB frames (1-based on disk)."""
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise IngestError(f"{dir_path} is not a directory")
    regex = _pattern_regex(expected_pattern)
    found = {}
    for p in dir_path.iterdir():
        m = regex.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise IngestError(f"{dir_path}: no files match {expected_pattern!r}")
    indices = sorted(found)
    expected = list(range(1, len(indices) + 1))
    if indices != expected:
        missing = sorted(set(range(1, indices[-1] + 1)) - set(indices))
        raise IngestError(f"{dir_path}: frame indices not contiguous from 1, missing {missing[:10]}")
    frames = []
    for i in indices:
        with Image.open(found[i]) as im:
            arr = np.asarray(im.convert("RGB"))
        if frames and arr.shape != frames[0].shape:
            raise IngestError(f"{found[i].name}: shape {arr.shape} differs from {frames[0].shape}")
        frames.append(arr)
    return VideoSequence(seq_id or dir_path.name, from_uint8(np.stack(frames)))


def save_sequence(seq: VideoSequence, dir_path, pattern: str = DEFAULT_PATTERN) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(to_uint8(seq.frames), start=1):
        Image.fromarray(frame).save(dir_path / (pattern % i))
    return dir_path


def pad_to_multiple(frames: np.ndarray, multiple: int = 8, mode: str = "reflect"):
    """Pad ``(..., H, W, C)`` frames at the bottom/right; returns (padded, (H, W))."""
    h, w = frames.shape[-3:-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return frames, (h, w)
    pad = [(0, 0)] * (frames.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "symmetric"
    return np.pad(frames, pad, mode=mode), (h, w)


# ------------------------------------------------------------- degradation


def _quantise_blocks(frame: np.ndarray, strength: float) -> np.ndarray:
    if strength <= 0:
        return frame.copy()
    h, w, c = frame.shape
    padded, _ = pad_to_multiple(frame.astype(np.float64), BLOCK, mode="edge")
    ph, pw = padded.shape[:2]
    blocks = padded.reshape(ph // BLOCK, BLOCK, pw // BLOCK, BLOCK, c).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    step = strength * QUANT_UNIT * QUANT_MATRIX
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(ph, pw, c)[:h, :w]
    return np.clip(rec, 0.0, 1.0)


def _jitter(profile: DegradationProfile, n: int) -> np.ndarray:
    if profile.strength_jitter == 0:
        return np.ones(n)
    rng = np.random.default_rng(profile.seed)
    return rng.uniform(1 - profile.strength_jitter, 1 + profile.strength_jitter, n)


def degrade(gt: VideoSequence, profile: DegradationProfile) -> VideoSequence:
    """Synthesize a compressed LQ version of ``gt``.

    In surrogate mode every frame goes through 8x8 block DCT quantisation
    with a step proportional to its GOP-position strength; output frames
    lie on the 8-bit grid like a decoded stream.
    """
    if len(gt) == 0:
        raise DegradeError("empty sequence")
    h, w = gt.shape
    f = profile.downsample_factor
    if h < BLOCK * f or w < BLOCK * f:
        raise DegradeError(f"frame {h}x{w} smaller than the {BLOCK}x{BLOCK} block after downsampling")
    frames = gt.frames
    if f != 1:
        frames = np.stack([bicubic_resize(fr, Fraction(1, f)) for fr in frames])
        frames = np.clip(frames, 0.0, 1.0)
    frames = from_uint8(to_uint8(frames))
    if profile.mode == "external-codec":
        out = _external_encode(frames, profile)
    else:
        jit = _jitter(profile, len(frames))
        out = np.empty_like(frames)
        raw8 = to_uint8(gt.frames)
        for t, frame in enumerate(frames):
            if profile.skip_repeats and t > 0 and np.array_equal(raw8[t], raw8[t - 1]):
                out[t] = out[t - 1]
                continue
            out[t] = _quantise_blocks(frame, profile.strength(t) * jit[t])
        out = from_uint8(to_uint8(out))
    return VideoSequence(gt.id, out, gt.fps, None)


def _external_encode(frames: np.ndarray, profile: DegradationProfile) -> np.ndarray:
    """Round-trip frames through a user command.

    The command template may use ``{input}``, ``{output}``, ``{pattern}``,
    ``{gop}``, ``{strength}`` and ``{pqf_strength}``; it must write the
    same number of frames to ``{output}`` using ``{pattern}``.
    """
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in"
        dst = Path(tmp) / "out"
        dst.mkdir()
        save_sequence(VideoSequence("tmp", frames), src)
        cmd = profile.encoder_cmd.format(
            input=shlex.quote(str(src)),
            output=shlex.quote(str(dst)),
            pattern=DEFAULT_PATTERN,
            gop=profile.gop_period,
            strength=profile.base_strength,
            pqf_strength=profile.pqf_strength,
        )
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DegradeError(f"encoder command failed ({proc.returncode}): {proc.stderr.strip()}")
        decoded = load_sequence(dst).frames
    if decoded.shape != frames.shape:
        raise DegradeError(f"encoder produced {decoded.shape}, expected {frames.shape}")
    return decoded


# -------------------------------------------------------- duplicate frames


def duplicate_keep_indices(lq: VideoSequence) -> list[int]:
    """Indices of frames that are not exact 8-bit copies of their predecessor."""
    q = to_uint8(lq.frames)
    keep = [0]
    for t in range(1, len(q)):
        if not np.array_equal(q[t], q[t - 1]):
            keep.append(t)
    return keep


def remove_duplicates(lq: VideoSequence, gt: VideoSequence):
    """Drop every LQ frame identical to its immediate predecessor, together
    with the GT frame at the same index."""
    if len(lq) != len(gt):
        raise PairingError(f"lq has {len(lq)} frames, gt has {len(gt)}")
    keep = duplicate_keep_indices(lq)
    if len(keep) == len(lq):
        return lq, gt
    return lq.subset(keep), gt.subset(keep)


# ------------------------------------------------------------ PQF labels


def local_maxima(values) -> list[bool]:
    """Strict local maxima; an endpoint counts iff it beats its one neighbour."""
    v = list(values)
    n = len(v)
    if n == 1:
        return [True]
    out = []
    for t in range(n):
        left = t == 0 or v[t] > v[t - 1]
        right = t == n - 1 or v[t] > v[t + 1]
        out.append(left and right)
    if not any(out):
        # flat series: fall back to the first global maximum
        out[int(np.argmax(v))] = True
    return out


def label_pqfs(lq: VideoSequence, gt: VideoSequence | None = None, profile: DegradationProfile | None = None) -> list[bool]:
    if profile is not None:
        return [t % profile.gop_period == 0 for t in range(len(lq))]
    if gt is None:
        raise LabelError("label_pqfs needs a ground-truth sequence or a degradation profile")
    if len(gt) != len(lq):
        raise PairingError(f"lq has {len(lq)} frames, gt has {len(gt)}")
    from .evalreport import psnr

    return local_maxima([psnr(a, b) for a, b in zip(lq.frames, gt.frames)])


# -------------------------------------------------------------- sampling


def sample_every_k(seq: VideoSequence, k: int):
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    return [(i, seq.frames[i]) for i in range(0, len(seq), k)]


def make_patches(pool, patch_size: int, t_len: int, rng, scale: int = 1) -> PairedSample:
    """Draw one aligned spatio-temporal crop from a pool of (lq, gt) pairs.

    Args:
        pool: sequence of ``(lq, gt)`` VideoSequence pairs.
        patch_size: LQ crop side in pixels; the GT crop is ``patch_size * scale``.
        t_len: number of consecutive frames.
        rng: ``numpy.random.Generator`` or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    lq, gt = pool[int(rng.integers(len(pool)))]
    h, w = lq.shape
    if patch_size > min(h, w):
        raise ArgumentError(f"patch {patch_size} larger than frame {h}x{w}")
    if t_len > len(lq) or t_len < 1:
        raise ArgumentError(f"t_len {t_len} invalid for {len(lq)} frames")
    t0 = int(rng.integers(len(lq) - t_len + 1))
    y = int(rng.integers(h - patch_size + 1))
    x = int(rng.integers(w - patch_size + 1))
    sl = slice(t0, t0 + t_len)
    labels = lq.pqf_labels[sl] if lq.pqf_labels is not None else None
    if labels is not None and not any(labels):
        labels = None
    lq_crop = VideoSequence(lq.id, lq.frames[sl, y : y + patch_size, x : x + patch_size], lq.fps, labels)
    ys, xs, ps = y * scale, x * scale, patch_size * scale
    gt_crop = VideoSequence(gt.id, gt.frames[sl, ys : ys + ps, xs : xs + ps], gt.fps)
    return PairedSample(lq_crop, gt_crop, (y, x), (t0, t_len), scale)


# -------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    id: str
    lq_dir: str
    gt_dir: str
    pqf_labels: list[bool]
    split: str = "train"


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    profile: DegradationProfile
    root: str = "."
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        doc = {
            "format_version": 1,
            "profile": self.profile.to_dict(),
            "meta": self.meta,
            "sequences": [vars(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in doc["sequences"]]
        return cls(entries, DegradationProfile(**doc["profile"]), str(path.parent), doc.get("meta", {}))

    def load_pairs(self, split: str):
        """Load ``(lq, gt)`` VideoSequence pairs for one split."""
        root = Path(self.root)
        pairs = []
        for e in self.split(split):
            lq = load_sequence(root / e.lq_dir, seq_id=e.id)
            gt = load_sequence(root / e.gt_dir, seq_id=e.id)
            lq = replace(lq, pqf_labels=e.pqf_labels)
            pairs.append((lq, gt))
        return pairs
