"""Geometric self-ensembling over the eight symmetries of the square, model
ensembling, and the two-stage cascade."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnsembleError

_NAMES = ("e", "r90", "r180", "r270", "h", "h_r90", "h_r180", "h_r270")


@dataclass(frozen=True)
class Dihedral8:
    """Element ``h^flip . r^rot`` of the dihedral group of order 8.

    ``r`` rotates 90 degrees counter-clockwise in the (H, W) plane and ``h``
    flips horizontally. The element acts on the last two axes of a ``(..., H, W)``
    array; use :meth:`apply_hwc` for channel-last frames.
    """

    flip: int = 0
    rot: int = 0

    def __post_init__(self):
        object.__setattr__(self, "flip", int(self.flip) % 2)
        object.__setattr__(self, "rot", int(self.rot) % 4)

    @classmethod
    def all(cls) -> list["Dihedral8"]:
        return [cls(f, r) for f in (0, 1) for r in range(4)]

    @classmethod
    def from_name(cls, name: str) -> "Dihedral8":
        try:
            i = _NAMES.index(name)
        except ValueError:
            raise EnsembleError(f"unknown transform {name!r}") from None
        return cls(i // 4, i % 4)

    @property
    def name(self) -> str:
        return _NAMES[4 * self.flip + self.rot]

    def __matmul__(self, other: "Dihedral8") -> "Dihedral8":
        """Composition: ``(a @ b)(x) == a(b(x))``.

        Uses ``r h = h r^-1``: ``h^f1 r^k1 h^f2 r^k2 = h^(f1+f2) r^(k2 + (-1)^f2 k1)``.
        """
        sign = -1 if other.flip else 1
        return Dihedral8(self.flip + other.flip, other.rot + sign * self.rot)

    def inverse(self) -> "Dihedral8":
        # h r^k is an involution; r^k inverts to r^-k
        return self if self.flip else Dihedral8(0, -self.rot)

    def apply(self, x, axes=(-2, -1)):
        """Apply to a numpy array or torch tensor along the given (H, W) axes."""
        ha, wa = axes
        if hasattr(x, "rot90") and not isinstance(x, np.ndarray):
            y = x.rot90(self.rot, dims=(ha, wa)) if self.rot else x
            return y.flip(wa) if self.flip else y
        y = np.rot90(x, self.rot, axes=(ha, wa)) if self.rot else x
        return np.flip(y, axis=wa) if self.flip else y

    def apply_hwc(self, x):
        return self.apply(x, axes=(-3, -2))

    def __call__(self, x):
        return self.apply(x)


def _pairwise_mean(arrays) -> np.ndarray:
    """Float64 mean using a balanced pairwise reduction."""
    arrs = [np.asarray(a, dtype=np.float64) for a in arrays]
    count = len(arrs)
    while len(arrs) > 1:
        nxt = [arrs[i] + arrs[i + 1] for i in range(0, len(arrs) - 1, 2)]
        if len(arrs) % 2:
            nxt.append(arrs[-1])
        arrs = nxt
    return arrs[0] / count


def self_ensemble(fn, frames: np.ndarray, transforms=None) -> np.ndarray:
    """Average ``fn`` over symmetric views of channel-last frames.

    Args:
        fn: maps an ``(..., H, W, 3)`` array to an array of the same layout.
            Rotations swap H and W, so ``fn`` must accept both orientations.
        frames: ``(..., H, W, 3)`` float array.
        transforms: subset of :meth:`Dihedral8.all`; default all eight.

    Returns:
        float32 array, the mean of ``g^-1(fn(g(frames)))``.
    """
    transforms = list(Dihedral8.all() if transforms is None else transforms)
    # canonical order makes the merged result independent of list order
    transforms.sort(key=lambda g: 4 * g.flip + g.rot)
    if not transforms:
        raise EnsembleError("need at least one transform")
    frames = np.asarray(frames, dtype=np.float32)
    outs = []
    for g in transforms:
        y = np.asarray(fn(np.ascontiguousarray(g.apply_hwc(frames))))
        back = g.inverse().apply_hwc(y)
        if back.shape != frames.shape:
            raise EnsembleError(f"transform {g.name}: output shape {back.shape} != input {frames.shape}")
        outs.append(back)
    return _pairwise_mean(outs).astype(np.float32)


class CountingModel:
    """Wraps a callable and counts forward evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.fn(*args, **kwargs)


def model_ensemble(fns, frames: np.ndarray, tta: bool = True, transforms=None) -> np.ndarray:
    """Average several models, each optionally self-ensembled.

    With ``tta`` every model is run over ``transforms`` (default all 8 views),
    for ``8 * len(fns)`` forwards.
    """
    fns = list(fns)
    if not fns:
        raise EnsembleError("model_ensemble needs at least one model")
    if tta:
        outs = [self_ensemble(f, frames, transforms) for f in fns]
    else:
        outs = [np.asarray(f(np.asarray(frames, dtype=np.float32)), dtype=np.float32) for f in fns]
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise EnsembleError(f"models disagree on output shape: {shapes}")
    return _pairwise_mean(outs).astype(np.float32)


def cascade_infer(
    lq_frames: np.ndarray,
    labels,
    stage1_models,
    stage2_models=(),
    tta: str = "both",
) -> np.ndarray:
    """Run Stage-I ensemble, then Stage-II ensemble, clamping to [0, 1].

    Args:
        lq_frames: ``(N, H, W, 3)`` compressed frames.
        labels: PQF labels of the sequence.
        stage1_models / stage2_models: lists of ``Stage1Net`` / ``Stage2Net``.
        tta: ``none``, ``stage1``, ``stage2`` or ``both``.
    """
    from .stage1net import enhance_frames
    from .stage2net import refine_frame

    if tta not in ("none", "stage1", "stage2", "both"):
        raise EnsembleError(f"unknown tta mode {tta!r}")
    if not stage1_models:
        raise EnsembleError("cascade needs at least one Stage-I model")
    s1 = [lambda x, m=m: enhance_frames(m, x, labels) for m in stage1_models]
    out = model_ensemble(s1, lq_frames, tta=tta in ("stage1", "both"))
    out = np.clip(out, 0.0, 1.0)
    if stage2_models:
        s2 = [lambda x, m=m: refine_frame(x, m) for m in stage2_models]
        out = np.clip(model_ensemble(s2, out, tta=tta in ("stage2", "both")), 0.0, 1.0)
    return out
