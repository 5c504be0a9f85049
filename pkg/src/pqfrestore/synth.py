"""Procedural raw videos for toy-scale experiments.

Each sequence is an analytic colour texture (gratings, soft discs and
rectangles) panned by a constant sub-pixel camera motion, with an optional
independently moving foreground disc. Because the texture is evaluated in
continuous coordinates, motion is exact and rendering is deterministic.
"""

from __future__ import annotations

import numpy as np

from .videodata import VideoSequence, from_uint8, to_uint8


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Scene:
    def __init__(self, rng: np.random.Generator, size: int):
        self.size = size
        self.bg = rng.uniform(0.15, 0.85, 3)
        n_grat = int(rng.integers(2, 5))
        self.gratings = []
        for _ in range(n_grat):
            freq = rng.uniform(0.02, 0.12)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.04, 0.14) * rng.choice([-1, 1], 3)
            self.gratings.append((freq * np.cos(theta), freq * np.sin(theta), phase, amp))
        self.shapes = []
        for _ in range(int(rng.integers(4, 9))):
            kind = rng.choice(["disc", "rect"])
            cy, cx = rng.uniform(-0.2 * size, 1.2 * size, 2)
            r = rng.uniform(0.06, 0.25) * size
            colour = rng.uniform(0, 1, 3)
            sharp = rng.uniform(1.0, 4.0)
            self.shapes.append((kind, cy, cx, r, colour, sharp))
        self.velocity = rng.uniform(-1.5, 1.5, 2)
        self.fg = None
        if rng.random() < 0.5:
            self.fg = (
                rng.uniform(0.3, 0.7, 2) * size,
                rng.uniform(0.08, 0.15) * size,
                rng.uniform(0, 1, 3),
                rng.uniform(-2.0, 2.0, 2),
            )

    def render(self, t: float) -> np.ndarray:
        n = self.size
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        y = yy + self.velocity[0] * t
        x = xx + self.velocity[1] * t
        img = np.broadcast_to(self.bg, (n, n, 3)).copy()
        for fy, fx, phase, amp in self.gratings:
            img += np.sin(2 * np.pi * (fy * y + fx * x) + phase)[..., None] * amp
        for kind, cy, cx, r, colour, sharp in self.shapes:
            if kind == "disc":
                d = r - np.hypot(y - cy, x - cx)
            else:
                d = r - np.maximum(np.abs(y - cy), np.abs(x - cx))
            alpha = _sigmoid(sharp * d)[..., None]
            img = img * (1 - alpha) + colour * alpha
        if self.fg is not None:
            (cy, cx), r, colour, vel = self.fg
            d = r - np.hypot(yy - (cy + vel[0] * t), xx - (cx + vel[1] * t))
            alpha = _sigmoid(3.0 * d)[..., None]
            img = img * (1 - alpha) + colour * alpha
        return np.clip(img, 0.0, 1.0)


def synth_sequence(seq_id: str, size: int = 64, n_frames: int = 24, seed: int = 0, repeat_prob: float = 0.0) -> VideoSequence:
    """Render one raw clip quantised to 8 bits.

    Args:
        repeat_prob: probability that a frame is an exact repeat of the
            previous one (simulates frame-rate conversion duplicates).
    """
    rng = np.random.default_rng(seed)
    scene = _Scene(rng, size)
    frames = []
    t = 0.0
    for i in range(n_frames):
        if i > 0 and rng.random() < repeat_prob:
            frames.append(frames[-1])
            continue
        frames.append(to_uint8(scene.render(t)))
        t += 1.0
    return VideoSequence(seq_id, from_uint8(np.stack(frames)))


def synth_dataset(n_sequences: int = 32, size: int = 64, n_frames: int = 24, seed: int = 0, repeat_prob: float = 0.0):
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_sequences)]
    return [synth_sequence(f"{i:03d}", size, n_frames, s, repeat_prob) for i, s in enumerate(seeds)]
