"""Independent reference implementations used to check the package.

None of these import the code under test; they follow the textbook
definitions as literally as possible, trading speed for obviousness.
"""

import math

import numpy as np
from PIL import Image


def pil_bicubic(frame, size):
    """Resize ``H x W x C`` float frame to ``size=(H', W')`` with Pillow's bicubic filter."""
    frame = np.asarray(frame, dtype=np.float32)
    oh, ow = size
    chans = []
    for c in range(frame.shape[2]):
        im = Image.fromarray(frame[..., c], mode="F")
        chans.append(np.asarray(im.resize((ow, oh), Image.Resampling.BICUBIC), dtype=np.float64))
    return np.stack(chans, axis=-1)


def loop_warp(features, flow):
    """Bilinear backward warp ``out[c, y, x] = f[c, y + dy, x + dx]`` with the
    sample position clamped to the image, by explicit loops."""
    c, h, w = features.shape
    out = np.zeros_like(features, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sy = min(max(y + flow[0, y, x], 0.0), h - 1.0)
            sx = min(max(x + flow[1, y, x], 0.0), w - 1.0)
            y0 = min(int(math.floor(sy)), max(h - 2, 0))
            x0 = min(int(math.floor(sx)), max(w - 2, 0))
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            ay, ax = sy - y0, sx - x0
            out[:, y, x] = (
                features[:, y0, x0] * (1 - ay) * (1 - ax)
                + features[:, y0, x1] * (1 - ay) * ax
                + features[:, y1, x0] * ay * (1 - ax)
                + features[:, y1, x1] * ay * ax
            )
    return out


def brute_local_maxima(values):
    """Strict local maxima using -inf sentinels at both ends; if nothing
    qualifies the first global maximum is chosen."""
    padded = [-math.inf, *values, -math.inf]
    flags = [padded[i] > padded[i - 1] and padded[i] > padded[i + 1] for i in range(1, len(padded) - 1)]
    if not any(flags):
        best = max(values)
        flags[values.index(best)] = True
    return flags


def brute_sources(t, labels, n, use_pqf=True):
    """Source slots (prev, next, prev_pqf, next_pqf) by linear scans."""
    prev = t - 1 if t - 1 >= 0 else None
    nxt = t + 1 if t + 1 <= n - 1 else None
    pp = npf = None
    if use_pqf:
        earlier = [i for i in range(n) if i < t and labels[i]]
        later = [i for i in range(n) if i > t and labels[i]]
        pp = max(earlier) if earlier else None
        npf = min(later) if later else None
        if pp is not None and pp == prev:
            pp = None
        if npf is not None and npf == nxt:
            npf = None
    return (prev, nxt, pp, npf)


def psnr_ref(a, b, peak=1.0):
    err = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return 100.0 if err == 0 else min(100.0, 10 * math.log10(peak**2 / err))


def charbonnier_ref(pred, gt, eps=1e-3):
    d = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    return float(np.mean(np.sqrt(d * d + eps * eps)))


def cosine_warmup_ref(lr0, eta_min, period, warmup_fraction, t):
    """Schedule value by its piecewise definition (warmup repeated each period)."""
    u = t % period
    wt = warmup_fraction * period
    if u < wt:
        return lr0 * (u + 1) / wt
    frac = (u - wt) / (period - wt)
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * frac))


def block_dct_matrix(n=8):
    """Orthonormal DCT-II basis as an explicit matrix."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def central_difference(fn, x, idx, h=1e-6):
    """d fn / d x[idx] by central differences, ``x`` a float64 numpy array."""
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (fn(xp) - fn(xm)) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
