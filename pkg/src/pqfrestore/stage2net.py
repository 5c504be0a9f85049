"""Stage-II single-frame refiner built from shifted-window attention blocks.

The output conv is zero-initialised and its result is added to the input
frame, so an untrained refiner is exactly the identity and cascading it
behind Stage I cannot change any metric until it has been trained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .errors import ArgumentError, ConfigError, NumericsError, TransferError
from .stage1net import to_numpy, to_tensor

log = logging.getLogger(__name__)

MASK_VALUE = -100.0


@dataclass(frozen=True)
class StageIIConfig:
    embed_dim: int = 32
    window_size: int = 8
    depths: tuple = (2, 2)
    heads: tuple = (2, 2)
    mlp_ratio: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads must have the same length")
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if any(self.embed_dim % h for h in self.heads):
            raise ConfigError("every head count must divide embed_dim")

    def to_dict(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ------------------------------------------------------------- windowing


def window_partition(x: torch.Tensor, w: int, shift: int = 0) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B * M, C, w, w)`` after a cyclic shift by ``-shift``."""
    b, c, h, wd = x.shape
    if h % w or wd % w:
        raise ArgumentError(f"size {h}x{wd} is not a multiple of window {w}")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(2, 3))
    x = x.view(b, c, h // w, w, wd // w, w)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(-1, c, w, w)


def window_reverse(windows: torch.Tensor, w: int, h: int, wd: int, shift: int = 0) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, c, w, w).permute(0, 3, 1, 4, 2, 5).reshape(b, c, h, wd)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(2, 3))
    return x


def relative_position_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


def shifted_window_mask(h: int, wd: int, w: int, shift: int) -> torch.Tensor:
    """``(M, w*w, w*w)`` additive mask blocking attention across the
    regions that a cyclic shift glues together."""
    region = torch.zeros(1, 1, h, wd)
    cnt = 0
    bounds = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in bounds:
        for ws in bounds:
            region[:, :, hs, ws] = cnt
            cnt += 1
    win = window_partition(region, w).reshape(-1, w * w)
    diff = win[:, None, :] - win[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, MASK_VALUE)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window with relative position bias."""

    def __init__(self, dim, window_size, heads):
        super().__init__()
        if dim % heads:
            raise ArgumentError(f"{heads} heads do not divide {dim} channels")
        self.dim = dim
        self.window_size = window_size
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)

    def forward(self, x, mask=None, return_attn=False):
        """
        Args:
            x: ``(B * M, N, C)`` tokens, ``N = w * w``.
            mask: ``(M, N, N)`` additive mask or None.
        """
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        logits = logits + bias.view(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            m = mask.shape[0]
            logits = logits.view(bw // m, m, self.heads, n, n) + mask.unsqueeze(1).unsqueeze(0).to(logits)
            logits = logits.view(bw, self.heads, n, n)
        if not torch.isfinite(logits.detach()).all():
            raise NumericsError("non-finite attention logits")
        attn = logits.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(bw, n, c))
        return (out, attn) if return_attn else out


def window_attention(windows: torch.Tensor, attn: WindowAttention, mask=None, return_attn=False):
    """Apply ``attn`` to ``(B * M, C, w, w)`` windows, returning the same layout."""
    bw, c, w, _ = windows.shape
    tokens = windows.flatten(2).transpose(1, 2)
    res = attn(tokens, mask, return_attn)
    out, a = res if return_attn else (res, None)
    out = out.transpose(1, 2).reshape(bw, c, w, w)
    return (out, a) if return_attn else out


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window_size, shift, mlp_ratio):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._masks = {}

    def _mask(self, h, w, device):
        key = (h, w, str(device))
        if key not in self._masks:
            self._masks[key] = shifted_window_mask(h, w, self.window_size, self.shift).to(device)
        return self._masks[key]

    def forward(self, x):
        """``x``: ``(B, C, H, W)`` with H, W multiples of the window size."""
        b, c, h, w = x.shape
        ws = self.window_size
        shift = self.shift if min(h, w) > ws else 0
        y = self.norm1(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        mask = self._mask(h, w, x.device) if shift else None
        y = window_partition(y, ws, shift)
        y = window_attention(y, self.attn, mask)
        x = x + window_reverse(y, ws, h, w, shift)
        t = x.permute(0, 2, 3, 1)
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class ResidualSwinGroup(nn.Module):
    def __init__(self, dim, depth, heads, window_size, mlp_ratio):
        super().__init__()
        self.blocks = nn.Sequential(
            *(SwinBlock(dim, heads, window_size, 0 if i % 2 == 0 else window_size // 2, mlp_ratio) for i in range(depth))
        )
        self.conv = nn.Conv2d(dim, dim, 3, 1, 1)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


class Stage2Net(nn.Module):
    def __init__(self, cfg: StageIIConfig = StageIIConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Conv2d(3, d, 3, 1, 1)
        self.layers = nn.ModuleList(
            ResidualSwinGroup(d, depth, heads, cfg.window_size, cfg.mlp_ratio) for depth, heads in zip(cfg.depths, cfg.heads)
        )
        self.body_conv = nn.Conv2d(d, d, 3, 1, 1)
        self.head = nn.Conv2d(d, 3, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Refine ``(B, 3, H, W)`` frames of arbitrary size."""
        h, w = x.shape[-2:]
        ws = self.cfg.window_size
        ph, pw = (-h) % ws, (-w) % ws
        xp = x
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            xp = F.pad(x, (0, pw, 0, ph), mode=mode)
        feat = self.embed(xp)
        body = feat
        for layer in self.layers:
            body = layer(body)
        body = self.body_conv(body) + feat
        out = self.head(body) + xp
        return out[..., :h, :w]


def refine_frame(frame: np.ndarray, model: Stage2Net) -> np.ndarray:
    """Refine one ``H x W x 3`` frame (or an ``N x H x W x 3`` stack frame by frame)."""
    param = next(model.parameters())
    x = to_tensor(frame).to(param)
    single = x.dim() == 3
    with torch.no_grad():
        out = model(x.unsqueeze(0) if single else x)
    out = to_numpy(out)
    return out[0] if single else out


def refine_sequence(seq, model: Stage2Net, batch: int = 8):
    from .videodata import VideoSequence

    frames = np.concatenate([refine_frame(seq.frames[i : i + batch], model) for i in range(0, len(seq), batch)])
    frames = np.clip(frames, 0.0, 1.0)
    return VideoSequence(seq.id, frames, seq.fps, seq.pqf_labels)


# ---------------------------------------------------------- transfer init


def init_from_pretrained(ckpt: Checkpoint, cfg: StageIIConfig, strict: bool = True, seed: int | None = None):
    """Copy pretrained weights into a fresh refiner parameter set.

    Returns:
        ``(params, unmatched)`` where ``unmatched`` lists the target names
        that were freshly initialised (always empty in strict mode).
    """
    if seed is not None:
        torch.manual_seed(seed)
    fresh = {k: v.numpy().copy() for k, v in Stage2Net(cfg).state_dict().items()}
    src = ckpt.params
    bad_shape = sorted(n for n in fresh if n in src and tuple(src[n].shape) != tuple(fresh[n].shape))
    absent = sorted(n for n in fresh if n not in src)
    extra = sorted(n for n in src if n not in fresh)
    if strict and (bad_shape or absent or extra):
        raise TransferError(f"strict load failed: shape={bad_shape} missing={absent} unexpected={extra}")
    unmatched = sorted(bad_shape + absent)
    out = dict(fresh)
    for name in fresh:
        if name in src and name not in bad_shape:
            out[name] = np.array(src[name], dtype=np.float32, copy=True)
    return out, unmatched


def build_refiner(cfg: StageIIConfig, params: dict | None = None, seed: int | None = None) -> Stage2Net:
    if seed is not None:
        torch.manual_seed(seed)
    model = Stage2Net(cfg)
    if params is not None:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    return model


# ----------------------------------------------------------------- training


@dataclass
class RefinerFit:
    """History of one refiner training run."""

    history: list = field(default_factory=list)  # (iteration, val_loss, val_psnr)
    best: tuple = (-math.inf, -1)  # (val_psnr, iteration)
    best_params: dict | None = None
    hit_iteration: int | None = None


def _frame_pool(inputs, targets):
    ins = np.concatenate([np.asarray(a, dtype=np.float32) for a in inputs])
    tgs = np.concatenate([np.asarray(a, dtype=np.float32) for a in targets])
    if ins.shape != tgs.shape:
        raise ArgumentError(f"input pool {ins.shape} and target pool {tgs.shape} differ")
    return ins, tgs


def _crop_batch(ins, tgs, patch, batch, rng, noise_sigma=0.0):
    n, h, w, _ = ins.shape
    p = min(patch, h, w)
    xs, ys = [], []
    for _ in range(batch):
        i = int(rng.integers(n))
        y = int(rng.integers(h - p + 1))
        x = int(rng.integers(w - p + 1))
        a = ins[i, y : y + p, x : x + p]
        if noise_sigma:
            a = a + rng.normal(0.0, noise_sigma, a.shape).astype(np.float32)
        xs.append(a)
        ys.append(tgs[i, y : y + p, x : x + p])
    return to_tensor(np.stack(xs)), to_tensor(np.stack(ys))


def evaluate_refiner(model: Stage2Net, inputs: np.ndarray, targets: np.ndarray, loss_fn=None, batch: int = 16):
    """Return ``(mean loss, mean per-frame PSNR)`` of clamped outputs."""
    from .evalreport import psnr

    model.eval()
    losses, scores = [], []
    with torch.no_grad():
        for i in range(0, len(inputs), batch):
            x = to_tensor(inputs[i : i + batch])
            y = to_tensor(targets[i : i + batch])
            out = model(x.to(next(model.parameters()))).cpu()
            if loss_fn is not None:
                losses.append(float(loss_fn(out, y)) * len(x))
            o = to_numpy(out.clamp(0, 1))
            scores.extend(psnr(a, b) for a, b in zip(o, targets[i : i + batch]))
    model.train()
    loss = sum(losses) / len(inputs) if loss_fn is not None else float("nan")
    return loss, float(np.mean(scores))


def fit_refiner(
    model: Stage2Net,
    train_inputs,
    train_targets,
    iterations: int,
    lr: float,
    loss: str = "charbonnier",
    val=None,
    eval_every: int = 0,
    patch: int = 32,
    batch: int = 8,
    seed: int = 0,
    noise_sigma: float = 0.0,
    stop_below: float | None = None,
    betas=(0.9, 0.99),
    metrics=None,
    phase_name: str = "",
) -> RefinerFit:
    """Adam training loop shared by denoiser pretraining and Stage-II fine-tuning.

    Args:
        val: optional ``(inputs, targets)`` arrays; evaluated at iteration 0
            and every ``eval_every`` iterations, tracking the best PSNR.
        noise_sigma: Gaussian noise added on the fly to inputs (denoising).
        stop_below: stop as soon as the validation loss falls below it;
            ``RefinerFit.hit_iteration`` records when.
    """
    from .progtrain import LOSSES

    loss_fn = LOSSES[loss]
    ins, tgs = _frame_pool(train_inputs, train_targets)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=lr, betas=tuple(betas))
    fit = RefinerFit()

    def check(it):
        vloss, vpsnr = evaluate_refiner(model, val[0], val[1], loss_fn)
        fit.history.append((it, vloss, vpsnr))
        if metrics is not None:
            metrics.append(iteration=it, phase=phase_name, lr=lr, loss=vloss, val_psnr=vpsnr)
        if vpsnr > fit.best[0]:
            fit.best = (vpsnr, it)
            fit.best_params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        if stop_below is not None and vloss < stop_below and fit.hit_iteration is None:
            fit.hit_iteration = it
            return True
        return False

    if val is not None and check(0):
        return fit
    model.train()
    for it in range(1, iterations + 1):
        x, y = _crop_batch(ins, tgs, patch, batch, rng, noise_sigma)
        p = next(model.parameters())
        out = model(x.to(p))
        value = loss_fn(out, y.to(p))
        if not torch.isfinite(value):
            raise NumericsError(f"non-finite {loss} loss at iteration {it}", stage=phase_name)
        optim.zero_grad(set_to_none=True)
        value.backward()
        optim.step()
        if val is not None and eval_every and it % eval_every == 0:
            if check(it):
                break
    return fit


def pretrain_denoiser(
    cfg: StageIIConfig,
    noise_sigma: float,
    clean_frames: np.ndarray,
    budget: int,
    seed: int = 0,
    lr: float = 2e-4,
    patch: int = 32,
    batch: int = 8,
) -> Checkpoint:
    """Train the refiner to remove additive Gaussian noise from clean frames."""
    if budget < 0:
        raise ArgumentError("budget must be >= 0")
    torch.manual_seed(seed)
    model = Stage2Net(cfg)
    if budget > 0:
        clean = np.asarray(clean_frames, dtype=np.float32)
        fit_refiner(model, [clean], [clean], budget, lr, "charbonnier", patch=patch, batch=batch, seed=seed, noise_sigma=noise_sigma)
    return Checkpoint.from_module("denoiser", cfg.to_dict(), model, {"noise_sigma": noise_sigma, "budget": budget, "seed": seed})


@dataclass
class Stage2Options:
    budget_a: int = 200
    budget_b: int = 20
    lr_a: float = 2e-4
    lr_b: float = 1e-6
    sample_every: int = 8
    patch: int = 32
    batch: int = 8
    eval_every: int = 50
    seed: int = 0
    t_len: int = 7
    joint_batch: int = 1
    freeze_stage1: bool = False


@dataclass
class Stage2Result:
    checkpoint: Checkpoint
    stage1_checkpoint: Checkpoint | None
    fit_a: RefinerFit
    history_b: list
    frames_used: int


def sampled_frames(sequences, k: int):
    """Every k-th frame of every sequence, stacked."""
    from .videodata import sample_every_k

    return np.stack([f for s in sequences for _, f in sample_every_k(s, k)])


def train_stage2(
    stage1_train,
    gt_train,
    stage1_val,
    gt_val,
    cfg: StageIIConfig,
    init_params: dict | None,
    opts: Stage2Options = Stage2Options(),
    joint=None,
    metrics=None,
) -> Stage2Result:
    """Fine-tune the refiner on Stage-I outputs, then optionally both stages jointly.

    Args:
        stage1_train / gt_train: VideoSequences of Stage-I outputs and their
            ground truth; every ``opts.sample_every``-th frame is used.
        stage1_val / gt_val: validation sequences, all frames.
        init_params: refiner parameters (e.g. from ``init_from_pretrained``)
            or None for a fresh init.
        joint: optional ``(stage1_model, lq_train_pairs, lq_val_pairs)``
            enabling the joint MSE fine-tune of both stages.
    """
    model = build_refiner(cfg, init_params, seed=opts.seed)
    tin = sampled_frames(stage1_train, opts.sample_every)
    ttg = sampled_frames(gt_train, opts.sample_every)
    vin = np.concatenate([s.frames for s in stage1_val])
    vtg = np.concatenate([s.frames for s in gt_val])
    fit = fit_refiner(
        model, [tin], [ttg], opts.budget_a, opts.lr_a, "charbonnier", val=(vin, vtg),
        eval_every=opts.eval_every, patch=opts.patch, batch=opts.batch, seed=opts.seed,
        metrics=metrics, phase_name="stage2a",
    )
    if fit.best_params is not None:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in fit.best_params.items()})
    log.info("stage2 (a): best val %.4f dB at iteration %d", *fit.best)

    s1_ckpt = None
    history_b = []
    if joint is not None and opts.budget_b > 0:
        s1_model, lq_train, lq_val = joint
        s1_ckpt, history_b = _joint_finetune(s1_model, model, lq_train, lq_val, opts, metrics)
    ckpt = Checkpoint.from_module("stage2", cfg.to_dict(), model, {"best_val_a": fit.best[0]})
    return Stage2Result(ckpt, s1_ckpt, fit, history_b, len(tin))


def cascade_psnr(s1_model, s2_model, lq_val) -> float:
    from .evalreport import psnr
    from .stage1net import enhance_frames

    scores = []
    for lq, gt in lq_val:
        mid = np.clip(enhance_frames(s1_model, lq.frames, lq.pqf_labels), 0, 1)
        out = np.clip(refine_frame(mid, s2_model), 0, 1)
        scores.append(np.mean([psnr(a, b) for a, b in zip(out, gt.frames)]))
    return float(np.mean(scores))


def _joint_finetune(s1_model, s2_model, lq_train, lq_val, opts: Stage2Options, metrics):
    from .progtrain import TrainOptions, make_batch, mse

    rng = np.random.default_rng([opts.seed, 2])
    s1_model.requires_grad_(not opts.freeze_stage1)
    params = [p for p in list(s1_model.parameters()) + list(s2_model.parameters()) if p.requires_grad]
    optim = torch.optim.Adam(params, lr=opts.lr_b, betas=(0.9, 0.99))
    bopts = TrainOptions(batch_size=opts.joint_batch, patch_size=opts.patch, t_len=opts.t_len)
    snapshot = lambda: (
        {k: v.detach().clone() for k, v in s1_model.state_dict().items()},
        {k: v.detach().clone() for k, v in s2_model.state_dict().items()},
    )
    best = (cascade_psnr(s1_model, s2_model, lq_val), 0)
    best_state = snapshot()
    history = [(0, best[0])]
    s1_model.train()
    s2_model.train()
    for it in range(1, opts.budget_b + 1):
        lq, gt, labels = make_batch(lq_train, bopts, rng)
        mid = s1_model(lq, labels)
        b, n = mid.shape[:2]
        out = s2_model(mid.reshape(b * n, *mid.shape[2:]))
        loss = mse(out, gt.reshape(b * n, *gt.shape[2:]))
        if not torch.isfinite(loss):
            raise NumericsError(f"non-finite joint loss at iteration {it}", stage="stage2b")
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        if it % max(1, opts.eval_every) == 0 or it == opts.budget_b:
            score = cascade_psnr(s1_model, s2_model, lq_val)
            history.append((it, score))
            if metrics is not None:
                metrics.append(iteration=it, phase="stage2b", lr=opts.lr_b, loss=loss.item(), val_psnr=score)
            if score > best[0]:
                best = (score, it)
                best_state = snapshot()
    s1_model.load_state_dict(best_state[0])
    s2_model.load_state_dict(best_state[1])
    s1_model.requires_grad_(True)
    s1_model.eval()
    s2_model.eval()
    s1_ckpt = Checkpoint.from_module("stage1", s1_model.cfg.to_dict(), s1_model, {"joint_best_val": best[0]})
    return s1_ckpt, history
