"""Progressive Stage-I training.

The reconstruction trunk grows by one residual group per phase. Each phase
starts from the previous phase's final weights; the new group's residual
branches are zero at creation, so the grown network computes exactly what
the smaller one did and training resumes from the previous optimum.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, component_of
from .errors import ArgumentError, ConfigError, NumericsError, TransferError
from .stage1net import Stage1Net, StageIConfig, to_tensor
from .videodata import make_patches

log = logging.getLogger(__name__)

FULL_PHASE_ITERS = 300_000
FULL_FINETUNE_ITERS = 100_000
FULL_LR = 2e-5
TOY_LR = 5e-4  # from-scratch training at toy budgets needs a bigger step
FULL_WARMUP = 0.1
ETA_MIN = 1e-7
CHARBONNIER_EPS = 1e-3
ADAM_BETAS = (0.9, 0.99)
SHARED_COMPONENTS = ("E", "flow", "P", "S", "R")


# ------------------------------------------------------------------ losses


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")


def charbonnier(pred, gt, eps: float = CHARBONNIER_EPS):
    """Mean of ``sqrt(d**2 + eps**2)``.

    Evaluated as ``eps + mean(d**2 / (sqrt(d**2 + eps**2) + eps))``, which is
    the same quantity without cancellation and exactly ``eps`` when
    ``pred == gt``.
    """
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    _check_shapes(pred, gt)
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    d2 = (pred - gt) ** 2
    return eps + torch.mean(d2 / (torch.sqrt(d2 + eps * eps) + eps))


def mse(pred, gt):
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    _check_shapes(pred, gt)
    return torch.mean((pred - gt) ** 2)


LOSSES = {"charbonnier": charbonnier, "mse": mse}


# -------------------------------------------------------------- schedules


@dataclass(frozen=True)
class LRSchedule:
    lr0: float = FULL_LR
    eta_min: float = ETA_MIN
    period: int = FULL_PHASE_ITERS
    warmup_fraction: float = FULL_WARMUP
    warmup_every_restart: bool = True

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.lr0:
            raise ArgumentError("need 0 <= eta_min <= lr0")
        if not 0 <= self.warmup_fraction < 1:
            raise ArgumentError("warmup_fraction must lie in [0, 1)")


def lr_at(s: LRSchedule, t: int) -> float:
    """Linear warmup then cosine decay, restarting every ``period`` steps."""
    if s.period <= 0:
        raise ArgumentError(f"period must be positive, got {s.period}")
    if t < 0:
        raise ArgumentError("t must be >= 0")
    T = s.period
    u = t % T
    wT = s.warmup_fraction * T
    in_warmup = u < wT and (s.warmup_every_restart or t < T)
    if in_warmup:
        return s.lr0 * (u + 1) / wT
    start = wT if (s.warmup_every_restart or t < T) else 0.0
    c = 0.5 * (1.0 + math.cos(math.pi * (u - start) / (T - start)))
    return s.lr0 * c + s.eta_min * (1.0 - c)


@dataclass(frozen=True)
class Phase:
    k: int
    iterations: int
    loss: str = "charbonnier"
    lr0: float = FULL_LR
    warmup_fraction: float = FULL_WARMUP
    period: int = FULL_PHASE_ITERS
    eta_min: float = ETA_MIN

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr0, self.eta_min, self.period, self.warmup_fraction)


@dataclass
class PhasePlan:
    phases: list[Phase]

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.phases:
            raise ConfigError("empty phase plan")
        last = self.phases[-1].k
        for i, ph in enumerate(self.phases):
            if ph.iterations < 1:
                raise ConfigError(f"phase {i + 1}: iterations must be >= 1")
            if not 0 <= ph.warmup_fraction < 1:
                raise ConfigError(f"phase {i + 1}: bad warmup_fraction")
            if ph.loss not in LOSSES:
                raise ConfigError(f"phase {i + 1}: unknown loss {ph.loss!r}")
            if i > 0:
                prev = self.phases[i - 1].k
                if ph.k == prev:
                    # only a trailing MSE fine-tune may repeat the final depth
                    if not (ph.k == last and ph.loss == "mse" and i == len(self.phases) - 1):
                        raise ConfigError(f"phase {i + 1}: k must grow until the final fine-tune")
                elif ph.k != prev + 1:
                    raise ConfigError(f"phase {i + 1}: k must grow by one group per phase")

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)

    def trunk_sizes(self, cfg: StageIConfig) -> list[int]:
        return [sum(cfg.rec_group_sizes[: p.k]) for p in self.phases]

    def to_dict(self):
        return {"phases": [asdict(p) for p in self.phases]}


def build_phase_plan(toy: bool = False, toy_divisor: int = 500, lr0: float | None = None, groups: int = 6) -> PhasePlan:
    """Six Charbonnier growth phases (k = 1..6) and a final MSE fine-tune.

    With ``toy=True`` every iteration budget and restart period is divided by
    ``toy_divisor``; ``lr0`` overrides the initial learning rate of all phases
    (default 2e-5, or 5e-4 in toy mode).
    """
    div = toy_divisor if toy else 1
    if div < 1:
        raise ArgumentError("toy_divisor must be >= 1")
    if lr0 is None:
        lr0 = TOY_LR if toy else FULL_LR
    it = max(1, FULL_PHASE_ITERS // div)
    ft = max(1, FULL_FINETUNE_ITERS // div)
    phases = [Phase(k, it, "charbonnier", lr0, FULL_WARMUP, it) for k in range(1, groups + 1)]
    phases.append(Phase(groups, ft, "mse", lr0, FULL_WARMUP, ft))
    return PhasePlan(phases)


# ---------------------------------------------------------------- transfer


def _check_compatible(prev_cfg: dict, cfg: StageIConfig):
    mine = cfg.to_dict()
    for key, value in prev_cfg.items():
        if key == "active_groups":
            continue
        if key in mine and mine[key] != value:
            raise TransferError(f"config field {key!r} differs: checkpoint {value!r}, target {mine[key]!r}")


def transfer_parameters(prev: Checkpoint, cfg: StageIConfig, baseline: bool = False, seed: int | None = None) -> dict:
    """Build the phase-k parameter set from a phase-(k-1) checkpoint.

    Copies E, P, S, R, the flow network and R1..R(k-1) verbatim; every
    group not present in ``prev`` is freshly initialised (zero residual
    branches). With ``baseline=True`` only the shared components are taken,
    which is how phase 1 is seeded from a baseline model.
    """
    _check_compatible(prev.config, cfg)
    comps = {component_of(n) for n in prev.params}
    wanted = list(SHARED_COMPONENTS)
    if not baseline:
        prev_k = int(prev.config.get("active_groups", 0))
        wanted += [f"R{i}" for i in range(1, min(prev_k, cfg.active_groups) + 1)]
        need = [f"R{i}" for i in range(1, cfg.active_groups)]
        missing = [c for c in need if c not in comps]
        if missing:
            raise TransferError(f"checkpoint lacks component(s) {missing}")
    missing = [c for c in wanted if c not in comps]
    if missing:
        raise TransferError(f"checkpoint lacks component(s) {missing}")
    if seed is not None:
        torch.manual_seed(seed)
    fresh = Stage1Net(cfg).state_dict()
    out = {k: v.numpy().copy() for k, v in fresh.items()}
    for name, value in prev.params.items():
        if component_of(name) not in wanted:
            continue
        if name not in out:
            raise TransferError(f"parameter {name!r} has no counterpart in target config")
        if tuple(out[name].shape) != tuple(value.shape):
            raise TransferError(f"parameter {name!r}: shape {value.shape} vs target {out[name].shape}")
        out[name] = np.array(value, dtype=np.float32, copy=True)
    return out


# ----------------------------------------------------------------- training


@dataclass
class TrainOptions:
    batch_size: int = 2
    patch_size: int = 64
    t_len: int = 7
    log_interval: int = 10
    val_interval: int = 0  # 0: validate only at phase boundaries
    charbonnier_eps: float = CHARBONNIER_EPS
    betas: tuple = ADAM_BETAS
    seed: int = 0
    device: str = "cpu"
    scale: int = 1
    augment: bool = True  # random dihedral transform and time reversal per clip


@dataclass
class TrainState:
    """Snapshot of the trainer at the end of a phase."""

    iteration: int
    params: dict
    moments: dict
    rng_state: dict
    best_validation: tuple = (-math.inf, -1)

    @classmethod
    def capture(cls, iteration, model, optim, rng, best):
        moments = {}
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optim.state.items():
            if "exp_avg" in st:
                moments[names[id(p)]] = (st["exp_avg"].detach().cpu().numpy(), st["exp_avg_sq"].detach().cpu().numpy())
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(iteration, params, moments, rng.bit_generator.state, best)


@dataclass
class PhaseResult:
    phase: int
    k: int
    loss: str
    initial_psnr: float
    final_psnr: float
    checkpoint: str


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    phases: list[PhaseResult]
    log_rows: list[dict] = field(default_factory=list)
    log_path: str | None = None
    state: TrainState | None = None

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


class MetricsLog:
    """Append-only CSV: iteration, phase, lr, loss, val_psnr."""

    FIELDS = ["iteration", "phase", "lr", "loss", "val_psnr"]

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.rows = []
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, self.FIELDS).writerow(
                    {k: ("" if row.get(k) is None else row[k]) for k in self.FIELDS}
                )


def configure_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _augment(lq, gt, labels, rng):
    from .ensemble import Dihedral8

    g = Dihedral8.all()[int(rng.integers(8))]
    lq, gt = g.apply_hwc(lq), g.apply_hwc(gt)
    if rng.random() < 0.5:
        lq, gt = lq[::-1], gt[::-1]
        labels = labels[::-1] if labels is not None else None
    return np.ascontiguousarray(lq), np.ascontiguousarray(gt), labels


def make_batch(pool, opts: TrainOptions, rng):
    lqs, gts, labels = [], [], []
    for _ in range(opts.batch_size):
        s = make_patches(pool, opts.patch_size, opts.t_len, rng, opts.scale)
        lq, gt, lab = s.lq.frames, s.gt.frames, s.lq.pqf_labels
        if opts.augment:
            lq, gt, lab = _augment(lq, gt, lab, rng)
        lqs.append(to_tensor(lq))
        gts.append(to_tensor(gt))
        labels.append(lab)
    return torch.stack(lqs), torch.stack(gts), labels


def validate_stage1(model: Stage1Net, val_pairs, device="cpu") -> float:
    """Mean over sequences of the per-frame PSNR of clamped outputs."""
    from .evalreport import psnr

    model.eval()
    scores = []
    with torch.no_grad():
        for lq, gt in val_pairs:
            out = model(to_tensor(lq.frames).to(device).unsqueeze(0), [lq.pqf_labels])[0]
            out = out.clamp(0, 1).cpu().numpy().transpose(0, 2, 3, 1)
            scores.append(np.mean([psnr(o, g) for o, g in zip(out, gt.frames)]))
    model.train()
    return float(np.mean(scores))


def _adam(model, lr, betas):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=1e-8, weight_decay=0.0)


def train_stage1(
    plan: PhasePlan,
    train_pairs,
    val_pairs,
    cfg: StageIConfig,
    opts: TrainOptions = TrainOptions(),
    out_dir=None,
    baseline: Checkpoint | None = None,
) -> TrainResult:
    """Run every phase of ``plan`` in order.

    Args:
        train_pairs / val_pairs: lists of ``(lq, gt)`` VideoSequence pairs;
            LQ sequences should carry PQF labels.
        cfg: architecture; ``active_groups`` is overridden per phase.
        out_dir: where checkpoints and ``stage1_metrics.csv`` go (None keeps
            everything in memory and writes no files).
        baseline: optional checkpoint whose shared components seed phase 1.
    """
    if not train_pairs:
        raise ArgumentError("no training data")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out_dir / "stage1_metrics.csv" if out_dir else None)
    configure_determinism(opts.seed)
    device = torch.device(opts.device)

    prev_ckpt = None
    state = None
    last_good = None
    checkpoints, results = [], []
    global_it = 0
    for pi, phase in enumerate(plan.phases):
        pcfg = cfg.with_groups(phase.k)
        seed = opts.seed * 1000 + pi
        if prev_ckpt is None:
            torch.manual_seed(seed)
            if baseline is not None:
                params = transfer_parameters(baseline, pcfg, baseline=True, seed=seed)
            else:
                params = {k: v.numpy() for k, v in Stage1Net(pcfg).state_dict().items()}
        else:
            params = transfer_parameters(prev_ckpt, pcfg, seed=seed)
        model = Stage1Net(pcfg)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
        model.to(device).train()
        schedule = phase.schedule()
        optim = _adam(model, schedule.lr0, opts.betas)
        loss_fn = LOSSES[phase.loss]
        rng = np.random.default_rng([opts.seed, pi])

        init_psnr = validate_stage1(model, val_pairs, device) if val_pairs else float("nan")
        log.info("phase %d (k=%d, %s): start val %.4f dB", pi + 1, phase.k, phase.loss, init_psnr)
        window = []
        for it in range(phase.iterations):
            lr = lr_at(schedule, it)
            for g in optim.param_groups:
                g["lr"] = lr
            lq, gt, labels = make_batch(train_pairs, opts, rng)
            out = model(lq.to(device), labels)
            if phase.loss == "charbonnier":
                loss = loss_fn(out, gt.to(device), opts.charbonnier_eps)
            else:
                loss = loss_fn(out, gt.to(device))
            if not torch.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at phase {pi + 1} iteration {it}", stage=f"phase{pi + 1}", last_good=last_good
                )
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            window.append(loss.item())
            global_it += 1
            if global_it % opts.log_interval == 0:
                val = None
                if val_pairs and opts.val_interval and (it + 1) % opts.val_interval == 0:
                    val = validate_stage1(model, val_pairs, device)
                metrics.append(iteration=global_it, phase=pi + 1, lr=lr, loss=float(np.mean(window)), val_psnr=val)
                window = []

        final_psnr = validate_stage1(model, val_pairs, device) if val_pairs else float("nan")
        log.info("phase %d: end val %.4f dB", pi + 1, final_psnr)
        ckpt = Checkpoint.from_module(
            "stage1",
            pcfg.to_dict(),
            model,
            {"phase": pi + 1, "iteration": global_it, "val_psnr": final_psnr, "loss": phase.loss},
        )
        path = None
        if out_dir is not None:
            path = str(ckpt.save(out_dir / f"stage1_phase{pi + 1}_k{phase.k}.ckpt"))
            last_good = path
        prev_ckpt = ckpt
        checkpoints.append(ckpt)
        results.append(PhaseResult(pi + 1, phase.k, phase.loss, init_psnr, final_psnr, path))
        state = TrainState.capture(global_it, model, optim, rng, (final_psnr, global_it))
    return TrainResult(checkpoints, results, metrics.rows, str(metrics.path) if metrics.path else None, state)
