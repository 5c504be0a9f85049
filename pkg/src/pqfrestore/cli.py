"""``pqfrestore`` command-line interface.

Every command reads one YAML config (``--config``), applies ``--set a.b=value``
overrides, writes under ``output_dir`` and drops a ``run_meta.json`` next to
its artifacts. Existing artifacts are never clobbered without ``--overwrite``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import RestorationError

log = logging.getLogger("pqfrestore")

DEVICE_ENV = "PQFRESTORE_DEVICE"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CommandError(RestorationError):
    """Actionable failure reported to the user with a nonzero exit code."""

    def __init__(self, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def _versions() -> dict:
    import scipy
    import torch

    return {
        "pqfrestore": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_run_meta(out_dir: Path, command: str, cfg: RunConfig, extra=None) -> Path:
    meta = {
        "command": command,
        "seed": cfg.seed,
        "toy_divisor": cfg.toy_divisor,
        "device": device(),
        "config": cfg.model_dump(mode="json"),
        "versions": _versions(),
        "argv": sys.argv[1:],
    }
    meta.update(extra or {})
    path = out_dir / f"run_meta_{command}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out_dir / f"config_{command}.yaml").write_text(dump_config(cfg))
    return path


def _claim(path: Path, overwrite: bool) -> Path:
    """Refuse to reuse an existing artifact path unless overwriting."""
    if path.exists() and not overwrite:
        raise CommandError(f"{path} already exists; pass --overwrite to replace it", EXIT_USAGE)
    return path


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {path}: {hint}")
    return path


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "data" / "manifest.json"


def _load_manifest(cfg):
    from .videodata import Manifest

    return Manifest.load(_require(_manifest_path(cfg), "run prepare-data first"))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ commands


def _raw_sequences(cfg: RunConfig):
    from .synth import synth_dataset
    from .videodata import load_sequence

    d = cfg.data
    if d.raw_dir is None:
        return synth_dataset(d.synth_sequences, d.synth_size, d.synth_frames, cfg.seed, d.repeat_prob)
    root = Path(d.raw_dir)
    if not root.is_dir():
        raise CommandError(f"raw_dir {root} is not a directory")
    seqs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            seqs.append(load_sequence(sub, d.pattern, seq_id=sub.name))
        except RestorationError as exc:
            raise CommandError(f"sequence {sub.name}: {exc}") from exc
    if not seqs:
        raise CommandError(f"no sequence folders under {root}")
    return seqs


def validation_indices(n: int, n_val: int, seed: int) -> list[int]:
    """Seeded choice of ``n_val`` validation sequences out of ``n``."""
    if not 0 < n_val < n:
        raise CommandError(f"need 0 < val_sequences < {n}, got {n_val}")
    return sorted(int(i) for i in np.random.default_rng(seed).permutation(n)[:n_val])


def cmd_prepare_data(cfg: RunConfig, overwrite=False):
    from .videodata import (
        Manifest,
        ManifestEntry,
        degrade,
        duplicate_keep_indices,
        label_pqfs,
        remove_duplicates,
        save_sequence,
    )

    data_dir = Path(cfg.output_dir) / "data"
    _claim(data_dir / "manifest.json", overwrite)
    data_dir.mkdir(parents=True, exist_ok=True)
    profile = cfg.degradation_profile()
    raws = _raw_sequences(cfg)
    val = set(validation_indices(len(raws), cfg.data.val_sequences, cfg.seed))
    source = cfg.data.pqf_labels
    if source == "auto":
        source = "profile" if cfg.degradation.mode == "surrogate-codec" else "psnr"
    entries = []
    removed = 0
    for i, gt in enumerate(raws):
        lq = degrade(gt, profile)
        keep = duplicate_keep_indices(lq)
        lq2, gt2 = remove_duplicates(lq, gt)
        removed += len(lq) - len(lq2)
        labels = None
        if source == "profile":
            full = label_pqfs(lq, profile=profile)
            labels = [full[k] for k in keep]
        if not labels or not any(labels):
            # psnr mode, or every GOP anchor was dropped as a duplicate
            labels = label_pqfs(lq2, gt2)
        save_sequence(lq2, data_dir / "lq" / gt.id, cfg.data.pattern)
        save_sequence(gt2, data_dir / "gt" / gt.id, cfg.data.pattern)
        entries.append(
            ManifestEntry(gt.id, f"lq/{gt.id}", f"gt/{gt.id}", [bool(x) for x in labels], "val" if i in val else "train")
        )
    manifest = Manifest(entries, profile, str(data_dir), {"seed": cfg.seed, "duplicates_removed": removed, "pqf_labels": source})
    path = manifest.save(data_dir / "manifest.json")
    write_run_meta(data_dir, "prepare-data", cfg, {"manifest_sha256": file_sha256(path)})
    log.info("prepared %d sequences (%d val), removed %d duplicate frames", len(entries), len(val), removed)
    return manifest


def _final_stage1(cfg) -> Path:
    d = Path(cfg.output_dir) / "stage1"
    ckpts = sorted(d.glob("stage1_phase*_k*.ckpt"), key=lambda p: int(p.name.split("phase")[1].split("_")[0]))
    if not ckpts:
        raise CommandError(f"no Stage-I checkpoints in {d}; run train-stage1 first")
    return ckpts[-1]


def cmd_train_stage1(cfg: RunConfig, overwrite=False):
    from .progtrain import TrainOptions, build_phase_plan, train_stage1

    manifest = _load_manifest(cfg)
    out = Path(cfg.output_dir) / "stage1"
    if out.exists() and any(out.glob("*.ckpt")) and not overwrite:
        raise CommandError(f"{out} already holds checkpoints; pass --overwrite to retrain", EXIT_USAGE)
    if overwrite and out.exists():
        for p in list(out.glob("*.ckpt")) + list(out.glob("stage1_metrics.csv")):
            p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.plan
    plan = build_phase_plan(toy=p.toy, toy_divisor=cfg.toy_divisor, lr0=p.lr0, groups=p.groups)
    opts = TrainOptions(
        batch_size=p.batch_size, patch_size=p.patch_size, t_len=p.t_len, log_interval=p.log_interval,
        val_interval=p.val_interval, seed=cfg.seed, device=device(), scale=cfg.degradation.downsample_factor,
    )
    s1 = cfg.stage1_config()
    if cfg.degradation.downsample_factor != s1.scale:
        from dataclasses import replace

        s1 = replace(s1, scale=cfg.degradation.downsample_factor)
    result = train_stage1(plan, manifest.load_pairs("train"), manifest.load_pairs("val"), s1, opts, out_dir=out)
    summary = [vars(r) for r in result.phases]
    (out / "phases.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_run_meta(out, "train-stage1", cfg, {"plan": plan.to_dict()})
    return result


def _load_stage1(path):
    from .checkpoint import Checkpoint
    from .stage1net import StageIConfig, build_model

    ck = Checkpoint.load(_require(Path(path), "expected a Stage-I checkpoint"))
    if ck.kind != "stage1":
        raise CommandError(f"{path} is a {ck.kind} checkpoint, expected stage1")
    model = build_model(StageIConfig.from_dict(ck.config), ck.params)
    return model.to(device()).eval()


def _load_stage2(path):
    from .checkpoint import Checkpoint
    from .stage2net import StageIIConfig, build_refiner

    ck = Checkpoint.load(_require(Path(path), "expected a Stage-II checkpoint"))
    if ck.kind != "stage2":
        raise CommandError(f"{path} is a {ck.kind} checkpoint, expected stage2")
    return build_refiner(StageIIConfig.from_dict(ck.config), ck.params).to(device()).eval()


def _stage1_outputs(model, pairs):
    from .stage1net import forward

    return [forward(lq, model) for lq, _ in pairs]


def cmd_train_stage2(cfg: RunConfig, overwrite=False):
    from .stage2net import Stage2Options, init_from_pretrained, pretrain_denoiser, train_stage2

    manifest = _load_manifest(cfg)
    out = Path(cfg.output_dir) / "stage2"
    out.mkdir(parents=True, exist_ok=True)
    _claim(out / "stage2.ckpt", overwrite)
    s1_path = _final_stage1(cfg)
    s1 = _load_stage1(s1_path)
    train, val = manifest.load_pairs("train"), manifest.load_pairs("val")
    t = cfg.stage2_train
    s2cfg = cfg.stage2_config()
    clean = np.concatenate([gt.frames for _, gt in train])
    denoiser = pretrain_denoiser(s2cfg, t.noise_sigma, clean, t.pretrain_iters, seed=cfg.seed, patch=t.patch, batch=t.batch)
    denoiser.save(out / "denoiser.ckpt")
    init, _ = init_from_pretrained(denoiser, s2cfg, strict=True)
    opts = Stage2Options(
        budget_a=t.budget_a, budget_b=t.budget_b, lr_a=t.lr_a, lr_b=t.lr_b, sample_every=t.sample_every,
        patch=t.patch, batch=t.batch, eval_every=t.eval_every, seed=cfg.seed, t_len=cfg.plan.t_len,
        freeze_stage1=t.freeze_stage1,
    )
    from .progtrain import MetricsLog

    metrics = MetricsLog(out / "stage2_metrics.csv")
    res = train_stage2(
        _stage1_outputs(s1, train), [g for _, g in train], _stage1_outputs(s1, val), [g for _, g in val],
        s2cfg, init, opts, joint=(s1, train, val), metrics=metrics,
    )
    res.checkpoint.save(out / "stage2.ckpt")
    if res.stage1_checkpoint is not None:
        res.stage1_checkpoint.save(out / "stage1_joint.ckpt")
    write_run_meta(out, "train-stage2", cfg, {"stage1_checkpoint": str(s1_path), "best_val_a": res.fit_a.best[0]})
    return res


def cmd_infer(cfg: RunConfig, overwrite=False, split="val", stage2: str | None = "auto", counter=None):
    """Write enhanced frames for every sequence in ``split``.

    Args:
        stage2: path to a Stage-II checkpoint, ``"auto"`` to use the one
            produced by train-stage2 when present, or None for Stage I only.
        counter: optional dict; ``counter["stage1"]`` receives the number of
            Stage-I forward calls (instrumentation for tests).
    """
    from .ensemble import CountingModel, Dihedral8, model_ensemble
    from .stage1net import enhance_frames
    from .stage2net import refine_frame
    from .videodata import VideoSequence, save_sequence

    manifest = _load_manifest(cfg)
    pred_dir = Path(cfg.output_dir) / "pred" / split
    _claim(pred_dir, overwrite)
    models = cfg.ensemble.models
    if not models:
        joint = Path(cfg.output_dir) / "stage2" / "stage1_joint.ckpt"
        models = [str(joint if joint.exists() else _final_stage1(cfg))]
    s1_models = [_load_stage1(m) for m in models]
    s2_model = None
    if stage2 == "auto":
        cand = Path(cfg.output_dir) / "stage2" / "stage2.ckpt"
        stage2 = str(cand) if cand.exists() else None
    if stage2:
        s2_model = _load_stage2(stage2)

    transforms = [Dihedral8.from_name(n) for n in cfg.ensemble.transforms]
    tta = cfg.ensemble.tta
    calls = 0
    for lq, _ in manifest.load_pairs(split):
        fns = [CountingModel(lambda x, m=m: enhance_frames(m, x, lq.pqf_labels)) for m in s1_models]
        out = model_ensemble(fns, lq.frames, tta in ("stage1", "both"), transforms)
        calls += sum(f.calls for f in fns)
        out = np.clip(out, 0.0, 1.0)
        if s2_model is not None:
            s2 = [lambda x: refine_frame(x, s2_model)]
            out = np.clip(model_ensemble(s2, out, tta in ("stage2", "both"), transforms), 0.0, 1.0)
        save_sequence(VideoSequence(lq.id, out, lq.fps, lq.pqf_labels), pred_dir / lq.id, cfg.data.pattern)
    if counter is not None:
        counter["stage1"] = calls
    write_run_meta(
        pred_dir, "infer", cfg, {"stage1_models": models, "stage2_model": stage2, "tta": tta, "stage1_forwards": calls}
    )
    return pred_dir


def cmd_evaluate(cfg: RunConfig, overwrite=False, split="val", pred_dir=None, label=""):
    from .evalreport import evaluate_many
    from .videodata import load_sequence

    manifest = _load_manifest(cfg)
    pred_dir = Path(pred_dir) if pred_dir else Path(cfg.output_dir) / "pred" / split
    _require(pred_dir, "run infer first or pass --pred-dir")
    out = Path(cfg.output_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{split}_{cfg.eval.mode}"
    _claim(out / f"{stem}_summary.csv", overwrite)
    preds, gts = [], []
    for lq, gt in manifest.load_pairs(split):
        seq_dir = _require(pred_dir / gt.id, f"no predictions for sequence {gt.id}")
        preds.append(load_sequence(seq_dir, cfg.data.pattern, seq_id=gt.id))
        gts.append(gt)
    report = evaluate_many(preds, gts, cfg.eval.mode, cfg.eval.luma_only, label=label or stem)
    (out / f"{stem}_frames.csv").write_text(report.frames_csv())
    (out / f"{stem}_summary.csv").write_text(report.summary_csv())
    write_run_meta(out, "evaluate", cfg, {"pred_dir": str(pred_dir), "aggregate": report.aggregate})
    log.info("%s: %.4f dB over %d sequences", stem, report.aggregate, len(report.per_sequence))
    return report


def read_summary_csv(path, label=None):
    import csv

    from .evalreport import EvalReport

    rows = list(csv.DictReader(Path(path).read_text().splitlines()))
    if not rows:
        raise CommandError(f"{path} is empty")
    seqs = [(r["seq_id"], float(r["mean_psnr"])) for r in rows if r["seq_id"] != "__aggregate__"]
    return EvalReport(rows[0]["mode"], [], seqs, label or Path(path).stem)


def cmd_report(cfg: RunConfig, inputs, overwrite=False, precision=2):
    """Tabulate one or more summary CSVs given as ``label=path`` or bare paths."""
    from .evalreport import aggregate_and_format

    reports = []
    for item in inputs:
        label, _, path = item.rpartition("=") if "=" in item else ("", "", item)
        reports.append(read_summary_csv(_require(Path(path), "expected an evaluate summary CSV"), label or None))
    fmt = aggregate_and_format(reports, precision=precision)
    out = _out(cfg) / "report"
    out.mkdir(exist_ok=True)
    _claim(out / "table.csv", overwrite)
    (out / "table.csv").write_text(fmt.csv)
    (out / "table.txt").write_text(fmt.table)
    write_run_meta(out, "report", cfg, {"inputs": list(inputs)})
    print(fmt.table, end="")
    return fmt


# ----------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable (e.g. stage1.channels=32)")
    common.add_argument("--seed", type=int)
    common.add_argument("--toy-divisor", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pqfrestore", description="Two-stage compressed video restoration toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="degrade, de-duplicate, label PQFs, split")
    sub.add_parser("train-stage1", parents=[common], help="progressive Stage-I training")
    sub.add_parser("train-stage2", parents=[common], help="denoiser pretrain + Stage-II fine-tuning")
    p = sub.add_parser("infer", parents=[common], help="cascade inference with optional ensembles")
    p.add_argument("--tta", choices=["none", "stage1", "stage2", "both"])
    p.add_argument("--models", help="comma-separated Stage-I checkpoints")
    p.add_argument("--stage2", default="auto", help="Stage-II checkpoint, 'auto' or 'none'")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p = sub.add_parser("evaluate", parents=[common], help="PSNR of predictions against ground truth")
    p.add_argument("--mode", choices=["all", "every10th"])
    p.add_argument("--luma-only", action="store_true")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--pred-dir")
    p.add_argument("--label", default="")
    p = sub.add_parser("report", parents=[common], help="tabulate evaluation summaries")
    p.add_argument("inputs", nargs="+", help="summary CSVs as LABEL=PATH or PATH")
    p.add_argument("--precision", type=int, default=2)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.toy_divisor is not None:
        overrides.append(f"toy_divisor={args.toy_divisor}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if getattr(args, "tta", None):
        overrides.append(f"ensemble.tta={args.tta}")
    if getattr(args, "models", None):
        overrides.append(f"ensemble.models={json.dumps(args.models.split(','))}")
    if getattr(args, "mode", None):
        overrides.append(f"eval.mode={args.mode}")
    if getattr(args, "luma_only", False):
        overrides.append("eval.luma_only=true")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        _out(cfg)
        ow = args.overwrite
        if args.command == "prepare-data":
            cmd_prepare_data(cfg, ow)
        elif args.command == "train-stage1":
            cmd_train_stage1(cfg, ow)
        elif args.command == "train-stage2":
            cmd_train_stage2(cfg, ow)
        elif args.command == "infer":
            stage2 = None if args.stage2 == "none" else args.stage2
            cmd_infer(cfg, ow, args.split, stage2)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, ow, args.split, args.pred_dir, args.label)
            print(f"{report.aggregate:.4f}")
        elif args.command == "report":
            cmd_report(cfg, args.inputs, ow, args.precision)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except RestorationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
