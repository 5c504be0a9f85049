"""PSNR evaluation in "all frames" and "every 10th frame" modes, plus
table/CSV report formatting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ArgumentError, EvalError

PSNR_CAP = 100.0
MODES = ("all", "every10th")
_LUMA = np.array([0.299, 0.587, 0.114])


def to_luma(frame: np.ndarray) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64) @ _LUMA


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP, luma_only: bool = False) -> float:
    """Peak signal-to-noise ratio in dB; ``cap`` is returned for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if luma_only:
        a, b = to_luma(a), to_luma(b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / err))


def selected_frames(n: int, mode: str) -> list[int]:
    """0-based indices evaluated under ``mode``.

    ``every10th`` keeps the 1-based frames 10, 20, ... i.e. 0-based 9, 19, ...
    """
    if mode == "all":
        return list(range(n))
    if mode == "every10th":
        return list(range(9, n, 10))
    raise ArgumentError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")


@dataclass
class EvalReport:
    mode: str = "all"
    per_frame: list = field(default_factory=list)  # (seq_id, frame_index, psnr)
    per_sequence: list = field(default_factory=list)  # (seq_id, mean_psnr)
    label: str = ""

    @property
    def aggregate(self) -> float:
        """Unweighted mean over sequences."""
        if not self.per_sequence:
            raise EvalError("empty report")
        return float(np.mean([v for _, v in self.per_sequence]))

    def extend(self, other: "EvalReport") -> "EvalReport":
        if other.mode != self.mode:
            raise EvalError(f"cannot merge {other.mode} report into {self.mode} report")
        self.per_frame.extend(other.per_frame)
        self.per_sequence.extend(other.per_sequence)
        return self

    def frames_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq_id", "frame_index", "psnr"])
        for sid, idx, v in self.per_frame:
            w.writerow([sid, idx, f"{v:.6f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq_id", "mean_psnr", "mode"])
        for sid, v in self.per_sequence:
            w.writerow([sid, f"{v:.6f}", self.mode])
        w.writerow(["__aggregate__", f"{self.aggregate:.6f}", self.mode])
        return buf.getvalue()


def evaluate(pred, gt, mode: str = "all", luma_only: bool = False) -> EvalReport:
    """Score one predicted sequence against its ground truth."""
    pf = pred.frames
    gf = gt.frames
    if len(pf) != len(gf) or pf.shape != gf.shape:
        raise ArgumentError(f"pred {pf.shape} and gt {gf.shape} differ")
    idx = selected_frames(len(pf), mode)
    if not idx:
        raise EvalError(f"sequence {gt.id!r} with {len(pf)} frames has no frames selected in {mode!r} mode")
    rows = [(gt.id, i, psnr(pf[i], gf[i], luma_only=luma_only)) for i in idx]
    mean = float(np.mean([r[2] for r in rows]))
    return EvalReport(mode, rows, [(gt.id, mean)])


def evaluate_many(preds, gts, mode: str = "all", luma_only: bool = False, label: str = "") -> EvalReport:
    report = EvalReport(mode, label=label)
    for p, g in zip(preds, gts, strict=True):
        report.extend(evaluate(p, g, mode, luma_only))
    return report


def round_half_up(value: float, digits: int) -> str:
    q = Decimal(1).scaleb(-digits)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class FormattedReport:
    csv: str
    table: str
    averages: dict


def aggregate_and_format(reports, precision: int = 2, avg_precision: int = 4) -> FormattedReport:
    """Lay out one row per report and one column per sequence plus ``Avg.``.

    Args:
        reports: an EvalReport or a list of them (rows).
        precision: decimals for per-sequence cells.
        avg_precision: decimals for the average column.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    if not reports or not all(r.per_sequence for r in reports):
        raise EvalError("need at least one sequence")
    columns = []
    for r in reports:
        for sid, _ in r.per_sequence:
            if sid not in columns:
                columns.append(sid)
    header = ["model", *columns, "Avg."]
    rows = []
    averages = {}
    for i, r in enumerate(reports):
        label = r.label or f"row{i}"
        values = dict(r.per_sequence)
        averages[label] = r.aggregate
        cells = [round_half_up(values[c], precision) if c in values else "-" for c in columns]
        rows.append([label, *cells, round_half_up(r.aggregate, avg_precision)])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)

    widths = [max(len(str(row[j])) for row in [header, *rows]) for j in range(len(header))]
    fmt = lambda row: " | ".join(str(c).rjust(wd) for c, wd in zip(row, widths))
    rule = "-+-".join("-" * wd for wd in widths)
    table = "\n".join([fmt(header), rule, *(fmt(r) for r in rows)]) + "\n"
    return FormattedReport(buf.getvalue(), table, averages)
