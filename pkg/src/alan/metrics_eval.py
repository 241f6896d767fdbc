"""DICE scoring, grouped statistics and overlay rendering.

Scores are grouped by (region, cardiac phase) and reported as mean +-
sample standard deviation with per-group histograms. Overlays follow the
usual color scheme: prediction-only green, ground-truth-only blue,
overlap turquoise, written as uncompressed binary PPM so tests can count
pixels per color.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from alan.errors import DataError

logger = logging.getLogger(__name__)

COLOR_PRED = (0, 255, 0)
COLOR_GT = (0, 0, 255)
COLOR_OVERLAP = (0, 255, 255)
COLOR_PARCEL_BORDER = (255, 255, 0)


@dataclass(frozen=True)
class DiceRecord:
    seq_id: str
    frame_idx: int
    region_label: str
    phase: str
    dice: float


@dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float
    n: int
    single: bool  # std degenerate: one record only
    hist_counts: np.ndarray


@dataclass(frozen=True)
class EvalReport:
    records: tuple
    groups: dict
    bin_width: float


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a&b| / (|a|+|b|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DataError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def aggregate(records, bin_width: float = 0.05) -> EvalReport:
    """Mean, sample std and histogram per (region, phase) group."""
    records = tuple(records)
    if not records:
        logger.warning("aggregate: no records")
    edges = np.arange(0.0, 1.0 + bin_width / 2, bin_width)
    groups = {}
    keys = sorted({(r.region_label, r.phase) for r in records})
    for key in keys:
        values = np.array([r.dice for r in records
                           if (r.region_label, r.phase) == key])
        single = len(values) == 1
        std = 0.0 if single else float(values.std(ddof=1))
        counts, _ = np.histogram(values, bins=edges)
        groups[key] = GroupStats(
            mean=float(values.mean()), std=std, n=len(values),
            single=single, hist_counts=counts,
        )
    return EvalReport(records=records, groups=groups, bin_width=bin_width)


def write_eval_report(report: EvalReport, path) -> None:
    lines = ["# DICE report (mean +- sample std, ddof=1)"]
    for (region, phase), stats in report.groups.items():
        flag = "  [single record, std degenerate]" if stats.single else ""
        lines.append(
            f"{region} {phase or '-'}: {stats.mean:.4f} +- {stats.std:.4f} "
            f"(n={stats.n}){flag}"
        )
    lines.append("records:")
    for r in report.records:
        lines.append(
            f"  {r.seq_id} frame {r.frame_idx} {r.region_label} "
            f"{r.phase or '-'}: {r.dice:.6f}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def write_histogram_csv(report: EvalReport, path) -> None:
    """Histogram rows: region,phase,bin_start,count."""
    lines = ["region,phase,bin_start,count"]
    for (region, phase), stats in report.groups.items():
        for i, count in enumerate(stats.hist_counts):
            start = i * report.bin_width
            lines.append(f"{region},{phase},{start:.4f},{int(count)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def render_overlay(pred: np.ndarray, gt: np.ndarray | None = None,
                   frame: np.ndarray | None = None,
                   parcel_map: np.ndarray | None = None) -> np.ndarray:
    """RGB overlay image [h, w, 3] uint8.

    Prediction-only pixels green, ground-truth-only blue, overlap
    turquoise, over the grayscale frame (or a black canvas). Parcel
    borders, when a parcel map is given, are drawn on top in yellow.
    """
    pred = np.asarray(pred).astype(bool)
    h, w = pred.shape
    if frame is not None:
        frame = np.asarray(frame)
        if frame.shape != (h, w):
            raise DataError(
                f"frame shape {frame.shape} does not match mask {(h, w)}"
            )
        img = np.repeat(frame.astype(np.uint8)[:, :, None], 3, axis=2)
    else:
        img = np.zeros((h, w, 3), dtype=np.uint8)
    if gt is not None:
        gt = np.asarray(gt).astype(bool)
        if gt.shape != (h, w):
            raise DataError(
                f"ground-truth shape {gt.shape} does not match mask {(h, w)}"
            )
    else:
        gt = np.zeros((h, w), dtype=bool)
    img[pred & ~gt] = COLOR_PRED
    img[gt & ~pred] = COLOR_GT
    img[pred & gt] = COLOR_OVERLAP
    if parcel_map is not None:
        parcel_map = np.asarray(parcel_map)
        if parcel_map.shape != (h, w):
            raise DataError(
                f"parcel map shape {parcel_map.shape} does not match {(h, w)}"
            )
        border = np.zeros((h, w), dtype=bool)
        border[:-1, :] |= parcel_map[:-1, :] != parcel_map[1:, :]
        border[:, :-1] |= parcel_map[:, :-1] != parcel_map[:, 1:]
        img[border] = COLOR_PARCEL_BORDER
    return img


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM (P6) writer for overlay images."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM image must be [h, w, 3], got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM (P6) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PPM not supported")
    if len(data) < pos + 3 * h * w:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=3 * h * w,
                         offset=pos).reshape(h, w, 3)
