"""Referring-segmentation metrics: per-instance IoU, gIoU, cIoU, Pr@X and no-target accuracy."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ssp_sam.errors import InvalidInputError

NO_TARGET_PIXELS = 50
PR_THRESHOLDS = (0.5, 0.7, 0.8, 0.9)


@dataclass
class InstanceResult:
    sample_id: str
    intersection: int
    union: int
    iou: float
    is_no_target: bool = False
    pred_pixels: int = 0


@dataclass
class MetricsReport:
    giou: float
    ciou: float
    pr_at: dict[float, float] = field(default_factory=dict)
    n_acc: float | None = None
    n_samples: int = 0

    def to_flat(self) -> dict[str, float]:
        out = {"giou": self.giou, "ciou": self.ciou, "n_acc": self.n_acc, "n_samples": self.n_samples}
        for x, v in self.pr_at.items():
            out[f"pr@{x}"] = v
        return out

    def to_json(self) -> str:
        data = asdict(self)
        data["pr_at"] = {str(k): v for k, v in self.pr_at.items()}
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        data["pr_at"] = {float(k): v for k, v in data["pr_at"].items()}
        return cls(**data)


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """Logits -> boolean mask at probability ``threshold``."""
    logits = np.asarray(logits, dtype=np.float64)
    return logits > np.log(threshold / (1.0 - threshold))


def instance_iou(pred_mask: np.ndarray, gt_mask: np.ndarray, is_no_target: bool = False) -> tuple[int, int, float]:
    """Return ``(intersection, union, iou)`` for one instance.

    A no-target instance scores IoU 1 when the prediction has fewer than 50 positive
    pixels and 0 otherwise; its intersection and union are reported as 0 so that it
    drops out of cumulative IoU.
    """
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if is_no_target:
        return 0, 0, 1.0 if int(pred.sum()) < NO_TARGET_PIXELS else 0.0
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    return inter, union, 1.0 if union == 0 else inter / union


def evaluate_instance(sample_id: str, pred_mask: np.ndarray, gt_mask: np.ndarray, is_no_target: bool) -> InstanceResult:
    inter, union, iou = instance_iou(pred_mask, gt_mask, is_no_target)
    return InstanceResult(sample_id, inter, union, iou, is_no_target, int(np.asarray(pred_mask, bool).sum()))


def aggregate(results: Iterable[InstanceResult], thresholds: Sequence[float] = PR_THRESHOLDS) -> MetricsReport:
    """Combine per-instance results into a dataset-level report.

    Results are sorted by sample id first, so the outcome does not depend on the order
    in which concurrent workers produced them.
    """
    rows = sorted(results, key=lambda r: r.sample_id)
    if not rows:
        raise InvalidInputError("no results to aggregate")
    ious = np.array([r.iou for r in rows], dtype=np.float64)
    inter = sum(r.intersection for r in rows if not r.is_no_target)
    union = sum(r.union for r in rows if not r.is_no_target)
    nt = [r.iou for r in rows if r.is_no_target]
    return MetricsReport(
        giou=float(ious.mean()),
        ciou=float(inter / union) if union else 1.0,
        pr_at={float(x): float((ious > x).mean()) for x in thresholds},
        n_acc=float(np.mean(nt)) if nt else None,
        n_samples=len(rows),
    )


def merge_gres_targets(masks: Sequence[np.ndarray], boxes: Sequence[Sequence[float]],
                       shape: tuple[int, int] | None = None) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """OR the target masks together and take the min/max envelope of their corner boxes.

    With no targets the result is an all-zero mask of ``shape`` and the box (0, 0, 0, 0).
    """
    if len(masks) != len(boxes):
        raise InvalidInputError("masks and boxes differ in length")
    if not masks:
        if shape is None:
            raise InvalidInputError("shape is required when there are no targets")
        return np.zeros(shape, dtype=bool), (0.0, 0.0, 0.0, 0.0)
    merged = np.zeros_like(np.asarray(masks[0], dtype=bool))
    for m in masks:
        merged |= np.asarray(m, dtype=bool)
    b = np.asarray(boxes, dtype=np.float64)
    return merged, (float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max()))


def write_report(report: MetricsReport, out_dir: str | os.PathLike, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``{stem}.txt`` (flat key=value) and ``{stem}.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / f"{stem}.txt"
    txt.write_text("".join(f"{k}={v}\n" for k, v in report.to_flat().items()))
    js = out / f"{stem}.json"
    js.write_text(report.to_json() + "\n")
    return txt, js


def write_per_sample(results: Iterable[InstanceResult], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for r in sorted(results, key=lambda r: r.sample_id):
            fh.write(json.dumps(asdict(r)) + "\n")


def read_per_sample(path: str | os.PathLike) -> list[InstanceResult]:
    return [InstanceResult(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
