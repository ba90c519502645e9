"""Dice overlap scoring and multi-case reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .schema import LabelSchema
from .volume import LabelVolume

__all__ = ["dice", "dice_all", "dice_report", "DiceReport"]


def _ids(vol) -> np.ndarray:
    return vol.data if isinstance(vol, LabelVolume) else np.asarray(vol)


def dice(pred, ref, label_id: int) -> float:
    """2|A∩B| / (|A| + |B|) for the voxels carrying ``label_id``.

    Two volumes that both lack the label score 1.0.
    """
    a, b = _ids(pred), _ids(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if isinstance(pred, LabelVolume) and isinstance(ref, LabelVolume) and not pred.same_geometry(ref):
        raise ValueError("prediction and reference differ in geometry")
    ma, mb = a == label_id, b == label_id
    total = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


def dice_all(pred, ref, schema: LabelSchema) -> dict[str, float]:
    return {name: dice(pred, ref, i) for i, name in schema.entries()}


@dataclass
class DiceReport:
    """Per-case Dice scores with per-label aggregates.

    ``scores[case_id][label]`` is NaN when the label is missing from that
    case's reference; such entries are left out of the aggregates.
    """

    labels: tuple[str, ...]
    scores: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def n_cases(self) -> int:
        return len(self.scores)

    def values(self, label: str) -> np.ndarray:
        v = np.array([case[label] for case in self.scores.values()], dtype=np.float64)
        return v[~np.isnan(v)]

    def median(self, label: str) -> float:
        v = self.values(label)
        return float(np.median(v)) if v.size else float("nan")

    def mean(self, label: str) -> float:
        v = self.values(label)
        return float(v.mean()) if v.size else float("nan")

    def std(self, label: str) -> float:
        v = self.values(label)
        return float(v.std()) if v.size else float("nan")

    def summary(self) -> dict[str, dict[str, float]]:
        return {
            lab: {"median": self.median(lab), "mean": self.mean(lab), "std": self.std(lab),
                  "n": int(self.values(lab).size)}
            for lab in self.labels
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "label", "dice"])
        for case_id, row in self.scores.items():
            for lab in self.labels:
                value = row[lab]
                w.writerow([case_id, lab, "" if np.isnan(value) else f"{value:.6f}"])
        return buf.getvalue()

    def table_row(self, name: str, stat: str = "mean", labels: Sequence[str] | None = None) -> str:
        labels = self.labels if labels is None else tuple(labels)
        agg = getattr(self, stat)
        return "\t".join([name] + [_pct(agg(lab)) for lab in labels])

    def to_table(self, labels: Sequence[str] | None = None,
                 stats: Iterable[str] = ("median", "mean", "std")) -> str:
        """Percent table, one decimal, one row per statistic."""
        labels = self.labels if labels is None else tuple(labels)
        lines = ["\t".join([""] + list(labels))]
        lines += [self.table_row(stat, stat, labels) for stat in stats]
        return "\n".join(lines) + "\n"


def _pct(x: float) -> str:
    return "nan" if np.isnan(x) else f"{100.0 * x:.1f}"


def dice_report(cases, schema: LabelSchema, case_ids: Sequence[str] | None = None) -> DiceReport:
    """Score every (pred, ref) pair for every label of ``schema``."""
    cases = list(cases)
    if not cases:
        raise ValueError("dice_report needs at least one case")
    if case_ids is None:
        case_ids = [f"case{i:03d}" for i in range(len(cases))]
    report = DiceReport(labels=schema.names)
    for cid, (pred, ref) in zip(case_ids, cases):
        ref_ids = _ids(ref)
        row = {}
        for label_id, name in schema.entries():
            if not np.any(ref_ids == label_id):
                row[name] = float("nan")
            else:
                row[name] = dice(pred, ref, label_id)
        report.scores[str(cid)] = row
    return report
