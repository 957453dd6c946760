"""Score fusion, threshold calibration, decisions and evaluation metrics.

The unified score is p_ood = 1 - p_bc * p_cl: a pair counts as
out-of-distribution unless both the classifier and the alignment check
endorse it. The threshold delta is calibrated so a target fraction of held
out in-distribution pairs keeps a combined score p_bc * p_cl above delta,
and a pair is declared OOD exactly when p_ood > 1 - delta. OOD is the
positive class everywhere in the metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DetectionScores",
    "ThresholdCalibration",
    "GroupMetrics",
    "MetricsReport",
    "HistogramRow",
    "unified_score",
    "calibrate_threshold",
    "decide",
    "confusion_metrics",
    "auroc",
    "build_metrics_report",
    "score_histograms",
    "write_histograms",
]

GROUP_ORDER = ("scenario1+id", "scenario2+id", "scenario3+id", "overall")
_SCENARIO_OF_GROUP = {
    "scenario1+id": "s1",
    "scenario2+id": "s2",
    "scenario3+id": "s3",
}


def _check_unit_interval(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")


def unified_score(p_bc, p_cl):
    """Fused OOD probability 1 - p_bc * p_cl.

    Accepts scalars or arrays; both inputs must lie in [0, 1]. The result is
    monotone decreasing in each component, so a pair must look good to both
    detectors for the fused score to stay low.
    """
    bc = np.asarray(p_bc, dtype=np.float64)
    cl = np.asarray(p_cl, dtype=np.float64)
    _check_unit_interval(bc, "p_bc")
    _check_unit_interval(cl, "p_cl")
    out = 1.0 - bc * cl
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DetectionScores:
    """Per-sample detector outputs with ground truth.

    ``p_ood`` is redundant with the components by construction; the identity
    p_ood = 1 - p_bc * p_cl is enforced to 1e-12 so downstream code can use
    either form.
    """

    p_bc: np.ndarray
    p_cl: np.ndarray
    p_ood: np.ndarray
    ood_flags: np.ndarray
    scenarios: tuple[str, ...]

    def __post_init__(self):
        bc = np.asarray(self.p_bc, dtype=np.float64)
        cl = np.asarray(self.p_cl, dtype=np.float64)
        po = np.asarray(self.p_ood, dtype=np.float64)
        flags = np.asarray(self.ood_flags, dtype=bool)
        object.__setattr__(self, "p_bc", bc)
        object.__setattr__(self, "p_cl", cl)
        object.__setattr__(self, "p_ood", po)
        object.__setattr__(self, "ood_flags", flags)
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        n = bc.shape[0]
        if not (cl.shape[0] == po.shape[0] == flags.shape[0] == len(self.scenarios) == n):
            raise ValueError("score arrays must share one length")
        if n == 0:
            raise ValueError("empty score set")
        _check_unit_interval(bc, "p_bc")
        _check_unit_interval(cl, "p_cl")
        _check_unit_interval(po, "p_ood")
        if np.max(np.abs(po - (1.0 - bc * cl))) > 1e-12:
            raise ValueError("p_ood does not equal 1 - p_bc * p_cl")

    @classmethod
    def from_components(cls, p_bc, p_cl, ood_flags, scenarios) -> "DetectionScores":
        bc = np.asarray(p_bc, dtype=np.float64)
        cl = np.asarray(p_cl, dtype=np.float64)
        return cls(bc, cl, unified_score(bc, cl), ood_flags, tuple(scenarios))

    def __len__(self) -> int:
        return self.p_bc.shape[0]

    def combined(self) -> np.ndarray:
        return self.p_bc * self.p_cl

    def scenario_mask(self, *names: str) -> np.ndarray:
        wanted = set(names)
        return np.array([s in wanted for s in self.scenarios], dtype=bool)

    def subset(self, mask: np.ndarray) -> "DetectionScores":
        mask = np.asarray(mask, dtype=bool)
        return DetectionScores(
            self.p_bc[mask],
            self.p_cl[mask],
            self.p_ood[mask],
            self.ood_flags[mask],
            tuple(s for s, keep in zip(self.scenarios, mask) if keep),
        )


@dataclass(frozen=True)
class ThresholdCalibration:
    """Calibrated decision threshold and how it was obtained."""

    delta: float
    target_id_fraction: float
    calibration_size: int
    method: str = "lower-empirical-quantile"

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not (0.0 < self.target_id_fraction < 1.0):
            raise ValueError("target_id_fraction must lie in (0, 1)")
        if self.calibration_size < 20:
            raise ValueError("calibration needs at least 20 scores")

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "target_id_fraction": self.target_id_fraction,
            "calibration_size": self.calibration_size,
            "method": self.method,
        }


def calibrate_threshold(id_scores, target: float = 0.95) -> ThresholdCalibration:
    """Pick delta as the lower empirical (1 - target)-quantile of ID scores.

    ``id_scores`` are combined scores p_bc * p_cl of held-out in-distribution
    pairs. The returned delta is the largest observed score such that at
    least ``target`` of the calibration scores are >= delta, i.e. the order
    statistic at index ceil((1 - target) * n) - 1 (floored at 0) of the
    ascending sort. Degenerate all-0 or all-1 score sets are nudged into
    (0, 1) so the decision rule stays well-defined.

    Raises:
        ValueError: fewer than 20 scores, or target outside (0, 1).
    """
    scores = np.asarray(id_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("id_scores must be 1-D")
    if scores.shape[0] < 20:
        raise ValueError(
            f"calibration needs at least 20 ID scores, got {scores.shape[0]}"
        )
    _check_unit_interval(scores, "id_scores")
    target = float(target)
    if not (0.0 < target < 1.0):
        raise ValueError(f"target must lie in (0, 1), got {target}")
    n = scores.shape[0]
    q = 1.0 - target
    # The 1e-9 guard keeps exact boundaries like 0.05 * 20 == 1 from being
    # pushed up a rank by floating-point overshoot.
    index = max(0, math.ceil(q * n - 1e-9) - 1)
    delta = float(np.sort(scores, kind="stable")[index])
    tiny = 1e-12
    delta = min(max(delta, tiny), 1.0 - tiny)
    return ThresholdCalibration(
        delta=delta, target_id_fraction=target, calibration_size=n
    )


def decide(p_ood, delta: float):
    """Flag OOD exactly when p_ood > 1 - delta.

    Equivalently, a pair stays in-distribution while its combined score
    p_bc * p_cl is at least delta. Returns a bool array (or scalar for
    scalar input).
    """
    delta = float(delta)
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    scores = np.asarray(p_ood, dtype=np.float64)
    _check_unit_interval(scores, "p_ood")
    out = scores > (1.0 - delta)
    return bool(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GroupMetrics:
    """Confusion counts and derived rates for one evaluation group.

    Rates are percentages in [0, 100]; ``auroc`` stays a probability in
    [0, 1]. Zero-denominator rates are reported as 0.
    """

    accuracy: float
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    auroc: float | None = None

    def __post_init__(self):
        for name in ("accuracy", "recall", "precision", "f1"):
            value = getattr(self, name)
            if not (0.0 <= value <= 100.0):
                raise ValueError(f"{name} must lie in [0, 100], got {value}")
        if self.auroc is not None and not (0.0 <= self.auroc <= 1.0):
            raise ValueError(f"auroc must lie in [0, 1], got {self.auroc}")
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def size(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "auroc": self.auroc,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def confusion_metrics(decisions, truths) -> GroupMetrics:
    """Confusion counts plus accuracy/recall/precision/F1, OOD positive.

    Raises:
        ValueError: empty input or mismatched lengths.
    """
    d = np.asarray(decisions, dtype=bool)
    t = np.asarray(truths, dtype=bool)
    if d.shape != t.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {t.shape}")
    if d.size == 0:
        raise ValueError("empty decision set")
    tp = int(np.sum(d & t))
    fp = int(np.sum(d & ~t))
    tn = int(np.sum(~d & ~t))
    fn = int(np.sum(~d & t))
    total = tp + fp + tn + fn
    accuracy = 100.0 * (tp + tn) / total
    precision = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return GroupMetrics(
        accuracy=accuracy,
        recall=recall,
        precision=precision,
        f1=f1,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    averages = starts + (counts + 1) / 2.0
    return averages[inverse]


def auroc(scores, truths) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Equals the probability that a random positive (OOD) outscores a random
    negative, ties counting half. Exact for any score distribution, no curve
    interpolation involved.

    Raises:
        ValueError: if either class is absent.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("scores and truths must be 1-D with equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    n_pos = int(np.sum(t))
    n_neg = int(t.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = _average_ranks(s)
    u = float(np.sum(ranks[t])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation over the standard groups at one decision threshold.

    Groups are each scenario mixed with the ID block plus the pooled
    ``overall`` group. Group records carry exactly the fields of
    ``GroupMetrics.to_dict``.
    """

    delta: float
    groups: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "groups": {name: gm.to_dict() for name, gm in self.groups.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = f"{'group':<14} {'acc':>7} {'recall':>7} {'prec':>7} {'f1':>7} {'auroc':>7}"
        lines = [header, "-" * len(header)]
        for name in GROUP_ORDER:
            if name not in self.groups:
                continue
            g = self.groups[name]
            auc = f"{g.auroc:.4f}" if g.auroc is not None else "   n/a"
            lines.append(
                f"{name:<14} {g.accuracy:>7.2f} {g.recall:>7.2f} "
                f"{g.precision:>7.2f} {g.f1:>7.2f} {auc:>7}"
            )
        lines.append(f"delta = {self.delta:.6f}")
        return "\n".join(lines)


def build_metrics_report(scores: DetectionScores, delta: float) -> MetricsReport:
    """Score every group at one threshold.

    Each scenario group pools that scenario's samples with the ID samples;
    ``overall`` pools everything. AUROC uses the unified score as the
    ranking statistic and is omitted (None) for a group missing a class.
    """
    groups: dict[str, GroupMetrics] = {}
    for name in GROUP_ORDER:
        if name == "overall":
            mask = np.ones(len(scores), dtype=bool)
        else:
            mask = scores.scenario_mask("id", _SCENARIO_OF_GROUP[name])
        if not np.any(mask):
            continue
        sub = scores.subset(mask)
        decisions = decide(sub.p_ood, delta)
        metrics = confusion_metrics(decisions, sub.ood_flags)
        try:
            auc = auroc(sub.p_ood, sub.ood_flags)
        except ValueError:
            auc = None
        groups[name] = GroupMetrics(
            accuracy=metrics.accuracy,
            recall=metrics.recall,
            precision=metrics.precision,
            f1=metrics.f1,
            tp=metrics.tp,
            fp=metrics.fp,
            tn=metrics.tn,
            fn=metrics.fn,
            auroc=auc,
        )
    return MetricsReport(delta=float(delta), groups=groups)


@dataclass(frozen=True)
class HistogramRow:
    group: str
    metric: str
    bin_left: float
    bin_right: float
    mass: float


THRESHOLD_GROUP = "__threshold__"


def score_histograms(
    scores: DetectionScores,
    bins: int = 20,
    thresholds: Mapping[str, float] | None = None,
) -> list[HistogramRow]:
    """Normalized score histograms per group and metric, on [0, 1].

    Groups are the sample populations id/s1/s2/s3; metrics are p_cl, p_bc
    and their product. Masses within one (group, metric) sum to 1. Threshold
    markers, when given as {metric: value}, are appended as rows under the
    group ``__threshold__`` with bin_left = bin_right = value and mass 0, so
    a plotting script can draw the decision line from the same file.

    Raises:
        ValueError: fewer than 2 bins or an empty scenario group.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    metrics = {
        "p_cl": scores.p_cl,
        "p_bc": scores.p_bc,
        "combined": scores.combined(),
    }
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows: list[HistogramRow] = []
    for group in ("id", "s1", "s2", "s3"):
        mask = scores.scenario_mask(group)
        if not np.any(mask):
            raise ValueError(f"empty group {group!r}")
        for metric_name, values in metrics.items():
            counts, _ = np.histogram(values[mask], bins=edges)
            mass = counts / counts.sum()
            for i in range(bins):
                rows.append(
                    HistogramRow(
                        group=group,
                        metric=metric_name,
                        bin_left=float(edges[i]),
                        bin_right=float(edges[i + 1]),
                        mass=float(mass[i]),
                    )
                )
    for metric_name, value in sorted((thresholds or {}).items()):
        rows.append(
            HistogramRow(
                group=THRESHOLD_GROUP,
                metric=metric_name,
                bin_left=float(value),
                bin_right=float(value),
                mass=0.0,
            )
        )
    return rows


def write_histograms(rows: Sequence[HistogramRow], path) -> Path:
    """Write histogram rows as headerless TSV: group metric left right mass."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{r.group}\t{r.metric}\t{r.bin_left:.10g}\t{r.bin_right:.10g}\t{r.mass:.10g}"
        for r in rows
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
