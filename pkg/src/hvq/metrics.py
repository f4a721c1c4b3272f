"""Evaluation: Hungarian matching, MoF, segment F1 and the length-bias JSD.

Predicted cluster ids are matched one-to-one to ground-truth classes per
activity, over all frames of all its videos. Clusters left unmatched map to
``NO_CLASS`` and count as wrong everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

NO_CLASS = -1
BIN_WIDTH = 20


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    length: int


def extract_segments(labels: Sequence[int]) -> List[Segment]:
    """Maximal runs of equal labels, in order."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricError("cannot segment an empty label sequence")
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [Segment(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def _check_aligned(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                   names: Optional[Sequence[str]] = None) -> None:
    if len(pred) != len(gt):
        raise MetricError(f"{len(pred)} predicted videos vs {len(gt)} ground-truth videos")
    for i, (p, g) in enumerate(zip(pred, gt)):
        if len(p) != len(g):
            name = names[i] if names is not None else f"#{i}"
            raise MetricError(f"video {name}: {len(p)} predicted vs {len(g)} ground-truth frames")


def _masks(gt: Sequence[np.ndarray], background: Optional[int]) -> List[np.ndarray]:
    if background is None:
        return [np.ones(len(g), dtype=bool) for g in gt]
    return [np.asarray(g) != background for g in gt]


def overlap_matrix(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                   masks: Optional[Sequence[np.ndarray]] = None
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frame counts ``O[k, c]`` plus the sorted cluster ids and class ids."""
    P = np.concatenate([np.asarray(p) for p in pred])
    G = np.concatenate([np.asarray(g) for g in gt])
    if masks is not None:
        M = np.concatenate(masks)
        P, G = P[M], G[M]
    clusters = np.unique(P)
    classes = np.unique(G)
    O = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    np.add.at(O, (np.searchsorted(clusters, P), np.searchsorted(classes, G)), 1)
    return O, clusters, classes


def match_overlap(O: np.ndarray) -> List[Tuple[int, int]]:
    """Maximum-weight one-to-one row/column pairs on the zero-padded square matrix."""
    n = max(O.shape) if O.size else 0
    if n == 0:
        return []
    square = np.zeros((n, n), dtype=np.float64)
    square[:O.shape[0], :O.shape[1]] = O
    rows, cols = linear_sum_assignment(square, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if r < O.shape[0] and c < O.shape[1]]


def hungarian_match(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                    background: Optional[int] = None,
                    names: Optional[Sequence[str]] = None) -> Dict[int, int]:
    """Cluster id to class id; background frames are left out when ``background`` is set."""
    _check_aligned(pred, gt, names)
    O, clusters, classes = overlap_matrix(pred, gt, _masks(gt, background))
    mapping = {int(k): NO_CLASS for k in np.unique(np.concatenate([np.asarray(p) for p in pred]))}
    for r, c in match_overlap(O):
        mapping[int(clusters[r])] = int(classes[c])
    return mapping


def _apply(mapping: Mapping[int, int], labels: np.ndarray) -> np.ndarray:
    return np.array([mapping.get(int(l), NO_CLASS) for l in labels], dtype=np.int64)


def mof(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], mapping: Mapping[int, int],
        background: Optional[int] = None) -> float:
    """Correct-frame fraction over unmasked frames of one activity."""
    correct = total = 0
    for p, g, m in zip(pred, gt, _masks(gt, background)):
        mapped = _apply(mapping, p)
        correct += int(np.sum((mapped == np.asarray(g)) & m))
        total += int(m.sum())
    if total == 0:
        raise MetricError("no unmasked frames to evaluate")
    return correct / total


def precision_recall_f1(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                        mapping: Mapping[int, int], background: Optional[int] = None
                        ) -> Tuple[float, float, float]:
    """Segment-level scores with a strict majority rule.

    A ground-truth segment is recalled when more than half of its unmasked
    frames are predicted as its class; a predicted segment is precise when
    more than half of its unmasked frames carry its mapped class. Segments
    without unmasked frames are ignored.
    """
    n_gt = hit_gt = n_pred = hit_pred = 0
    for p, g, m in zip(pred, gt, _masks(gt, background)):
        g = np.asarray(g)
        mapped = _apply(mapping, p)
        for seg in extract_segments(g):
            sl = slice(seg.start, seg.start + seg.length)
            valid = m[sl]
            if not valid.any():
                continue
            n_gt += 1
            if np.sum((mapped[sl] == seg.label) & valid) * 2 > valid.sum():
                hit_gt += 1
        for seg in extract_segments(mapped):
            sl = slice(seg.start, seg.start + seg.length)
            valid = m[sl]
            if not valid.any():
                continue
            n_pred += 1
            if seg.label != NO_CLASS and np.sum((g[sl] == seg.label) & valid) * 2 > valid.sum():
                hit_pred += 1
    precision = hit_pred / n_pred if n_pred else 0.0
    recall = hit_gt / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def length_histogram(lengths: Sequence[int], bin_width: int = BIN_WIDTH,
                     n_bins: Optional[int] = None, normalize: bool = True) -> np.ndarray:
    """Histogram of segment lengths over right-open bins ``[i*w, (i+1)*w)``."""
    if bin_width < 1:
        raise MetricError("bin_width must be >= 1")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        raise MetricError("no segments to histogram")
    idx = lengths // bin_width
    if n_bins is None:
        n_bins = int(idx.max()) + 1
    if idx.max() >= n_bins:
        raise MetricError(f"{n_bins} bins cannot hold length {lengths.max()}")
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    return counts / counts.sum() if normalize else counts


def paired_histograms(pred_labels: Sequence[int], gt_labels: Sequence[int],
                      bin_width: int = BIN_WIDTH) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised length histograms of two labelings on a shared support."""
    lp = [s.length for s in extract_segments(pred_labels)]
    lg = [s.length for s in extract_segments(gt_labels)]
    n_bins = max(max(lp), max(lg)) // bin_width + 1
    return length_histogram(lp, bin_width, n_bins), length_histogram(lg, bin_width, n_bins)


def jsdist(P: np.ndarray, Q: np.ndarray) -> float:
    """Jensen-Shannon distance with base-2 logs, in ``[0, 1]``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise MetricError(f"histogram supports differ: {P.shape} vs {Q.shape}")
    M = 0.5 * (P + Q)

    def kl(A: np.ndarray) -> float:
        nz = A > 0
        return float(np.sum(A[nz] * np.log2(A[nz] / M[nz])))

    return float(np.sqrt(max(0.5 * (kl(P) + kl(Q)), 0.0)))


def activity_jsd(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                 bin_width: int = BIN_WIDTH) -> float:
    """Mean per-video JSD between predicted and true segment-length histograms."""
    return float(np.mean([jsdist(*paired_histograms(p, g, bin_width)) for p, g in zip(pred, gt)]))


def jsd_dataset(per_activity: Mapping[str, Tuple[float, int]]) -> float:
    """Frame-weighted mean of per-activity JSD values ``{name: (jsd, n_frames)}``."""
    if not per_activity:
        raise MetricError("no activities")
    num = sum(j * n for j, n in per_activity.values())
    den = sum(n for _, n in per_activity.values())
    return num / den


@dataclass
class ActivityMetrics:
    mof: float
    precision: float
    recall: float
    f1: float
    jsd: Optional[float]
    n_frames: int
    mapping: Dict[int, int]


@dataclass
class MetricsReport:
    activities: Dict[str, ActivityMetrics] = field(default_factory=dict)
    mof: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    jsd: Optional[float] = None
    f1_activity_mean: float = 0.0
    mof_weighted: float = 0.0
    f1_weighted: float = 0.0

    def to_dict(self) -> dict:
        """Percent-scaled document; ``jsd`` keys are absent when not reported."""
        def block(m) -> dict:
            out = {"MoF": 100 * m.mof, "precision": 100 * m.precision,
                   "recall": 100 * m.recall, "F1": 100 * m.f1}
            if m.jsd is not None:
                out["JSD"] = 100 * m.jsd
            return out

        doc = {"aggregate": block(self), "activities": {}}
        doc["aggregate"]["MoF_frame_weighted"] = 100 * self.mof_weighted
        doc["aggregate"]["F1_frame_weighted"] = 100 * self.f1_weighted
        doc["aggregate"]["F1_activity_mean"] = 100 * self.f1_activity_mean
        for name, m in self.activities.items():
            entry = block(m)
            entry["frames"] = m.n_frames
            entry["mapping"] = {str(k): v for k, v in sorted(m.mapping.items())}
            doc["activities"][name] = entry
        return doc


def evaluate_activity(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                      background: Optional[int] = None, report_jsd: bool = True,
                      names: Optional[Sequence[str]] = None) -> ActivityMetrics:
    pred = [np.asarray(p) for p in pred]
    gt = [np.asarray(g) for g in gt]
    mapping = hungarian_match(pred, gt, background, names)
    precision, recall, f1 = precision_recall_f1(pred, gt, mapping, background)
    jsd = activity_jsd(pred, gt) if report_jsd and background is None else None
    return ActivityMetrics(mof(pred, gt, mapping, background), precision, recall, f1, jsd,
                           int(sum(len(g) for g in gt)), mapping)


def evaluate(pred: Mapping[str, Sequence[np.ndarray]], gt: Mapping[str, Sequence[np.ndarray]],
             background: Optional[Mapping[str, Optional[int]] | int] = None,
             report_jsd: bool = True,
             names: Optional[Mapping[str, Sequence[str]]] = None) -> MetricsReport:
    """Full protocol over activities ``{name: [labels per video]}``.

    MoF, precision, recall and F1 are macro-averaged over activities; JSD is
    frame-weighted and omitted entirely once background masking is on.
    """
    if set(pred) != set(gt):
        raise MetricError(f"activity sets differ: {sorted(set(pred) ^ set(gt))}")
    if not pred:
        raise MetricError("nothing to evaluate")
    report = MetricsReport()
    masked = False
    for act in sorted(pred):
        bg = background.get(act) if isinstance(background, Mapping) else background
        masked |= bg is not None
        report.activities[act] = evaluate_activity(
            pred[act], gt[act], bg, report_jsd, None if names is None else names.get(act))
    acts = list(report.activities.values())
    report.mof = float(np.mean([a.mof for a in acts]))
    report.precision = float(np.mean([a.precision for a in acts]))
    report.recall = float(np.mean([a.recall for a in acts]))
    # Aggregate F1 is the harmonic mean of the aggregate precision and recall;
    # the plain mean of per-activity F1 is kept alongside.
    p, r = report.precision, report.recall
    report.f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    report.f1_activity_mean = float(np.mean([a.f1 for a in acts]))
    weights = np.array([a.n_frames for a in acts], dtype=np.float64)
    report.mof_weighted = float(np.average([a.mof for a in acts], weights=weights))
    report.f1_weighted = float(np.average([a.f1 for a in acts], weights=weights))
    if report_jsd and not masked:
        report.jsd = jsd_dataset({n: (a.jsd, a.n_frames) for n, a in report.activities.items()})
    else:
        for a in acts:
            a.jsd = None
    return report
