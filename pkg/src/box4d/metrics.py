"""Detection and temporal-consistency metrics.

* AP3D: per-frame matching by 3D IoU at ten thresholds 0.05 ... 0.50,
  greedy by descending score, all-points interpolated precision.
* F1 at a single IoU threshold over predictions with ``score >= score_min``.
* Var_v / Var_c: per tracked instance, the mean Chamfer distance between
  each frame's world-frame corners and the per-corner average box, and the
  mean distance between centers. Dataset values average over instances.

Predictions and ground truth are both lists of
:class:`box4d.dataset.PredictionRecord`; ground truth comes from
:func:`box4d.dataset.ground_truth_predictions`.
"""

from collections import defaultdict
from dataclasses import dataclass, field
import json
import logging

import numpy as np

from . import geometry as geo
from .errors import InstanceMismatch

log = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 11))


@dataclass
class MatchResult:
    pairs: list  # (pred index, gt index, iou)
    unmatched_preds: list
    unmatched_gts: list

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.unmatched_preds)

    @property
    def fn(self):
        return len(self.unmatched_gts)


def _key(r):
    return (r.sequence_id, r.frame)


def _compatible(p, g):
    return p.category is None or g.category is None or p.category == g.category


def _score_order(preds):
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


class IoUCache:
    """Pairwise IoU of predictions and GT sharing a frame, computed once."""

    def __init__(self, preds, gts):
        self.preds, self.gts = preds, gts
        by_frame = defaultdict(list)
        for j, g in enumerate(gts):
            by_frame[_key(g)].append(j)
        self.by_frame = by_frame
        self._iou = {}
        for i, p in enumerate(preds):
            for j in by_frame.get(_key(p), ()):
                if _compatible(p, gts[j]):
                    self._iou[i, j] = geo.iou3d(p.box, gts[j].box)

    def candidates(self, i):
        p = self.preds[i]
        return [(j, self._iou[i, j]) for j in self.by_frame.get(_key(p), ()) if (i, j) in self._iou]


def match_predictions(preds, gts, tau, cache=None, order=None):
    """Greedy one-to-one matching at IoU threshold ``tau``.

    Predictions are visited by descending score; each takes the unmatched GT
    of the same frame (and category, when both carry one) with the highest
    IoU, provided it is at least ``tau``. Ties go to the lower GT index.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    cache = cache or IoUCache(preds, gts)
    order = _score_order(preds) if order is None else order
    taken = set()
    pairs, missed = [], []
    for i in order:
        best, best_iou = None, -1.0
        for j, iou in cache.candidates(i):
            if j in taken or iou < tau:
                continue
            if iou > best_iou:
                best, best_iou = j, iou
        if best is None:
            missed.append(i)
        else:
            taken.add(best)
            pairs.append((i, best, best_iou))
    unmatched_gts = [j for j in range(len(gts)) if j not in taken]
    return MatchResult(pairs, missed, unmatched_gts)


def average_precision(tp_flags, n_gt):
    """Area under the all-points interpolated PR curve of a score-sorted TP/FP sequence."""
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * envelope))


def ap3d(preds, gts, thresholds=THRESHOLDS, cache=None):
    """Per-threshold AP and their mean; returns ``(dict tau -> AP, mean, counts)``."""
    cache = cache or IoUCache(preds, gts)
    order = _score_order(preds)
    per, counts = {}, {}
    for tau in thresholds:
        m = match_predictions(preds, gts, tau, cache, order)
        matched = {i for i, _, _ in m.pairs}
        flags = [i in matched for i in order]
        per[tau] = average_precision(flags, len(gts))
        counts[tau] = {"tp": m.tp, "fp": m.fp, "fn": m.fn}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean, counts


def f1_at_iou(preds, gts, tau, score_min=0.5, cache=None):
    """``2 TP / (2 TP + FP + FN)`` over predictions scoring at least ``score_min``."""
    order = [i for i in _score_order(preds) if preds[i].score >= score_min]
    m = match_predictions(preds, gts, tau, cache, order)
    if m.tp == 0:
        return 0.0
    return 2.0 * m.tp / (2.0 * m.tp + m.fp + m.fn)


# ---------------------------------------------------------------------------
# temporal variance


def variance_metrics(world_boxes):
    """``(Var_v, Var_c)`` of one instance's world-frame boxes over its frames.

    The average box is the per-corner mean of the canonical corner arrays,
    so its center is the mean of the centers.
    """
    if len(world_boxes) == 0:
        raise ValueError("need at least one box")
    corners = np.stack([geo.box_corners(b) for b in world_boxes])
    mean = corners.mean(axis=0)
    centers = np.stack([b.center for b in world_boxes])
    var_v = float(np.mean([geo.chamfer(c, mean) for c in corners]))
    var_c = float(np.mean(np.linalg.norm(centers - mean.mean(axis=0), axis=1)))
    return var_v, var_c


def instance_tracks(preds, gts, poses, skip_missing=True):
    """World-frame boxes per ``(sequence, instance)`` from camera-frame predictions.

    Args:
        poses: ``{sequence_id: [camera-to-world RigidTransform per frame]}``
            (ground-truth poses).
        skip_missing: frames where a GT instance has no prediction are
            skipped; with ``False`` they raise :class:`InstanceMismatch`.

    Several predictions of one instance in one frame: the highest score wins.
    """
    gt_ids = defaultdict(set)
    gt_frames = defaultdict(set)
    for g in gts:
        gt_ids[g.sequence_id].add(g.instance_id)
        gt_frames[g.sequence_id, g.instance_id].add(g.frame)
    best = {}
    for p in preds:
        if p.instance_id is None:
            raise InstanceMismatch(f"{p.sequence_id} frame {p.frame}: prediction without instance id")
        if p.instance_id not in gt_ids.get(p.sequence_id, ()):
            raise InstanceMismatch(f"{p.sequence_id}: instance {p.instance_id} not in ground truth")
        k = (p.sequence_id, p.instance_id, p.frame)
        if k not in best or p.score > best[k].score:
            best[k] = p
    if not skip_missing:
        for (seq, inst), frames in sorted(gt_frames.items()):
            for f in sorted(frames):
                if (seq, inst, f) not in best:
                    raise InstanceMismatch(f"{seq}: instance {inst} has no prediction in frame {f}")
    tracks = defaultdict(list)
    for (seq, inst, frame) in sorted(best):
        if seq not in poses or frame >= len(poses[seq]):
            raise InstanceMismatch(f"{seq}: no ground-truth pose for frame {frame}")
        tracks[seq, inst].append(geo.transform_box(poses[seq][frame], best[seq, inst, frame].box))
    return dict(tracks)


def dataset_variance(preds, gts, poses, skip_missing=True):
    """Instance-weighted means of Var_v and Var_c; ``(None, None, 0)`` if there is nothing to track."""
    tracks = instance_tracks(preds, gts, poses, skip_missing)
    if not tracks:
        return None, None, 0
    vals = [variance_metrics(tracks[k]) for k in sorted(tracks)]
    return float(np.mean([v for v, _ in vals])), float(np.mean([c for _, c in vals])), len(vals)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    ap_per_threshold: dict
    ap_mean: float
    f1_25: float
    f1_50: float
    var_v: float = None
    var_c: float = None
    n_instances: int = 0
    counts: dict = field(default_factory=dict)
    n_predictions: int = 0
    n_ground_truth: int = 0
    per_category: dict = None

    def to_dict(self):
        d = {
            "ap3d": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "ap3d_mean": self.ap_mean,
            "f1@0.25": self.f1_25,
            "f1@0.50": self.f1_50,
            "var_v": self.var_v,
            "var_c": self.var_c,
            "n_instances": self.n_instances,
            "counts": {f"{t:.2f}": c for t, c in self.counts.items()},
            "n_predictions": self.n_predictions,
            "n_ground_truth": self.n_ground_truth,
        }
        if self.per_category is not None:
            d["per_category_ap3d_mean"] = self.per_category
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_table(self):
        """Tab-separated ``metric value`` rows; absent values print as ``NA``."""
        rows = [("ap3d_mean", self.ap_mean)]
        rows += [(f"ap3d@{t:.2f}", v) for t, v in self.ap_per_threshold.items()]
        rows += [("f1@0.25", self.f1_25), ("f1@0.50", self.f1_50), ("var_v", self.var_v), ("var_c", self.var_c)]
        rows += [("n_instances", self.n_instances), ("n_predictions", self.n_predictions),
                 ("n_ground_truth", self.n_ground_truth)]
        if self.per_category:
            rows += [(f"ap3d_mean[{c}]", v) for c, v in sorted(self.per_category.items())]

        def fmt(v):
            if v is None:
                return "NA"
            if isinstance(v, int):
                return str(v)
            return f"{v:.6f}"

        return "metric\tvalue\n" + "".join(f"{k}\t{fmt(v)}\n" for k, v in rows)


def evaluate(preds, gts, poses, score_min=0.5, skip_missing=True, per_category=False):
    """Full report. Variance metrics are reported as absent when instance ids do not line up."""
    cache = IoUCache(preds, gts)
    per, mean, counts = ap3d(preds, gts, cache=cache)
    f1_25 = f1_at_iou(preds, gts, 0.25, score_min, cache)
    f1_50 = f1_at_iou(preds, gts, 0.5, score_min, cache)
    try:
        var_v, var_c, n_inst = dataset_variance(preds, gts, poses, skip_missing)
    except InstanceMismatch as e:
        log.warning("variance metrics skipped: %s", e)
        var_v, var_c, n_inst = None, None, 0
    cats = None
    if per_category:
        cats = {}
        for c in sorted({g.category for g in gts if g.category is not None}):
            cp = [p for p in preds if p.category in (c, None)]
            cg = [g for g in gts if g.category == c]
            cats[c] = ap3d(cp, cg)[1]
    return MetricsReport(per, mean, f1_25, f1_50, var_v, var_c, n_inst, counts, len(preds), len(gts), cats)
