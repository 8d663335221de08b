"""Localization metrics: IoU / AP / AUC for single sources, class-aware
CIoU / CAP / AUC for multiple sources.

Conventions (fixed here because they drift between codebases):

* a heatmap is binarised at ``threshold_frac * max`` (0.5 by default);
  a map whose maximum is not positive binarises to the empty mask;
* boxes are ``(class, x0, y0, x1, y1)`` in pixels with exclusive ends;
* each predicted source is scored against the boxes of its class, taking
  the best-scoring box when the class has several; a class without a box
  scores 0;
* success at threshold ``t`` means ``score >= t``; a multi-source sample
  succeeds only if every source does (``rule="all"``), or sources are
  counted individually with ``rule="per_source"``;
* AUC is the mean success rate over thresholds ``0.00, 0.05, ..., 0.95``;
* AP uses all-points interpolation over samples ranked by confidence
  (the peak heatmap value), with stable ordering for ties.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

AUC_THRESHOLDS = np.arange(20) / 20.0
SINGLE_IOU_THRESHOLD = 0.5
MULTI_CIOU_THRESHOLD = 0.3


@dataclass
class HeatmapPrediction:
    per_source: np.ndarray  # (K, H, W)
    class_assignments: list

    def __post_init__(self):
        self.per_source = np.asarray(self.per_source, dtype=np.float64)
        if self.per_source.ndim == 2:
            self.per_source = self.per_source[None]
        if self.per_source.ndim != 3:
            raise DimensionError("per_source must be (K, H, W)")
        if len(self.class_assignments) != self.per_source.shape[0]:
            raise ValidationError("need one class assignment per source map")
        if not np.all(np.isfinite(self.per_source)):
            raise ValidationError("heatmaps must be finite")

    @property
    def K(self):
        return self.per_source.shape[0]


def binarize(heatmap, threshold_frac=0.5):
    m = np.asarray(heatmap, dtype=np.float64)
    peak = m.max()
    if peak <= 0:
        return np.zeros(m.shape, dtype=bool)
    return m >= threshold_frac * peak


def box_mask(box, shape):
    """Boolean mask of ``(x0, y0, x1, y1)`` (a leading class entry is ignored)."""
    if len(box) == 5:
        box = box[1:]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    out = np.zeros(shape, dtype=bool)
    out[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return out


def mask_iou(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def ciou(pred: HeatmapPrediction, gt_boxes, threshold_frac=0.5):
    """Class-aware IoU of every predicted source; returns a list of K scores."""
    shape = pred.per_source.shape[1:]
    scores = []
    for heat, cls in zip(pred.per_source, pred.class_assignments):
        binary = binarize(heat, threshold_frac)
        candidates = [b for b in gt_boxes if b[0] == cls]
        if not candidates:
            scores.append(0.0)
            continue
        scores.append(max(mask_iou(binary, box_mask(b, shape)) for b in candidates))
    return scores


def _sample_scores(scores, rule):
    """Per-sample pass values for thresholding: a list of score lists."""
    out = []
    for s in scores:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if s.size == 0:
            raise ValidationError("sample with no source scores")
        if np.any((s < 0) | (s > 1)):
            raise ValidationError("scores must lie in [0, 1]")
        out.append(s)
    if not out:
        raise ValidationError("cannot compute a success rate over no samples")
    if rule == "all":
        return np.array([s.min() for s in out])
    if rule == "per_source":
        return np.concatenate(out)
    raise ValidationError(f"unknown rule {rule!r}")


def success_rate(scores, thr, rule="all"):
    """Fraction of samples whose score reaches ``thr``.

    ``scores`` holds one entry per sample: a float, or a sequence of
    per-source scores for multi-source samples.
    """
    vals = _sample_scores(scores, rule)
    return float(np.mean(vals >= thr))


def auc(scores, rule="all"):
    """Mean success rate over the 20 thresholds 0.00 ... 0.95."""
    vals = _sample_scores(scores, rule)
    return float(np.mean([np.mean(vals >= t) for t in AUC_THRESHOLDS]))


def average_precision(confidences, successes):
    """All-points interpolated AP of a ranked list of localisations."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(successes, dtype=bool)
    if conf.shape != hit.shape:
        raise DimensionError("confidences and successes differ in length")
    n_pos = int(hit.sum())
    if n_pos == 0:
        warnings.warn("no successful localisations; AP is 0", RuntimeWarning)
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(hit[order])
    precision = tp / np.arange(1, hit.size + 1)
    recall = tp / n_pos
    # precision envelope, then integrate over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def class_aware_ap(confidences, successes, classes):
    """Mean over classes of the AP of that class's source predictions."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(successes, dtype=bool)
    classes = np.asarray(classes)
    aps = []
    for c in sorted(set(classes.tolist())):
        sel = classes == c
        if hit[sel].any():
            aps.append(average_precision(conf[sel], hit[sel]))
        else:
            aps.append(0.0)
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class MetricReport:
    mode: str
    ap: float | None = None
    iou_at_05: float | None = None
    cap: float | None = None
    ciou_at_03: float | None = None
    auc: float | None = None
    n_samples: int = 0
    flagged: int = 0
    per_sample: list = field(default_factory=list)

    def summary(self):
        d = asdict(self)
        d.pop("per_sample")
        return {k: v for k, v in d.items() if v is not None}

    def to_json(self):
        return json.dumps({**self.summary(), "per_sample": self.per_sample}, indent=2, sort_keys=True)

    def to_table(self):
        rows = [f"{k:>12}  {v:.4f}" if isinstance(v, float) else f"{k:>12}  {v}"
                for k, v in self.summary().items()]
        return "\n".join(rows)

    def to_csv(self):
        buf = io.StringIO()
        if self.per_sample:
            writer = csv.DictWriter(buf, fieldnames=list(self.per_sample[0].keys()))
            writer.writeheader()
            writer.writerows(self.per_sample)
        return buf.getvalue()


def evaluate_single(predictions, gt_boxes_list, clip_ids=None, threshold_frac=0.5):
    """AP, IoU@0.5 and AUC over single-source predictions."""
    ious, confs, rows = [], [], []
    for i, (pred, boxes) in enumerate(zip(predictions, gt_boxes_list)):
        score = ciou(pred, boxes, threshold_frac)[0]
        ious.append(score)
        confs.append(float(pred.per_source[0].max()))
        rows.append({"clip_id": clip_ids[i] if clip_ids else str(i), "iou": score,
                     "confidence": confs[-1]})
    hits = np.asarray(ious) >= SINGLE_IOU_THRESHOLD
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ap = average_precision(confs, hits)
    return MetricReport("single", ap=ap, iou_at_05=success_rate(ious, SINGLE_IOU_THRESHOLD),
                        auc=auc(ious), n_samples=len(ious), per_sample=rows)


def evaluate_multi(predictions, gt_boxes_list, clip_ids=None, threshold_frac=0.5, rule="all",
                   flagged=0):
    """CAP, CIoU@0.3 and AUC over multi-source predictions."""
    sample_scores, confs, hits, classes, rows = [], [], [], [], []
    for i, (pred, boxes) in enumerate(zip(predictions, gt_boxes_list)):
        scores = ciou(pred, boxes, threshold_frac)
        sample_scores.append(scores)
        for k, s in enumerate(scores):
            confs.append(float(pred.per_source[k].max()))
            hits.append(s >= MULTI_CIOU_THRESHOLD)
            classes.append(pred.class_assignments[k])
        rows.append({"clip_id": clip_ids[i] if clip_ids else str(i),
                     **{f"ciou_src{k}": s for k, s in enumerate(scores)}})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cap = class_aware_ap(confs, hits, classes)
    return MetricReport("multi", cap=cap,
                        ciou_at_03=success_rate(sample_scores, MULTI_CIOU_THRESHOLD, rule),
                        auc=auc(sample_scores, rule), n_samples=len(sample_scores),
                        flagged=flagged, per_sample=rows)
