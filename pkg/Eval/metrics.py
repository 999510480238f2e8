# -*- encoding: utf-8 -*-
"""AP / mAP, motion-speed bucketed mAP and the feature-variance report."""
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from VOD.faim.geometry import pairwise_iou

IOU_RANGE = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
BUCKETS = ('Slow', 'Medium', 'Fast')


@dataclass
class Detection():
    frame_id: Hashable
    box: np.ndarray
    class_id: int
    score: float


@dataclass
class GroundTruth():
    frame_id: Hashable
    box: np.ndarray
    class_id: int
    bucket: Optional[str] = None


@dataclass
class EvalReport():
    ap: Dict[int, Dict[float, float]]
    map50: float
    map75: float
    map50_95: float
    bucket_map50: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def to_json(self, class_names: Optional[Sequence[str]] = None) -> Dict:
        def name(c: int) -> str:
            return class_names[c] if class_names is not None else str(c)
        return {
            'ap': {name(c): {f'{t:.2f}': v for t, v in sorted(per.items())} for c, per in sorted(self.ap.items())},
            'map50': self.map50, 'map75': self.map75, 'map50_95': self.map50_95,
            'bucket_map50': dict(self.bucket_map50), 'counts': dict(self.counts)}


def _group_gts(gts: Sequence[GroundTruth]) -> Dict[Hashable, np.ndarray]:
    grouped = defaultdict(list)
    for g in gts:
        grouped[g.frame_id].append(g.box)
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in grouped.items()}


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_thr: float) -> Tuple[np.ndarray, np.ndarray]:
    """Score-ordered VOC matching for one class -> (order, tp flags).

    Each detection takes its max-IoU ground truth in the same frame; it is a
    true positive if that IoU >= iou_thr and the ground truth is still free.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind='stable')
    by_frame = _group_gts(gts)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in by_frame.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        boxes = by_frame.get(dets[i].frame_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = pairwise_iou(dets[i].box, boxes)[0]
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_thr and not used[dets[i].frame_id][j]:
            used[dets[i].frame_id][j] = True
            tp[rank] = True
    return order, tp


def ap_from_flags(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP flags."""
    if num_gt == 0:
        return float('nan')
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    # precision envelope: max precision at recall >= r
    mpre = np.maximum.accumulate(mpre[::-1])[::-1][:-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float) -> float:
    """AP of one class; NaN when there is no ground truth."""
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f'iou_thr must lie in (0, 1), got {iou_thr}')
    _, tp = match_detections(dets, gts, iou_thr)
    return ap_from_flags(tp, len(gts))


def _by_class(items) -> Dict[int, list]:
    grouped = defaultdict(list)
    for item in items:
        grouped[int(item.class_id)].append(item)
    return grouped


def map_at(dets: Sequence[Detection], gts: Sequence[GroundTruth],
           thresholds: Sequence[float] = IOU_RANGE) -> EvalReport:
    """Per-class AP at each threshold, unweighted class means over classes with GT."""
    if not gts:
        raise ValueError('no ground truth in any class')
    thresholds = sorted(set(float(t) for t in thresholds) | {0.5, 0.75})
    det_groups, gt_groups = _by_class(dets), _by_class(gts)
    ap = {c: {t: average_precision(det_groups.get(c, []), gt_groups[c], t) for t in thresholds}
          for c in sorted(gt_groups)}

    def mean_at(ts: Sequence[float]) -> float:
        return float(np.mean([np.mean([ap[c][t] for t in ts]) for c in ap]))

    return EvalReport(ap=ap, map50=mean_at([0.5]), map75=mean_at([0.75]),
                      map50_95=mean_at([t for t in thresholds if t in IOU_RANGE]),
                      counts={'detections': len(dets), 'ground_truths': len(gts),
                              'classes': len(ap)})


def bucket_map(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> Dict[str, float]:
    """map50 per motion-speed bucket.

    Ground truths are partitioned by bucket. A detection whose max-IoU ground
    truth (same class and frame) reaches iou_thr belongs to that ground
    truth's bucket; any other detection is a false positive in every bucket.
    Buckets without ground truth are absent.
    """
    det_buckets: List[Optional[str]] = []
    gt_groups = _by_class(gts)
    for d in dets:
        candidates = [g for g in gt_groups.get(int(d.class_id), []) if g.frame_id == d.frame_id]
        bucket = None
        if candidates:
            overlaps = pairwise_iou(d.box, np.array([g.box for g in candidates]))[0]
            j = int(np.argmax(overlaps))
            if overlaps[j] >= iou_thr:
                bucket = candidates[j].bucket
        det_buckets.append(bucket)

    result = {}
    for bucket in BUCKETS:
        bucket_gts = [g for g in gts if g.bucket == bucket]
        if not bucket_gts:
            continue
        bucket_dets = [d for d, b in zip(dets, det_buckets) if b is None or b == bucket]
        report = map_at(bucket_dets, bucket_gts, [iou_thr])
        result[bucket] = float(np.mean([per[float(iou_thr)] for per in report.ap.values()]))
    return result


def feature_variance_report(features: Mapping[Hashable, np.ndarray]) -> Tuple[float, float, float]:
    """(intra, inter, intra / inter) for features grouped by class.

    intra is the mean squared distance of every sample to its class centroid;
    inter is the mean squared distance over all pairs of class centroids.
    """
    if len(features) < 2:
        raise ValueError(f'need at least 2 classes, got {len(features)}')
    centroids, sq = [], []
    for key, rows in features.items():
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise ValueError(f'class {key!r} needs at least 2 samples')
        centroid = rows.mean(axis=0)
        centroids.append(centroid)
        sq.append(((rows - centroid) ** 2).sum(axis=1))
    intra = float(np.concatenate(sq).mean())
    c = np.array(centroids)
    diff = ((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(len(c), k=1)
    inter = float(diff[iu].mean())
    ratio = intra / inter if inter > 0 else float('inf')
    return intra, inter, ratio
