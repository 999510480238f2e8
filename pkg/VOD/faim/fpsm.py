# -*- encoding: utf-8 -*-
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .detector import Candidates
from .geometry import as_boxes, is_valid, nms, roi_align_batch
from .numerics import Tensor, concat
from .utils import ShapeError

BOX_POOL_SAMPLES = 4


@dataclass
class ProposalSet():
    """Refined proposals of one frame with row-aligned features."""
    frame_index: int
    boxes: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    cls_feats: Optional[Tensor]
    ins_feats: Optional[Tensor]
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def empty(self) -> bool:
        return len(self) == 0


def flatten_levels(maps: Sequence[Tensor]) -> Tensor:
    """Per-level [C, H, W] maps -> [sum(H*W), C], rows in candidate order."""
    rows = []
    for fmap in maps:
        c, h, w = fmap.shape
        rows.append(fmap.reshape(c, h * w).transpose(1, 0))
    return concat(rows, axis=0)


def rank(candidates: Candidates, k: int, nms_threshold: float, n_cap: int) -> np.ndarray:
    """Indices into candidates: valid boxes -> top-k -> class-agnostic NMS -> n_cap."""
    if not 1 <= n_cap <= k:
        raise ValueError(f'need k >= n_cap >= 1, got k={k} n_cap={n_cap}')
    if len(candidates) == 0:
        return np.zeros(0, dtype=np.int64)
    valid = np.flatnonzero(is_valid(candidates.boxes))
    order = valid[np.argsort(-candidates.scores[valid], kind='stable')][:k]
    kept = nms(candidates.boxes[order], candidates.scores[order], nms_threshold)
    return order[np.asarray(kept[:n_cap], dtype=np.int64)]


def select(candidates: Candidates, f_cls: Sequence[Tensor], f_ins: Optional[Sequence[Tensor]],
           k: int, nms_threshold: float, n_cap: int, frame_index: int = 0) -> ProposalSet:
    """Top-k by score, class-agnostic NMS, truncation to n_cap.

    f_cls and f_ins are the per-level maps of this frame; row i of the gathered
    features comes from the cell that produced boxes[i]. An empty candidate list
    gives an empty ProposalSet.
    """
    index = rank(candidates, k, nms_threshold, n_cap)
    cls_feats = ins_feats = None
    if index.size:
        cls_feats = flatten_levels(f_cls)[index]
        if f_ins is not None:
            ins_feats = flatten_levels(f_ins)[index]
    return ProposalSet(frame_index=frame_index,
                       boxes=candidates.boxes[index].copy(),
                       scores=candidates.scores[index].copy(),
                       class_ids=candidates.class_ids[index].copy(),
                       cls_feats=cls_feats, ins_feats=ins_feats,
                       levels=candidates.levels[index].copy(),
                       cells=candidates.cells[index].copy())


def with_box_features(proposals: ProposalSet, features: Sequence[Tensor],
                      strides: Sequence[int]) -> ProposalSet:
    """Instance features by RoIAlign box averaging on each proposal's own level."""
    if proposals.empty:
        return replace(proposals, ins_feats=None)
    channels = features[0].shape[0]
    rows: List[Optional[Tensor]] = [None] * len(proposals)
    for li, (fmap, stride) in enumerate(zip(features, strides)):
        members = np.flatnonzero(proposals.levels == li)
        if members.size == 0:
            continue
        _, h, w = fmap.shape
        rois = as_boxes(proposals.boxes[members]) / stride
        rois[:, 0::2] = np.clip(rois[:, 0::2], 0, w)
        rois[:, 1::2] = np.clip(rois[:, 1::2], 0, h)
        if not is_valid(rois).all():
            raise ShapeError('proposal box collapsed on its feature level')
        pooled = roi_align_batch(fmap, rois, 1, 1, BOX_POOL_SAMPLES).reshape(members.size, channels)
        for j, row in enumerate(members):
            rows[row] = pooled[j:j + 1]
    return replace(proposals, ins_feats=concat(rows, axis=0))
