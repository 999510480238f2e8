# -*- encoding: utf-8 -*-
"""Temporal aggregation of per-proposal classification and instance queries.

Each modality goes through its own multi-head self-attention block over all
rows of the clip; the two results are concatenated, linearly fused and fed
to a C+1 way classifier (the last logit is background).
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .fpsm import ProposalSet
from .geometry import pairwise_iou
from .numerics import (Parameters, Tensor, concat, cross_entropy,
                       init_attention, linear, multi_head_attention, softmax)
from .utils import AlignmentError, NoProposalsError, ShapeError

BACKGROUND_IOU = 0.5


@dataclass
class QueryBank():
    q_cls: Tensor
    q_ins: Tensor
    origin: List[Tuple[int, int]]
    m_frames: int

    def __len__(self) -> int:
        return len(self.origin)


@dataclass
class AggregatedFeatures():
    features: Tensor
    class_logits: Tensor


@dataclass
class FrameDetections():
    frame_index: int
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


def sample_frames(num_frames: int, m: int, rng: np.random.Generator, mode: str = 'global',
                  m_local: int = 0, key_frame: Optional[int] = None) -> np.ndarray:
    """Sorted frame indices drawn without replacement.

    global: m uniformly random frames. local: the contiguous window of m
    frames around the key frame. mixed: a local window of m_local frames
    around the key frame plus m - m_local global frames from the rest.
    """
    if num_frames < 1 or m < 1:
        raise ValueError(f'need num_frames >= 1 and m >= 1, got {num_frames}, {m}')
    m = min(m, num_frames)
    if key_frame is None:
        key_frame = int(rng.integers(num_frames))

    def window(size: int) -> np.ndarray:
        start = int(np.clip(key_frame - size // 2, 0, num_frames - size))
        return np.arange(start, start + size)

    if mode == 'global':
        return np.sort(rng.choice(num_frames, size=m, replace=False))
    if mode == 'local':
        return window(m)
    if mode == 'mixed':
        local = window(min(max(m_local, 1), m))
        rest = np.setdiff1d(np.arange(num_frames), local)
        extra = rng.choice(rest, size=m - len(local), replace=False) if m > len(local) else []
        return np.sort(np.concatenate([local, np.asarray(extra, dtype=np.int64)]))
    raise ValueError(f'unknown frame sampling mode {mode!r}')


def init_ticam(params: Parameters, cls_channels: int, ins_channels: int, dim: int,
               num_classes: int) -> None:
    params.init_linear('ticam.lp_cls', cls_channels, dim)
    params.init_linear('ticam.lp_ins', ins_channels, dim)
    init_attention(params.scope('ticam.attn_cls'), dim)
    init_attention(params.scope('ticam.attn_ins'), dim)
    params.init_linear('ticam.fuse', 2 * dim, dim)
    params.init_linear('ticam.head', dim, num_classes + 1)


def build_queries(proposal_sets: Sequence[ProposalSet], params: Parameters) -> QueryBank:
    non_empty = [p for p in proposal_sets if not p.empty]
    if not non_empty:
        raise NoProposalsError('no proposals in clip')
    for p in non_empty:
        if p.ins_feats is None or p.cls_feats is None:
            raise ShapeError(f'frame {p.frame_index} lacks proposal features')
    cls_rows = concat([p.cls_feats for p in non_empty], axis=0)
    ins_rows = concat([p.ins_feats for p in non_empty], axis=0)
    origin = [(p.frame_index, i) for p in non_empty for i in range(len(p))]
    return QueryBank(
        q_cls=linear(cls_rows, params['ticam.lp_cls.weight'], params['ticam.lp_cls.bias'], label='ticam.lp'),
        q_ins=linear(ins_rows, params['ticam.lp_ins.weight'], params['ticam.lp_ins.bias'], label='ticam.lp'),
        origin=origin,
        m_frames=len({p.frame_index for p in non_empty}))


def aggregate(bank: QueryBank, params: Parameters, heads: int) -> AggregatedFeatures:
    q_cls, q_ins = bank.q_cls, bank.q_ins
    if q_cls.shape != q_ins.shape or q_cls.shape[0] != len(bank):
        raise ShapeError(f'query bank rows disagree: {q_cls.shape} / {q_ins.shape} / {len(bank)}')
    a_cls = q_cls + multi_head_attention(q_cls, q_cls, q_cls, params.scope('ticam.attn_cls'),
                                         heads, label='attention')
    a_ins = q_ins + multi_head_attention(q_ins, q_ins, q_ins, params.scope('ticam.attn_ins'),
                                         heads, label='attention')
    fused = linear(concat([a_cls, a_ins], axis=1), params['ticam.fuse.weight'],
                   params['ticam.fuse.bias'], label='ticam.fuse')
    logits = linear(fused, params['ticam.head.weight'], params['ticam.head.bias'], label='ticam.head')
    return AggregatedFeatures(features=fused, class_logits=logits)


def _rows_by_frame(proposal_sets: Sequence[ProposalSet], bank: QueryBank) -> List[np.ndarray]:
    rows = []
    position = 0
    for p in proposal_sets:
        if p.empty:
            rows.append(np.zeros(0, dtype=np.int64))
            continue
        expected = [(p.frame_index, i) for i in range(len(p))]
        if bank.origin[position:position + len(p)] != expected:
            raise AlignmentError(f'query rows of frame {p.frame_index} are misaligned')
        rows.append(np.arange(position, position + len(p)))
        position += len(p)
    if position != len(bank):
        raise AlignmentError(f'{len(bank)} query rows but {position} proposals')
    return rows


def final_detections(proposal_sets: Sequence[ProposalSet], bank: QueryBank,
                     agg: AggregatedFeatures, score_fusion: str = 'replace') -> List[FrameDetections]:
    """Boxes pass through from FPSM; class and score come from the aggregated logits.

    The class is the best foreground class; with ``multiply`` the score is
    additionally scaled by the FPSM confidence.
    """
    if agg.class_logits.shape[0] != len(bank):
        raise AlignmentError(f'{agg.class_logits.shape[0]} logit rows for {len(bank)} queries')
    probs = softmax(agg.class_logits.detach()).numpy().astype(np.float64)
    foreground = probs[:, :-1]
    results = []
    for p, rows in zip(proposal_sets, _rows_by_frame(proposal_sets, bank)):
        fg = foreground[rows]
        class_ids = fg.argmax(axis=1) if len(rows) else np.zeros(0, dtype=np.int64)
        scores = fg[np.arange(len(rows)), class_ids] if len(rows) else np.zeros(0)
        if score_fusion == 'multiply':
            scores = scores * p.scores
        elif score_fusion != 'replace':
            raise ValueError(f'unknown score fusion {score_fusion!r}')
        results.append(FrameDetections(frame_index=p.frame_index, boxes=p.boxes.copy(),
                                       class_ids=class_ids, scores=scores))
    return results


def classification_targets(proposal_sets: Sequence[ProposalSet], gt_boxes: Sequence[np.ndarray],
                           gt_classes: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Row labels for the bank: class of the best-IoU GT if IoU >= 0.5, else background."""
    labels = []
    for p, boxes, classes in zip(proposal_sets, gt_boxes, gt_classes):
        if p.empty:
            continue
        row = np.full(len(p), num_classes, dtype=np.int64)
        if len(boxes):
            overlaps = pairwise_iou(p.boxes, boxes)
            best = overlaps.argmax(axis=1)
            hit = overlaps[np.arange(len(p)), best] >= BACKGROUND_IOU
            row[hit] = np.asarray(classes, dtype=np.int64)[best[hit]]
        labels.append(row)
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def ticam_loss(agg: AggregatedFeatures, targets: np.ndarray) -> Tensor:
    return cross_entropy(agg.class_logits, targets).mean()


class TICAM():
    """Binds parameters, head count and score fusion for one clip at a time."""

    def __init__(self, params: Parameters, heads: int, score_fusion: str = 'replace') -> None:
        self.params = params
        self.heads = heads
        self.score_fusion = score_fusion

    def __call__(self, proposal_sets: Sequence[ProposalSet]) -> Tuple[QueryBank, AggregatedFeatures]:
        bank = build_queries(proposal_sets, self.params)
        return bank, aggregate(bank, self.params, self.heads)

    def detections(self, proposal_sets: Sequence[ProposalSet]) -> List[FrameDetections]:
        bank, agg = self(proposal_sets)
        return final_detections(proposal_sets, bank, agg, self.score_fusion)
