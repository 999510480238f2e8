# -*- encoding: utf-8 -*-
"""Box and mask kernels.

Boxes are half-open pixel rectangles ``[x1, x2) x [y1, y2)`` stored as
``[x1, y1, x2, y2]`` float arrays. Masks are boolean ``[H, W]`` arrays.
"""
from typing import List, Optional, Sequence, Union

import numpy as np

from .numerics import Tensor, interpolation_matrix, roi_resample
from .utils import GeometryError, ShapeError

BoxLike = Union[np.ndarray, Sequence[float]]


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return arr


def is_valid(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])


def _check_valid(boxes: np.ndarray) -> None:
    bad = ~is_valid(boxes)
    if bad.any():
        raise GeometryError(f'degenerate box {boxes[np.argmax(bad)].tolist()}')


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix [len(a), len(b)]; every box must be valid."""
    a, b = as_boxes(a), as_boxes(b)
    _check_valid(a)
    _check_valid(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def iou(a: BoxLike, b: BoxLike) -> float:
    return float(pairwise_iou(a, b)[0, 0])


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f'mask shapes differ: {a.shape} vs {b.shape}')
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def nms(boxes, scores, threshold: float) -> List[int]:
    """Greedy NMS. Returns kept indices, score-descending, ties by lower index.

    A box is suppressed when its IoU with an already kept box exceeds
    ``threshold``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f'nms threshold must lie in (0, 1], got {threshold}')
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ShapeError(f'{len(boxes)} boxes but {len(scores)} scores')
    if len(boxes) == 0:
        return []
    order = np.argsort(-scores, kind='stable')
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > threshold
    return keep


def roi_align(fmap: Tensor, roi: BoxLike, outH: int, outW: int, samples_per_bin: int = 2) -> Tensor:
    """Pool one RoI (feature-map coordinates) from fmap [C, H, W] to [C, outH, outW]."""
    pooled = roi_align_batch(fmap, as_boxes(roi), outH, outW, samples_per_bin)
    return pooled.reshape(pooled.shape[1:])


def roi_align_batch(fmap: Tensor, rois, outH: int, outW: int, samples_per_bin: int = 2) -> Tensor:
    """Pool N RoIs to [N, C, outH, outW].

    Each output bin is the mean of samples_per_bin**2 bilinear samples on a
    regular grid inside the bin, with half-pixel centers.
    """
    if samples_per_bin < 1:
        raise ValueError(f'samples_per_bin must be >= 1, got {samples_per_bin}')
    if fmap.ndim != 3:
        raise ShapeError(f'fmap must be [C, H, W], got {fmap.shape}')
    rois = as_boxes(rois)
    if len(rois) == 0:
        raise ShapeError('roi_align_batch needs at least one RoI')
    _check_valid(rois)
    _, h, w = fmap.shape
    ry = np.stack([interpolation_matrix(h, outH, r[1], r[3] - r[1], samples_per_bin) for r in rois])
    rx = np.stack([interpolation_matrix(w, outW, r[0], r[2] - r[0], samples_per_bin) for r in rois])
    return roi_resample(fmap, ry, rx)


def box_from_mask(mask: np.ndarray) -> Optional[np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def box_to_mask(box: BoxLike, height: int, width: int) -> np.ndarray:
    """Filled rectangle; fractional edges are rounded outward, clipped to the image."""
    x1, y1, x2, y2 = as_boxes(box)[0]
    mask = np.zeros((height, width), dtype=bool)
    c1, r1 = max(int(np.floor(x1)), 0), max(int(np.floor(y1)), 0)
    c2, r2 = min(int(np.ceil(x2)), width), min(int(np.ceil(y2)), height)
    mask[r1:r2, c1:c2] = True
    return mask


def clip_boxes(boxes, height: int, width: int) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def rle_encode(mask: np.ndarray) -> List[int]:
    """Alternating run lengths, row-major, starting with the zero run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != height * width:
        raise ShapeError(f'RLE covers {counts.sum()} pixels, expected {height * width}')
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)
