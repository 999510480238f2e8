# -*- encoding: utf-8 -*-
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from typeguard import check_argument_types

from .geometry import as_boxes
from .numerics import (Parameters, Tensor, avg_pool2x2, bce_with_logits,
                       bilinear_resize, concat, conv2d, minimum, relu, silu,
                       tabs)
from .utils import ShapeError, get_logger

logging = get_logger()

LEVELS = ('P3', 'P4', 'P5')
STRIDES = {'P3': 8, 'P4': 16, 'P5': 32}
BACKBONE_WIDTHS = (16, 24, 32, 48, 64)
# max-side bounds (pixels) for assigning a ground truth to a level
LEVEL_RANGES = {'P3': (0, 32), 'P4': (32, 64), 'P5': (64, np.inf)}
IOU_LOSS_WEIGHT = 5.0


@dataclass
class LevelOutput():
    """Per-level tensors of one batch of frames, all shaped [N, *, H, W]."""
    level: str
    stride: int
    feature: Tensor
    cls: Tensor
    reg: Tensor
    obj: Tensor
    f_cls: Tensor
    v_r: Tensor

    @property
    def grid(self) -> Tuple[int, int]:
        return self.feature.shape[2], self.feature.shape[3]


@dataclass
class Candidates():
    """Decoded per-cell predictions of one frame, pooled over levels."""
    boxes: np.ndarray          # [M, 4] image pixels
    scores: np.ndarray         # [M]
    class_ids: np.ndarray      # [M]
    class_scores: np.ndarray   # [M, K]
    levels: np.ndarray         # [M] index into LEVELS
    cells: np.ndarray          # [M] flat y * W + x within the level

    def __len__(self) -> int:
        return len(self.scores)


def init_detector(params: Parameters, num_classes: int, channels: int) -> None:
    cin = 3
    for i, width in enumerate(BACKBONE_WIDTHS):
        params.init_conv(f'backbone.stage{i}', cin, width, 3)
        cin = width
    for level, width in zip(LEVELS, BACKBONE_WIDTHS[2:]):
        params.init_conv(f'neck.lateral.{level}', width, channels, 1)
        params.init_conv(f'neck.smooth.{level}', channels, channels, 3)
    params.init_conv('head.stem', channels, channels, 3)
    params.init_conv('head.cls', channels, num_classes, 1)
    params.init_conv('head.reg', channels, 4, 1)
    params.init_conv('head.obj', channels, 1, 1)
    params.init_conv('vo.conv1', channels, channels, 3)
    params.init_conv('vo.conv2', channels, channels, 3)
    params.init_conv('vo.cls', channels, channels, 1)
    params.init_conv('vo.ins', channels, channels, 1)


def _conv(x: Tensor, params: Parameters, name: str, label: str = 'conv') -> Tensor:
    kernel = params[f'{name}.weight']
    return conv2d(x, kernel, params[f'{name}.bias'], padding=kernel.shape[-1] // 2, label=label)


def forward(frames: Tensor, params: Parameters) -> List[LevelOutput]:
    """Backbone, top-down neck, shared decoupled heads and the video object branch.

    frames is [3, H, W] or [N, 3, H, W] with H and W divisible by 32.
    """
    if frames.ndim == 3:
        frames = frames.reshape((1,) + frames.shape)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f'frames must be [N, 3, H, W], got {frames.shape}')
    if frames.shape[2] % 32 or frames.shape[3] % 32:
        raise ShapeError(f'frame size {frames.shape[2:]} is not divisible by 32')

    x = frames
    stages = []
    for i in range(len(BACKBONE_WIDTHS)):
        x = avg_pool2x2(silu(_conv(x, params, f'backbone.stage{i}', 'conv.backbone')))
        stages.append(x)
    c3, c4, c5 = stages[2:]

    laterals = {level: _conv(c, params, f'neck.lateral.{level}', 'conv.neck')
                for level, c in zip(LEVELS, (c3, c4, c5))}
    merged = {'P5': laterals['P5']}
    for level, upper in (('P4', 'P5'), ('P3', 'P4')):
        h, w = laterals[level].shape[2:]
        merged[level] = laterals[level] + bilinear_resize(merged[upper], h, w)

    outputs = []
    for level in LEVELS:
        feature = silu(_conv(merged[level], params, f'neck.smooth.{level}', 'conv.neck'))
        stem = silu(_conv(feature, params, 'head.stem', 'conv.head'))
        vo = silu(_conv(feature, params, 'vo.conv1', 'conv.vo'))
        vo = silu(_conv(vo, params, 'vo.conv2', 'conv.vo'))
        outputs.append(LevelOutput(
            level=level, stride=STRIDES[level], feature=feature,
            cls=_conv(stem, params, 'head.cls', 'conv.head'),
            reg=_conv(stem, params, 'head.reg', 'conv.head'),
            obj=_conv(stem, params, 'head.obj', 'conv.head'),
            f_cls=_conv(vo, params, 'vo.cls', 'conv.vo'),
            v_r=_conv(vo, params, 'vo.ins', 'conv.vo')))
    return outputs


def cell_centers(height: int, width: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (cx, cy) image-pixel centers of a level grid, row-major."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    return ((xs.reshape(-1) + 0.5) * stride, (ys.reshape(-1) + 0.5) * stride)


def decode_boxes(offsets: np.ndarray, stride: int, image_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """offsets [4, H, W] as (l, t, r, b) in stride units -> boxes [H*W, 4]."""
    _, h, w = offsets.shape
    cx, cy = cell_centers(h, w, stride)
    l, t, r, b = (offsets.reshape(4, -1).astype(np.float64) * stride)
    boxes = np.stack([cx - l, cy - t, cx + r, cy + b], axis=1)
    if image_hw is not None:
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, image_hw[1])
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, image_hw[0])
    return boxes


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x.astype(np.float64))


def decode(cls_logits: np.ndarray, offsets: np.ndarray, obj_logits: np.ndarray, stride: int,
           image_hw: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """One level of one frame -> (boxes [H*W, 4], class scores [H*W, K]).

    Score is sigmoid(objectness) * sigmoid(class logit).
    """
    k = cls_logits.shape[0]
    class_scores = _sigmoid(obj_logits.reshape(1, -1)) * _sigmoid(cls_logits.reshape(k, -1))
    return decode_boxes(offsets, stride, image_hw), class_scores.T


def decode_frame(outputs: Sequence[LevelOutput], index: int, image_hw: Tuple[int, int]) -> Candidates:
    boxes, class_scores, levels, cells = [], [], [], []
    for li, out in enumerate(outputs):
        b, s = decode(out.cls.data[index], out.reg.data[index], out.obj.data[index],
                      out.stride, image_hw)
        boxes.append(b)
        class_scores.append(s)
        levels.append(np.full(len(b), li, dtype=np.int64))
        cells.append(np.arange(len(b), dtype=np.int64))
    class_scores = np.concatenate(class_scores)
    return Candidates(boxes=np.concatenate(boxes), scores=class_scores.max(axis=1),
                      class_ids=class_scores.argmax(axis=1), class_scores=class_scores,
                      levels=np.concatenate(levels), cells=np.concatenate(cells))


def level_for(box: np.ndarray) -> int:
    side = max(box[2] - box[0], box[3] - box[1])
    for li, level in enumerate(LEVELS):
        lo, hi = LEVEL_RANGES[level]
        if lo <= side < hi:
            return li
    return len(LEVELS) - 1


def assign_targets(gt_boxes: np.ndarray, grids: Sequence[Tuple[int, int]]) -> List[np.ndarray]:
    """Per level, an int array [H*W] with the matched GT index or -1.

    A cell is positive for a GT when its center lies inside the GT box
    (half-open) on the GT's level; the smallest GT wins contested cells. A GT
    covering no cell center takes the cell containing its own center.
    """
    gt_boxes = as_boxes(gt_boxes)
    assigned = [np.full(h * w, -1, dtype=np.int64) for h, w in grids]
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    # larger boxes first so smaller ones overwrite contested cells
    for g in np.argsort(-areas, kind='stable'):
        box = gt_boxes[g]
        li = level_for(box)
        h, w = grids[li]
        stride = STRIDES[LEVELS[li]]
        cx, cy = cell_centers(h, w, stride)
        inside = (cx >= box[0]) & (cx < box[2]) & (cy >= box[1]) & (cy < box[3])
        if not inside.any():
            col = min(int((box[0] + box[2]) / 2 // stride), w - 1)
            row = min(int((box[1] + box[3]) / 2 // stride), h - 1)
            inside[row * w + col] = True
        assigned[li][inside] = g
    return assigned


def _flat_cells(t: Tensor, index: int) -> Tensor:
    """[N, C, H, W] -> [H*W, C] for one frame."""
    c, h, w = t.shape[1:]
    return t[index].reshape(c, h * w).transpose(1, 0)


def box_regression_loss(offsets: Tensor, targets: np.ndarray) -> Tensor:
    """offsets, targets [P, 4] in stride units. Returns per-row 5*(1 - IoU) + mean L1."""
    pl, pt, pr, pb = (offsets[:, i] for i in range(4))
    tl, tt, tr, tb = (targets[:, i] for i in range(4))
    inter_w = relu(minimum(pl, tl) + minimum(pr, tr))
    inter_h = relu(minimum(pt, tt) + minimum(pb, tb))
    inter = inter_w * inter_h
    area_p = relu(pl + pr) * relu(pt + pb)
    area_t = (tl + tr) * (tt + tb)
    union = area_p + area_t - inter
    iou = inter / union
    l1 = tabs(offsets - targets).mean(axis=1)
    return (1.0 - iou) * IOU_LOSS_WEIGHT + l1


def detection_loss(outputs: Sequence[LevelOutput], index: int, gt_boxes: np.ndarray,
                   gt_classes: np.ndarray) -> Tensor:
    """L_det for frame ``index`` of a batch.

    Objectness BCE over every cell, class BCE and box loss over positive
    cells; everything divided by max(#positives, 1).
    """
    gt_boxes = as_boxes(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    assigned = assign_targets(gt_boxes, [o.grid for o in outputs])
    num_pos = max(sum(int((a >= 0).sum()) for a in assigned), 1)

    terms = []
    for out, gt_index in zip(outputs, assigned):
        obj = _flat_cells(out.obj, index)
        terms.append(bce_with_logits(obj, (gt_index >= 0).astype(np.float64)[:, None]).sum())
        pos = np.flatnonzero(gt_index >= 0)
        if pos.size == 0:
            continue
        matched = gt_index[pos]
        cls = _flat_cells(out.cls, index)[pos]
        onehot = np.zeros(cls.shape, dtype=np.float64)
        onehot[np.arange(len(pos)), gt_classes[matched]] = 1.0
        terms.append(bce_with_logits(cls, onehot).sum())

        h, w = out.grid
        cx, cy = cell_centers(h, w, out.stride)
        box = gt_boxes[matched]
        target = np.stack([cx[pos] - box[:, 0], cy[pos] - box[:, 1],
                           box[:, 2] - cx[pos], box[:, 3] - cy[pos]], axis=1) / out.stride
        reg = _flat_cells(out.reg, index)[pos]
        terms.append(box_regression_loss(reg, target).sum())

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / num_pos)


class BaseDetector():
    """Toy anchor-free detector: forward, decode and L_det over a batch of frames."""

    def __init__(self, params: Parameters, num_classes: int, channels: int = 32,
                 image_size: int = 96) -> None:
        check_argument_types()
        if image_size % 32:
            raise ShapeError(f'image_size {image_size} is not divisible by 32')
        self.params = params
        self.num_classes = num_classes
        self.channels = channels
        self.image_size = image_size
        if 'head.obj.weight' not in params:
            init_detector(params, num_classes, channels)

    def __call__(self, frames: Tensor) -> List[LevelOutput]:
        return forward(frames, self.params)

    def decode(self, outputs: Sequence[LevelOutput]) -> List[Candidates]:
        hw = (self.image_size, self.image_size)
        return [decode_frame(outputs, i, hw) for i in range(outputs[0].feature.shape[0])]

    def loss(self, outputs: Sequence[LevelOutput], annotations: Sequence[Dict]) -> Tensor:
        losses = [detection_loss(outputs, i, ann['boxes'], ann['classes'])
                  for i, ann in enumerate(annotations)]
        return concat([l.reshape(1) for l in losses]).mean()
