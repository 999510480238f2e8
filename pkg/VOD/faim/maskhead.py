# -*- encoding: utf-8 -*-
"""Training-only mask branch.

RoIAlign on the instance feature map, a small FCN, class filtering with the
aggregated classes, target matching against pseudo masks, and the BCE/Dice
mask loss. Inference never builds a MaskTensor.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import as_boxes, is_valid, mask_iou, pairwise_iou, roi_align_batch
from .numerics import (Parameters, Tensor, bilinear_resize, binary_cross_entropy,
                       concat, conv2d, conv_transpose2x2, relu, sigmoid)
from .utils import NonFiniteError, ShapeError, get_logger

logging = get_logger()

FCN_DEPTH = 4
BINARIZE_THRESHOLD = 0.5


class MaskTensor():
    """Mask logits [N, C, Hm, Wm]. Counts constructions for inference-purity checks."""

    instances = 0

    def __init__(self, logits: Tensor) -> None:
        if logits.ndim != 4:
            raise ShapeError(f'mask logits must be [N, C, H, W], got {logits.shape}')
        self.logits = logits
        MaskTensor.instances += 1

    @property
    def num_channels(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass
class FilteredMasks():
    masks: List[Tensor]
    classes: List[int]

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class MaskPair():
    prediction: Tensor      # logits resized to the proposal's pixel window
    target: np.ndarray      # GT mask cropped to the same window, float
    gt_index: int
    window: Tuple[int, int, int, int]


@dataclass
class PooledFeatures():
    features: Optional[Tensor]   # [N', C', r, r] or None when nothing survives
    kept: np.ndarray             # indices of the input boxes that were pooled
    skipped: List[int] = field(default_factory=list)


@dataclass
class LossBreakdown():
    l_det: float
    l_mask: float
    l_total: float
    lambda_: float


def init_maskhead(params: Parameters, in_channels: int, mask_dim: int, out_channels: int,
                  upsample: str = 'bilinear') -> None:
    cin = in_channels
    for i in range(FCN_DEPTH):
        params.init_conv(f'mask.fcn{i}', cin, mask_dim, 3)
        cin = mask_dim
    if upsample == 'deconv':
        params.init_deconv('mask.deconv', mask_dim, mask_dim)
    params.init_conv('mask.predictor', mask_dim, out_channels, 1)


def pool_instance_features(f_ins: Tensor, boxes: np.ndarray, stride: int, roi_size: int = 32,
                           samples_per_bin: int = 2) -> PooledFeatures:
    """RoIAlign each image-space box on f_ins [C', H, W] after dividing by stride.

    Boxes that collapse once scaled and clipped to the map are skipped and
    reported, never raised.
    """
    boxes = as_boxes(boxes)
    if len(boxes) == 0:
        return PooledFeatures(features=None, kept=np.zeros(0, dtype=np.int64))
    _, h, w = f_ins.shape
    rois = boxes / stride
    rois[:, 0::2] = np.clip(rois[:, 0::2], 0, w)
    rois[:, 1::2] = np.clip(rois[:, 1::2], 0, h)
    valid = is_valid(rois)
    kept = np.flatnonzero(valid)
    skipped = np.flatnonzero(~valid).tolist()
    if skipped:
        logging.warning('skipped %d degenerate RoIs in mask pooling', len(skipped))
    if kept.size == 0:
        return PooledFeatures(features=None, kept=kept, skipped=skipped)
    pooled = roi_align_batch(f_ins, rois[kept], roi_size, roi_size, samples_per_bin)
    return PooledFeatures(features=pooled, kept=kept, skipped=skipped)


def predict_masks(pooled: Tensor, params: Parameters, upsample: str = 'bilinear') -> MaskTensor:
    """4 x (conv3x3 + ReLU) -> x2 upsample -> conv1x1 to the mask channels."""
    x = pooled
    for i in range(FCN_DEPTH):
        x = relu(conv2d(x, params[f'mask.fcn{i}.weight'], params[f'mask.fcn{i}.bias'],
                        padding=1, label='conv.mask'))
    if upsample == 'bilinear':
        x = bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])
    elif upsample == 'deconv':
        x = conv_transpose2x2(x, params['mask.deconv.weight'], params['mask.deconv.bias'])
    elif upsample != 'none':
        raise ValueError(f'unknown upsample mode {upsample!r}')
    logits = conv2d(x, params['mask.predictor.weight'], params['mask.predictor.bias'],
                    label='conv.mask')
    return MaskTensor(logits)


def filter_by_class(masks: MaskTensor, classes: Sequence[int], class_aware: bool = True) -> FilteredMasks:
    """m_i' = M[i, t_i]; class-agnostic heads always read channel 0."""
    classes = [int(c) for c in classes]
    if len(classes) != len(masks):
        raise ShapeError(f'{len(classes)} classes for {len(masks)} masks')
    selected = []
    for i, t in enumerate(classes):
        channel = t if class_aware else 0
        if not 0 <= channel < masks.num_channels:
            raise IndexError(f'class {t} outside [0, {masks.num_channels})')
        selected.append(masks.logits[i, channel])
    return FilteredMasks(masks=selected, classes=classes)


def pixel_window(box: np.ndarray, height: int, width: int) -> Tuple[int, int, int, int]:
    """Integer (r1, r2, c1, c2) covering the box, rounded outward and clipped."""
    x1, y1, x2, y2 = box
    return (max(int(math.floor(y1)), 0), min(int(math.ceil(y2)), height),
            max(int(math.floor(x1)), 0), min(int(math.ceil(x2)), width))


def match_targets(filtered: FilteredMasks, boxes: np.ndarray, gt_masks: Sequence[np.ndarray],
                  gt_boxes: np.ndarray) -> List[MaskPair]:
    """Pair each predicted mask with a GT by max mask IoU in image space.

    Each prediction is bilinearly resized to its box's pixel window and
    binarized at 0.5 for matching; predictions overlapping no GT fall back to
    their best box IoU. The target is the GT mask cropped to that window.
    """
    if len(gt_masks) == 0 or len(filtered) == 0:
        return []
    boxes = as_boxes(boxes)
    gt_boxes = as_boxes(gt_boxes)
    height, width = np.asarray(gt_masks[0]).shape
    gt_stack = np.stack([np.asarray(g, dtype=bool) for g in gt_masks])
    pairs = []
    for i, logits in enumerate(filtered.masks):
        r1, r2, c1, c2 = window = pixel_window(boxes[i], height, width)
        if r2 <= r1 or c2 <= c1:
            continue
        resized = bilinear_resize(logits, r2 - r1, c2 - c1)
        canvas = np.zeros((height, width), dtype=bool)
        canvas[r1:r2, c1:c2] = resized.numpy() > 0.0  # sigmoid(x) > 0.5
        overlaps = [mask_iou(canvas, g) for g in gt_stack]
        best = int(np.argmax(overlaps))
        if overlaps[best] <= 0.0:
            best = int(np.argmax(pairwise_iou(boxes[i:i + 1], gt_boxes)[0]))
        target = gt_stack[best, r1:r2, c1:c2].astype(np.float64)
        pairs.append(MaskPair(prediction=resized, target=target, gt_index=best, window=window))
    return pairs


def _pair_bce(pair: MaskPair) -> Tensor:
    if pair.prediction.shape != pair.target.shape:
        raise ShapeError(f'mask pair shapes differ: {pair.prediction.shape} vs {pair.target.shape}')
    return binary_cross_entropy(pair.prediction, pair.target).mean()


def _pair_dice(pair: MaskPair, smooth: float = 1.0) -> Tensor:
    if pair.prediction.shape != pair.target.shape:
        raise ShapeError(f'mask pair shapes differ: {pair.prediction.shape} vs {pair.target.shape}')
    p = sigmoid(pair.prediction)
    inter = (p * pair.target).sum()
    denom = p.sum() + (float(pair.target.sum()) + smooth)
    return 1.0 - (inter * 2.0 + smooth) / denom


def mask_loss(pairs: Sequence[MaskPair], kind: str = 'bce') -> Tensor:
    """(1/N') * sum of per-pair pixel-mean losses; 0 for N' = 0."""
    if not pairs:
        return Tensor(0.0)
    if kind == 'bce':
        per_pair = [_pair_bce(p) for p in pairs]
    elif kind == 'dice':
        per_pair = [_pair_dice(p) for p in pairs]
    else:
        raise ValueError(f'unknown mask loss {kind!r}')
    return concat([l.reshape(1) for l in per_pair]).mean()


def total_loss(l_det: float, l_mask: float, lambda_: float = 1.0) -> LossBreakdown:
    values = (float(l_det), float(l_mask), float(lambda_))
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteError(f'non-finite loss parts: l_det={l_det} l_mask={l_mask} lambda={lambda_}')
    if values[1] < 0 or values[2] < 0:
        raise ValueError(f'l_mask and lambda must be non-negative, got {l_mask}, {lambda_}')
    l_det, l_mask, lambda_ = values
    return LossBreakdown(l_det=l_det, l_mask=l_mask, l_total=l_det + lambda_ * l_mask, lambda_=lambda_)


class MaskHead():
    """Mask branch bound to one configuration; used from the training step only."""

    def __init__(self, params: Parameters, stride: int, roi_size: int = 32, samples_per_bin: int = 2,
                 upsample: str = 'bilinear', class_aware: bool = True, loss: str = 'bce') -> None:
        self.params = params
        self.stride = stride
        self.roi_size = roi_size
        self.samples_per_bin = samples_per_bin
        self.upsample = upsample
        self.class_aware = class_aware
        self.loss_kind = loss

    def __call__(self, f_ins: Tensor, boxes: np.ndarray, classes: Sequence[int],
                 gt_masks: Sequence[np.ndarray], gt_boxes: np.ndarray) -> Tuple[List[MaskPair], List[int]]:
        """Matched (prediction, target) pairs of one frame and the skipped box indices."""
        pooled = pool_instance_features(f_ins, boxes, self.stride, self.roi_size, self.samples_per_bin)
        if pooled.features is None:
            return [], pooled.skipped
        masks = predict_masks(pooled.features, self.params, self.upsample)
        kept_classes = [classes[i] for i in pooled.kept]
        filtered = filter_by_class(masks, kept_classes, self.class_aware)
        pairs = match_targets(filtered, as_boxes(boxes)[pooled.kept], gt_masks, gt_boxes)
        return pairs, pooled.skipped

    def loss(self, pairs: Sequence[MaskPair]) -> Tensor:
        return mask_loss(pairs, self.loss_kind)
