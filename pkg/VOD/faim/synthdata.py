# -*- encoding: utf-8 -*-
"""Synthetic moving-shape clips with exact masks, plus a pseudo-mask corruption model."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage, optimize

from .geometry import box_from_mask, box_to_mask, iou
from .utils import MotionBandError, ShapeError

SHAPES = ('rect', 'ellipse', 'triangle', 'cross')
TEXTURES = ('solid', 'striped')
CLASS_VOCAB: List[Tuple[str, str]] = [(s, t) for s in SHAPES for t in TEXTURES]
PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.95, 0.60, 0.10], [0.20, 0.75, 0.25], [0.10, 0.55, 0.55],
    [0.20, 0.35, 0.90], [0.60, 0.25, 0.85], [0.90, 0.85, 0.15], [0.85, 0.30, 0.60],
], dtype=np.float32)

# target consecutive-frame IoU ranges used when drawing a speed
SPEED_BANDS = {'slow': (0.92, 0.98), 'medium': (0.75, 0.88), 'fast': (0.45, 0.65)}
MIN_SIDE, MAX_SIDE = 14, 40
MIN_VISIBLE_PIXELS = 4
NOISE_SIGMA = 0.02
MAX_TRAJECTORY_TRIES = 20

PSEUDO_MASK_PRESETS = {
    'exact': {'erosion_frac': 0.0, 'dilation_frac': 0.0, 'drop_prob': 0.0},
    'sam': {'erosion_frac': 0.1, 'dilation_frac': 0.1, 'drop_prob': 0.05},
    'box2mask': {'erosion_frac': 0.25, 'dilation_frac': 0.15, 'drop_prob': 0.15},
}


class MotionSpeed(str, Enum):
    SLOW = 'Slow'
    MEDIUM = 'Medium'
    FAST = 'Fast'


@dataclass
class DegradationSpec():
    blur_prob: float = 0.3
    occlusion_prob: float = 0.3
    defocus_strength: float = 0.2

    def __post_init__(self) -> None:
        for name in ('blur_prob', 'occlusion_prob', 'defocus_strength'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f'{name} must lie in [0, 1], got {value}')


@dataclass
class FrameAnnotation():
    boxes: np.ndarray       # [n, 4]
    classes: np.ndarray     # [n]
    masks: np.ndarray       # [n, H, W] bool
    track_ids: np.ndarray   # [n]

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class VideoClip():
    frames: np.ndarray                  # [T, 3, H, W] float32 in [0, 1]
    annotations: List[FrameAnnotation]
    track_boxes: np.ndarray             # [num_objects, T, 4] amodal boxes
    track_classes: np.ndarray           # [num_objects]
    track_speeds: List[str]
    seed: int
    blurred: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    track_occluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    pseudo_masks: Optional[List[np.ndarray]] = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def translation_iou(w: float, h: float, dx: float, dy: float) -> float:
    ox, oy = max(w - abs(dx), 0.0), max(h - abs(dy), 0.0)
    inter = ox * oy
    return inter / (2 * w * h - inter)


def speed_for_iou(w: float, h: float, angle: float, target: float) -> float:
    """Per-frame displacement along ``angle`` giving consecutive IoU ``target``."""
    c, s = abs(np.cos(angle)), abs(np.sin(angle))
    limit = min(w / c if c > 1e-9 else np.inf, h / s if s > 1e-9 else np.inf)
    return optimize.brentq(lambda v: translation_iou(w, h, v * c, v * s) - target, 0.0, limit)


def render_shape(shape: str, box: Sequence[float], height: int, width: int) -> np.ndarray:
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    img = Image.new('L', (width, height), 0)
    draw = ImageDraw.Draw(img)
    if shape == 'rect':
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=255)
    elif shape == 'ellipse':
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=255)
    elif shape == 'triangle':
        draw.polygon([((x1 + x2 - 1) / 2, y1), (x2 - 1, y2 - 1), (x1, y2 - 1)], fill=255)
    elif shape == 'cross':
        bw, bh = max((x2 - x1) // 3, 1), max((y2 - y1) // 3, 1)
        cx, cy = (x1 + x2) // 2, (y1 + y2) // 2
        draw.rectangle([x1, cy - bh // 2, x2 - 1, cy - bh // 2 + bh - 1], fill=255)
        draw.rectangle([cx - bw // 2, y1, cx - bw // 2 + bw - 1, y2 - 1], fill=255)
    else:
        raise ValueError(f'unknown shape {shape!r}')
    return np.asarray(img) > 0


def paint(canvas: np.ndarray, mask: np.ndarray, color: np.ndarray, texture: str = 'solid') -> None:
    """canvas [3, H, W] in place."""
    if texture == 'striped':
        ys, xs = np.nonzero(mask)
        shade = np.where(((xs + ys) // 3) % 2 == 0, 1.0, 0.45)
        canvas[:, ys, xs] = color[:, None] * shade[None, :]
    else:
        canvas[:, mask] = color[:, None]


def make_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Flat gray with static gray clutter shapes."""
    canvas = np.full((3, height, width), rng.uniform(0.3, 0.6), dtype=np.float32)
    for _ in range(int(rng.integers(3, 7))):
        side = rng.uniform(8, 24, size=2)
        x1, y1 = rng.uniform(0, width - side[0]), rng.uniform(0, height - side[1])
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        mask = render_shape(shape, (x1, y1, x1 + side[0], y1 + side[1]), height, width)
        paint(canvas, mask, np.full(3, rng.uniform(0.15, 0.85), dtype=np.float32))
    return canvas


def _trajectory(rng: np.random.Generator, size: np.ndarray, speed: float, angle: float,
                num_frames: int, height: int, width: int) -> np.ndarray:
    """Bouncing amodal boxes [T, 4] with a small periodic scale change."""
    velocity = speed * np.array([np.cos(angle), np.sin(angle)])
    pos = np.array([rng.uniform(0, width - size[0]), rng.uniform(0, height - size[1])])
    phase = rng.uniform(0, 2 * np.pi)
    boxes = np.zeros((num_frames, 4))
    for t in range(num_frames):
        scale = 1.0 + 0.04 * np.sin(2 * np.pi * t / 24.0 + phase)
        w, h = size * scale
        cx, cy = pos + size / 2
        x1 = np.clip(cx - w / 2, 0, width - w)
        y1 = np.clip(cy - h / 2, 0, height - h)
        boxes[t] = [x1, y1, x1 + w, y1 + h]
        pos = pos + velocity
        for j, limit in ((0, width - size[0]), (1, height - size[1])):
            if pos[j] < 0 or pos[j] > limit:
                velocity[j] = -velocity[j]
                pos[j] = np.clip(pos[j], 0, limit)
    return boxes


def motion_speed_of(ious: Sequence[float]) -> MotionSpeed:
    """Slow iff mean IoU > 0.9, Medium iff in [0.7, 0.9], Fast iff < 0.7."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError('motion_speed_of needs at least one IoU value')
    m = float(ious.mean())
    if m > 0.9:
        return MotionSpeed.SLOW
    if m >= 0.7:
        return MotionSpeed.MEDIUM
    return MotionSpeed.FAST


def consecutive_ious(boxes: np.ndarray) -> np.ndarray:
    return np.array([iou(boxes[t], boxes[t + 1]) for t in range(len(boxes) - 1)])


def generate_clip(num_frames: int, height: int, width: int, num_objects: int,
                  motion_speed: str = 'mixed', degradation: Optional[DegradationSpec] = None,
                  seed: int = 0, classes: Sequence[Tuple[str, str]] = CLASS_VOCAB,
                  max_speed: Optional[float] = None) -> VideoClip:
    """Render one clip. Identical arguments give a bit-identical clip."""
    if height % 32 or width % 32:
        raise ShapeError(f'clip size {height}x{width} is not divisible by 32')
    if num_objects < 1 or num_frames < 1:
        raise ValueError(f'need num_objects >= 1 and num_frames >= 1, got {num_objects}, {num_frames}')
    if len(classes) > len(PALETTE):
        raise ValueError(f'at most {len(PALETTE)} classes are supported')
    degradation = degradation or DegradationSpec()
    max_speed = max_speed if max_speed is not None else min(height, width) / 4
    rng = np.random.default_rng(seed)
    background = make_background(rng, height, width)

    tracks, speeds, class_ids, occluders = [], [], [], []
    for _ in range(num_objects):
        bucket = motion_speed if motion_speed != 'mixed' else \
            ('slow', 'medium', 'fast')[int(rng.integers(3))]
        if bucket not in SPEED_BANDS:
            raise ValueError(f'unknown motion speed {motion_speed!r}')
        class_ids.append(int(rng.integers(len(classes))))
        for _attempt in range(MAX_TRAJECTORY_TRIES):
            size = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            target = rng.uniform(*SPEED_BANDS[bucket])
            speed = speed_for_iou(size[0], size[1], angle, target)
            if speed > max_speed:
                continue
            boxes = _trajectory(rng, size, speed, angle, num_frames, height, width)
            rendered = np.array([box_from_mask(render_shape(classes[class_ids[-1]][0], b, height, width))
                                 for b in boxes])
            if num_frames < 2 or motion_speed_of(consecutive_ious(rendered)).lower() == bucket:
                break
        else:
            raise MotionBandError(f'could not draw a {bucket} trajectory within max_speed={max_speed}')
        tracks.append(boxes)
        speeds.append(bucket)
        occluders.append(rng.uniform(0.3, 0.6, size=2) if rng.random() < degradation.occlusion_prob else None)

    frames = np.zeros((num_frames, 3, height, width), dtype=np.float32)
    annotations, amodal = [], np.zeros((num_objects, num_frames, 4))
    blurred = np.zeros(num_frames, dtype=bool)
    for t in range(num_frames):
        canvas = background.copy()
        full_masks = []
        for j in range(num_objects):
            shape, texture = classes[class_ids[j]]
            mask = render_shape(shape, tracks[j][t], height, width)
            amodal[j, t] = box_from_mask(mask)
            paint(canvas, mask, PALETTE[class_ids[j]], texture)
            full_masks.append(mask)
            if occluders[j] is not None:
                # occluder covers one corner of the object and moves with it
                x1, y1, x2, y2 = tracks[j][t]
                ow, oh = (x2 - x1) * occluders[j][0], (y2 - y1) * occluders[j][1]
                occ = render_shape('rect', (x2 - ow, y2 - oh, x2 + ow / 2, y2 + oh / 2), height, width)
                paint(canvas, occ, np.full(3, 0.2, dtype=np.float32))
                full_masks.append(occ)
        # later entries are on top
        visible, covered = [], np.zeros((height, width), dtype=bool)
        for mask in reversed(full_masks):
            visible.append(mask & ~covered)
            covered |= mask
        visible = visible[::-1]

        boxes, labels, masks, track_ids = [], [], [], []
        index = 0
        for j in range(num_objects):
            vis = visible[index]
            index += 2 if occluders[j] is not None else 1
            if vis.sum() < MIN_VISIBLE_PIXELS:
                continue
            boxes.append(box_from_mask(vis))
            labels.append(class_ids[j])
            masks.append(vis)
            track_ids.append(j)
        annotations.append(FrameAnnotation(
            boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
            classes=np.array(labels, dtype=np.int64),
            masks=np.array(masks, dtype=bool).reshape(-1, height, width),
            track_ids=np.array(track_ids, dtype=np.int64)))

        if rng.random() < degradation.blur_prob:
            blurred[t] = True
            axis = 2 if rng.random() < 0.5 else 1
            canvas = ndimage.uniform_filter1d(canvas, size=5, axis=axis, mode='nearest')
        if degradation.defocus_strength > 0:
            sigma = 2.0 * degradation.defocus_strength * rng.random()
            canvas = ndimage.gaussian_filter(canvas, sigma=(0, sigma, sigma), mode='nearest')
        canvas = canvas + rng.normal(0.0, NOISE_SIGMA, size=canvas.shape)
        frames[t] = np.clip(canvas, 0.0, 1.0)

    return VideoClip(frames=frames, annotations=annotations, track_boxes=amodal,
                     track_classes=np.array(class_ids, dtype=np.int64), track_speeds=speeds,
                     seed=seed, blurred=blurred,
                     track_occluded=np.array([o is not None for o in occluders], dtype=bool))


def track_ious(clip: VideoClip) -> Dict[int, np.ndarray]:
    """Consecutive-frame IoU of each track's amodal box."""
    return {j: consecutive_ious(clip.track_boxes[j]) for j in range(len(clip.track_boxes))}


def track_buckets(clip: VideoClip) -> Dict[int, MotionSpeed]:
    return {j: motion_speed_of(v) for j, v in track_ious(clip).items() if len(v)}


def _erode(mask: np.ndarray, margin: int) -> np.ndarray:
    """Erode up to ``margin`` steps, keeping at least half of the original area."""
    area = mask.sum()
    out = mask
    for _ in range(margin):
        step = ndimage.binary_erosion(out)
        if step.sum() < 0.5 * area:
            break
        out = step
    return out.copy()


def corrupt_mask(mask: np.ndarray, box: np.ndarray, erosion_frac: float, dilation_frac: float,
                 drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    height, width = mask.shape
    if rng.random() < drop_prob:
        return box_to_mask(box, height, width)
    side = min(box[2] - box[0], box[3] - box[1])
    erode = rng.random() < 0.5 if erosion_frac > 0 and dilation_frac > 0 else erosion_frac > 0
    if erode:
        return _erode(mask, int(round(rng.random() * erosion_frac * side)))
    margin = int(round(rng.random() * dilation_frac * side))
    if margin == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, iterations=margin)


def corrupt_masks(clip: VideoClip, erosion_frac: float = 0.0, dilation_frac: float = 0.0,
                  drop_prob: float = 0.0, seed: int = 0) -> List[np.ndarray]:
    """Pseudo masks per frame ([n, H, W] bool), independently eroded or dilated.

    Dropped masks are replaced by the filled annotation box.
    """
    for name, value in (('erosion_frac', erosion_frac), ('dilation_frac', dilation_frac)):
        if not 0.0 <= value <= 0.5:
            raise ValueError(f'{name} must lie in [0, 0.5], got {value}')
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f'drop_prob must lie in [0, 1], got {drop_prob}')
    rng = np.random.default_rng(seed)
    pseudo = []
    for ann in clip.annotations:
        masks = [corrupt_mask(m, b, erosion_frac, dilation_frac, drop_prob, rng)
                 for m, b in zip(ann.masks, ann.boxes)]
        pseudo.append(np.array(masks, dtype=bool).reshape(ann.masks.shape))
    return pseudo


def pseudo_masks_for(clip: VideoClip, preset: str, seed: int = 0) -> List[np.ndarray]:
    if preset not in PSEUDO_MASK_PRESETS:
        raise ValueError(f'unknown pseudo-mask preset {preset!r}')
    return corrupt_masks(clip, seed=seed, **PSEUDO_MASK_PRESETS[preset])
