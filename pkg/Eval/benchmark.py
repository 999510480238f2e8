# -*- encoding: utf-8 -*-
"""Closed-form FLOP counts and a single-thread timing harness.

FLOPs are reported as 2 x multiply-accumulates. The closed forms below are
the counts the numerics ops report under ``flop_counter``; the benchmark
records both and logs a mismatch.
"""
import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits

from VOD.faim.detector import BACKBONE_WIDTHS, LEVELS
from VOD.faim.faim import FAIM
from VOD.faim.geometry import nms, roi_align_batch
from VOD.faim.maskhead import FCN_DEPTH, predict_masks, init_maskhead
from VOD.faim.numerics import (Parameters, Tensor, conv2d, flop_counter,
                               init_attention, multi_head_attention, no_grad)
from VOD.faim.synthdata import generate_clip
from VOD.faim.utils import RunConfig, get_logger

logging = get_logger()

STAGES = ('attention', 'conv', 'roi_align', 'nms', 'maskhead', 'inference')
BENCH_FIELDS = ('stage', 'size', 'flops', 'median_ms')
CONV_CHANNELS = 16
ROI_FMAP = (16, 24, 24)
ROI_OUT = 7


@dataclass
class BenchRow():
    stage: str
    size: int
    flops: int
    median_ms: float
    measured_flops: Optional[int] = None


def attention_macs(tokens: int, dim: int) -> int:
    """q/k/v/out projections plus the score and context products."""
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def attention_score_macs(tokens: int, dim: int) -> int:
    return tokens * tokens * dim


def conv_macs(side: int, channels: int = CONV_CHANNELS, kernel: int = 3, batch: int = 1) -> int:
    return batch * side * side * channels * channels * kernel * kernel


def roi_align_macs(num_rois: int, channels: int, height: int, width: int, out_h: int, out_w: int) -> int:
    return num_rois * channels * (height * width * out_w + out_h * height * out_w)


def nms_flops(num_boxes: int) -> int:
    """Pairwise IoU evaluations."""
    return num_boxes * num_boxes


def resize_macs(lead: int, in_h: int, in_w: int, out_h: int, out_w: int) -> int:
    return lead * (in_h * in_w * out_w + out_h * in_h * out_w)


def maskhead_macs(num_rois: int, in_channels: int, mask_dim: int, out_channels: int,
                  roi_size: int, upsample: str = 'bilinear') -> int:
    r = roi_size
    macs = num_rois * mask_dim * r * r * 9 * (in_channels + (FCN_DEPTH - 1) * mask_dim)
    side = r
    if upsample == 'bilinear':
        side = 2 * r
        macs += resize_macs(num_rois * mask_dim, r, r, side, side)
    elif upsample == 'deconv':
        side = 2 * r
        macs += num_rois * mask_dim * mask_dim * r * r * 4
    return macs + num_rois * out_channels * side * side * mask_dim


def detector_macs(image_size: int, channels: int, num_classes: int, frames: int = 1) -> int:
    """Backbone, neck and heads (including the video object branch) of the base detector."""
    macs, cin = 0, 3
    for i, width in enumerate(BACKBONE_WIDTHS):
        side = image_size >> i
        macs += conv_macs(side, 1, 3, frames) * cin * width
        cin = width
    sides = {level: image_size >> (i + 3) for i, level in enumerate(LEVELS)}
    for level, width in zip(LEVELS, BACKBONE_WIDTHS[2:]):
        macs += frames * sides[level] ** 2 * channels * width
    for level, upper in (('P4', 'P5'), ('P3', 'P4')):
        macs += resize_macs(frames * channels, sides[upper], sides[upper], sides[level], sides[level])
    per_cell = 4 * 9 * channels * channels + channels * (num_classes + 5) + 2 * channels * channels
    macs += sum(frames * s * s * per_cell for s in sides.values())
    return macs


def ticam_macs(num_proposals: int, cls_channels: int, ins_channels: int, dim: int, num_classes: int) -> int:
    n = num_proposals
    return (n * (cls_channels + ins_channels) * dim + 2 * attention_macs(n, dim)
            + n * 2 * dim * dim + n * dim * (num_classes + 1))


def inference_macs(cfg: RunConfig, frames: int, level_counts: Sequence[int]) -> int:
    """Per-group inference cost given the number of proposals kept on each level."""
    macs = detector_macs(cfg.image_size, cfg.vo_channels, cfg.num_classes, frames)
    if cfg.aggregation == 'none':
        return macs
    n = int(sum(level_counts))
    sides = [cfg.image_size >> (i + 3) for i in range(len(LEVELS))]
    if cfg.aggregation == 'mask':
        macs += sum(conv_macs(s, 1, 3, frames) * cfg.vo_channels * cfg.ins_channels for s in sides)
        ins_width = cfg.ins_channels
    else:
        macs += sum(roi_align_macs(c, cfg.vo_channels, s, s, 1, 1) for c, s in zip(level_counts, sides))
        ins_width = cfg.vo_channels
    if n == 0:
        return macs
    return macs + ticam_macs(n, cfg.vo_channels, ins_width, cfg.feature_dim, cfg.num_classes)


def time_call(fn: Callable[[], object], repeats: int, warmup: int) -> Tuple[float, List[float]]:
    """Median wall time in ms over ``repeats`` runs after ``warmup`` discarded runs."""
    if warmup < 3:
        raise ValueError(f'warmup must be >= 3, got {warmup}')
    if repeats < 1:
        raise ValueError(f'repeats must be >= 1, got {repeats}')
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        stime = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - stime) * 1000.0)
    return float(np.median(samples)), samples


def _random_boxes(rng: np.random.Generator, n: int, extent: float) -> np.ndarray:
    xy = rng.uniform(0, extent * 0.75, size=(n, 2))
    wh = rng.uniform(2.0, extent * 0.25, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def stage_case(stage: str, size: int, cfg: RunConfig) -> Tuple[Callable[[], object], int]:
    """(callable running the stage once, closed-form MACs or FLOPs) for one grid point."""
    rng = np.random.default_rng([cfg.seed, size])
    if stage == 'attention':
        params = Parameters(rng_seed=cfg.seed)
        init_attention(params, cfg.feature_dim)
        x = Tensor(rng.standard_normal((size, cfg.feature_dim)))
        return (lambda: multi_head_attention(x, x, x, params, cfg.heads),
                attention_macs(size, cfg.feature_dim))
    if stage == 'conv':
        params = Parameters(rng_seed=cfg.seed)
        params.init_conv('conv', CONV_CHANNELS, CONV_CHANNELS, 3)
        x = Tensor(rng.standard_normal((1, CONV_CHANNELS, size, size)))
        return (lambda: conv2d(x, params['conv.weight'], params['conv.bias'], padding=1),
                conv_macs(size))
    if stage == 'roi_align':
        c, h, w = ROI_FMAP
        fmap = Tensor(rng.standard_normal(ROI_FMAP))
        rois = _random_boxes(rng, size, float(min(h, w)))
        return (lambda: roi_align_batch(fmap, rois, ROI_OUT, ROI_OUT, 2),
                roi_align_macs(size, c, h, w, ROI_OUT, ROI_OUT))
    if stage == 'nms':
        boxes = _random_boxes(rng, size, float(cfg.image_size))
        scores = rng.random(size)
        return lambda: nms(boxes, scores, cfg.nms_infer), nms_flops(size)
    if stage == 'maskhead':
        params = Parameters(rng_seed=cfg.seed)
        out_channels = cfg.num_classes if cfg.class_aware else 1
        init_maskhead(params, cfg.ins_channels, cfg.mask_dim, out_channels, cfg.upsample)
        pooled = Tensor(rng.standard_normal((size, cfg.ins_channels, cfg.roi_size, cfg.roi_size)))
        return (lambda: predict_masks(pooled, params, cfg.upsample),
                maskhead_macs(size, cfg.ins_channels, cfg.mask_dim, out_channels, cfg.roi_size, cfg.upsample))
    if stage == 'inference':
        model = FAIM(cfg, with_mask_branch=False)
        clip = generate_clip(size, cfg.image_size, cfg.image_size, cfg.num_objects, seed=cfg.seed)
        _, psets = model.infer(clip.frames)
        level_counts = [sum(int(np.count_nonzero(p.levels == li)) for p in psets) for li in range(len(LEVELS))]
        return lambda: model(clip.frames), inference_macs(cfg, size, level_counts)
    raise ValueError(f'unknown benchmark stage {stage!r}; expected one of {STAGES}')


def measure_macs(fn: Callable[[], object]) -> int:
    with no_grad(), flop_counter() as counter:
        fn()
    return counter.total


def benchmark(stage: str, sizes: Sequence[int], cfg: RunConfig, repeats: Optional[int] = None,
              warmup: Optional[int] = None) -> List[BenchRow]:
    """Time one stage over a size grid, pinned to a single BLAS thread."""
    repeats = repeats if repeats is not None else cfg.bench_repeats
    warmup = warmup if warmup is not None else cfg.bench_warmup
    rows = []
    with threadpool_limits(limits=1):
        for size in sizes:
            fn, closed = stage_case(stage, int(size), cfg)
            if stage == 'nms':
                flops, measured = closed, None
            else:
                measured = 2 * measure_macs(fn)
                flops = 2 * closed
                if measured != flops:
                    logging.warning('%s size %d: counted %d FLOPs, closed form %d', stage, size, measured, flops)

            def run():
                with no_grad():
                    return fn()

            median_ms, _ = time_call(run, repeats, warmup)
            rows.append(BenchRow(stage=stage, size=int(size), flops=flops, median_ms=median_ms,
                                 measured_flops=measured))
            logging.info('%s size %d: %d FLOPs, median %.3f ms', stage, size, flops, median_ms)
    return rows


def write_bench_csv(path: Union[str, Path], rows: Sequence[BenchRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({'stage': row.stage, 'size': row.size, 'flops': row.flops,
                             'median_ms': f'{row.median_ms:.4f}'})
    return path


def run_all(cfg: RunConfig, path: Union[str, Path], stages: Sequence[str] = STAGES,
            sizes: Optional[Dict[str, Sequence[int]]] = None) -> List[BenchRow]:
    rows = []
    for stage in stages:
        grid = (sizes or {}).get(stage, cfg.bench_sizes)
        if stage == 'inference':
            grid = [s for s in grid if s <= cfg.m_infer] or [min(cfg.m_infer, 4)]
        rows.extend(benchmark(stage, grid, cfg))
    write_bench_csv(path, rows)
    return rows
