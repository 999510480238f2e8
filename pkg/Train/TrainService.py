import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from VOD.faim.dataset import Dataset
from VOD.faim.faim import BASE_PREFIXES, FAIM
from VOD.faim.maskhead import LossBreakdown, total_loss
from VOD.faim.numerics import (Parameters, Tensor, concat, load_parameters,
                               save_parameters)
from VOD.faim.synthdata import VideoClip
from VOD.faim.ticam import sample_frames
from VOD.faim.utils import (DatasetError, NonFiniteError, RunConfig,
                            TrainingDivergedError)

MOMENTUM = 0.9
METRICS_FIELDS = ('iter', 'lr', 'l_det', 'l_mask', 'l_total')
PHASES = ('pretrain', 'finetune')


@dataclass
class TrainConfig():
    base_lr: float
    min_lr: float
    warmup_iters: int
    total_iters: int
    batch_clips: int = 2
    frames_per_clip: int = 16
    lambda_: float = 1.0
    freeze_base: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ValueError('iteration counts must be non-negative')
        if self.total_iters > 0 and self.warmup_iters >= self.total_iters:
            raise ValueError(f'warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})')
        if self.min_lr > self.base_lr:
            raise ValueError('min_lr must not exceed base_lr')

    @classmethod
    def from_run(cls, cfg: RunConfig, phase: str) -> 'TrainConfig':
        total = cfg.pretrain_iters if phase == 'pretrain' else cfg.finetune_iters
        return cls(base_lr=cfg.base_lr, min_lr=cfg.min_lr,
                   warmup_iters=min(cfg.warmup_iters, max(total - 1, 0)), total_iters=total,
                   batch_clips=cfg.batch_clips,
                   frames_per_clip=cfg.pretrain_frames if phase == 'pretrain' else cfg.m_train,
                   lambda_=cfg.lambda_, freeze_base=cfg.freeze_base, seed=cfg.seed)


def cosine_lr(it: int, cfg: TrainConfig) -> float:
    """Linear warm-up to base_lr, then cosine decay to min_lr at total_iters."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f'iteration {it} outside [0, {cfg.total_iters}]')
    w, total = cfg.warmup_iters, cfg.total_iters
    if it < w:
        return cfg.base_lr * it / w
    progress = (it - w) / (total - w) if total > w else 1.0
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class SGD():
    """SGD with momentum on the trainable tensors of a Parameters set.

    Buffers are float32 so a checkpointed run resumes bit-identically.
    """

    def __init__(self, params: Parameters, momentum: float = MOMENTUM) -> None:
        self.params = params
        self.momentum = momentum
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for name, t in self.params.trainable():
            if t.grad is None:
                continue
            v = self.buffers.get(name)
            g = t.grad.astype(np.float32)
            v = g if v is None else (self.momentum * v + g).astype(np.float32)
            self.buffers[name] = v
            t.data = (t.data - np.float32(lr) * v).astype(np.float32)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.buffers.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        self.buffers = {name: np.asarray(v, dtype=np.float32).copy() for name, v in state.items()}


def _mean(values: Sequence[Tensor]) -> Tensor:
    return concat([v.reshape(1) for v in values]).mean()


def train_step(batch: Sequence[VideoClip], model: FAIM, optimizer: SGD, cfg: TrainConfig,
               lr: float, phase: str, rng: np.random.Generator) -> LossBreakdown:
    """One forward/backward/update over a batch of clips."""
    if not batch:
        raise DatasetError('empty batch')
    if phase == 'pretrain':
        frames, annotations = [], []
        for clip in batch:
            m = min(cfg.frames_per_clip, clip.num_frames)
            idx = np.sort(rng.choice(clip.num_frames, size=m, replace=False))
            frames.append(clip.frames[idx])
            annotations.extend(clip.annotations[i] for i in idx)
        l_det = model.pretrain_loss(np.concatenate(frames), annotations)
        l_mask = Tensor(0.0)
    else:
        dets, masks = [], []
        for clip in batch:
            idx = sample_frames(clip.num_frames, cfg.frames_per_clip, rng, model.cfg.frame_sampling,
                                model.cfg.m_local)
            pseudo = clip.pseudo_masks if clip.pseudo_masks is not None else [a.masks for a in clip.annotations]
            losses = model.clip_losses(clip.frames[idx], [clip.annotations[i] for i in idx],
                                       [pseudo[i] for i in idx])
            dets.append(losses.l_det)
            masks.append(losses.l_mask)
        l_det, l_mask = _mean(dets), _mean(masks)

    breakdown = total_loss(l_det.item(), l_mask.item(), cfg.lambda_)
    total = l_det + l_mask * cfg.lambda_
    if total.requires_grad:
        model.params.zero_grad()
        total.backward()
        optimizer.step(lr)
    return breakdown


def _checkpoints(directory: Path) -> List[Path]:
    """Oldest first; ``final`` counts as the newest."""
    found = sorted(p for p in directory.glob('ckpt_*') if (p / 'index.json').exists())
    if (directory / 'final' / 'index.json').exists():
        found.append(directory / 'final')
    return found


def _write_divergence(directory: Path, it: int, lr: float, error: Exception, params: Parameters) -> Path:
    path = directory / 'divergence.json'
    norms = {}
    for name, t in params.items():
        finite = np.isfinite(t.data).all()
        norms[name] = float(np.linalg.norm(t.data)) if finite else None
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'iteration': it, 'lr': lr, 'error': str(error), 'param_norms': norms}, f, indent=2)
    return path


def fit(dataset: Union[Dataset, Sequence[VideoClip]], cfg: RunConfig, checkpoint_dir: Union[str, Path],
        phase: str = 'pretrain', model: Optional[FAIM] = None) -> Tuple[Parameters, List[Dict]]:
    """Run one training phase; resumes from the newest checkpoint in ``checkpoint_dir``.

    Writes ``metrics.csv`` and ``ckpt_<iter>`` directories, and ``final`` at
    the end. Returns the trained parameters and the metric rows of this call.
    """
    if phase not in PHASES:
        raise ValueError(f'unknown phase {phase!r}')
    if len(dataset) == 0:
        raise DatasetError('dataset is empty')
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig.from_run(cfg, phase)
    model = model if model is not None else FAIM(cfg)
    model.params.set_trainable(model.trainable_predicate(phase))
    optimizer = SGD(model.params)

    start = 0
    existing = _checkpoints(checkpoint_dir)
    if existing:
        extra, meta = load_parameters(existing[-1], model.params)
        optimizer.load_state(extra)
        start = int(meta['iteration'])
        logging.info('resuming %s from %s at iteration %d', phase, existing[-1], start)

    metrics_path = checkpoint_dir / 'metrics.csv'
    kept_rows = []
    if start and metrics_path.exists():
        with open(metrics_path, 'r', encoding='utf-8', newline='') as f:
            kept_rows = [r for r in csv.DictReader(f) if int(r['iter']) < start]
    with open(metrics_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(kept_rows)

    rows = []
    stime = time.time()
    with open(metrics_path, 'a', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        for it in tqdm(range(start, tc.total_iters), desc=phase, initial=start, total=tc.total_iters):
            lr = cosine_lr(it, tc)
            rng = np.random.default_rng([tc.seed, it])
            picks = rng.choice(len(dataset), size=tc.batch_clips, replace=len(dataset) < tc.batch_clips)
            batch = [dataset[int(i)] for i in picks]
            try:
                breakdown = train_step(batch, model, optimizer, tc, lr, phase, rng)
            except NonFiniteError as e:
                path = _write_divergence(checkpoint_dir, it, lr, e, model.params)
                raise TrainingDivergedError(f'{phase} diverged at iteration {it}; see {path}') from e
            row = {'iter': it, 'lr': repr(lr), 'l_det': repr(breakdown.l_det),
                   'l_mask': repr(breakdown.l_mask), 'l_total': repr(breakdown.l_total)}
            writer.writerow(row)
            f.flush()
            rows.append(row)
            if (it + 1) % cfg.checkpoint_every == 0 and it + 1 < tc.total_iters:
                save_parameters(checkpoint_dir / f'ckpt_{it + 1:06d}', model.params, optimizer.state(),
                                {'iteration': it + 1, 'phase': phase})
    save_parameters(checkpoint_dir / 'final', model.params, optimizer.state(),
                    {'iteration': tc.total_iters, 'phase': phase})
    logging.info('%s finished %d iterations. time used %.2f', phase, tc.total_iters - start,
                 time.time() - stime)
    return model.params, rows


class TrainService():
    def __init__(self, cfg: RunConfig, run_dir: Union[str, Path, None] = None):
        logging.info('Initializing Train Service...')
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir()

    def pretrain(self, dataset: Dataset) -> Parameters:
        params, _ = fit(dataset, self.cfg, self.run_dir / 'pretrain', 'pretrain')
        return params

    def base_checkpoint(self) -> Optional[Path]:
        if self.cfg.init_checkpoint:
            path = Path(self.cfg.init_checkpoint)
            if not (path / 'index.json').exists():
                raise FileNotFoundError(f'{path} does not exist.')
            return path
        default = self.run_dir / 'pretrain' / 'final'
        return default if (default / 'index.json').exists() else None

    def finetune(self, dataset: Dataset) -> Parameters:
        model = FAIM(self.cfg)
        base = self.base_checkpoint()
        if base is None:
            logging.warning('no pretrained base detector found; fine-tuning from initialization')
        else:
            load_parameters(base, model.params, prefixes=BASE_PREFIXES)
            logging.info('loaded base detector from %s', base)
        params, _ = fit(dataset, self.cfg, self.run_dir / 'finetune', 'finetune', model=model)
        return params
