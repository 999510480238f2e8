# -*- encoding: utf-8 -*-
"""On-disk layout of a generated dataset.

    <root>/manifest.json
    <root>/clips/<clip_id>/tracks.json
    <root>/clips/<clip_id>/frame_0000.fvt     FVT1 image tensor [3, H, W]
    <root>/clips/<clip_id>/frame_0000.json    boxes, classes, track ids, RLE masks
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from tqdm import tqdm

from .geometry import rle_decode, rle_encode
from .numerics import load_tensor, save_tensor
from .synthdata import (CLASS_VOCAB, DegradationSpec, FrameAnnotation,
                        VideoClip, generate_clip, pseudo_masks_for)
from .utils import DatasetError, RunConfig, get_logger

logging = get_logger()

MANIFEST = 'manifest.json'
FORMAT = 'synthvid-1'
SPLITS = ('train', 'val')


def clip_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), index]).generate_state(1)[0])


def _frame_json(ann: FrameAnnotation, pseudo: np.ndarray, blurred: bool) -> Dict[str, Any]:
    return {'boxes': ann.boxes.tolist(), 'classes': ann.classes.tolist(),
            'track_ids': ann.track_ids.tolist(), 'blurred': bool(blurred),
            'masks': [rle_encode(m) for m in ann.masks],
            'pseudo_masks': [rle_encode(m) for m in pseudo]}


def write_clip(directory: Union[str, Path], clip: VideoClip) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pseudo = clip.pseudo_masks if clip.pseudo_masks is not None else [a.masks for a in clip.annotations]
    for t in range(clip.num_frames):
        save_tensor(directory / f'frame_{t:04d}.fvt', clip.frames[t])
        with open(directory / f'frame_{t:04d}.json', 'w', encoding='utf-8') as f:
            json.dump(_frame_json(clip.annotations[t], pseudo[t], clip.blurred[t]), f)
    with open(directory / 'tracks.json', 'w', encoding='utf-8') as f:
        json.dump({'seed': clip.seed, 'track_boxes': clip.track_boxes.tolist(),
                   'track_classes': clip.track_classes.tolist(),
                   'track_speeds': list(clip.track_speeds),
                   'track_occluded': clip.track_occluded.tolist()}, f)


def read_clip(directory: Union[str, Path], num_frames: int) -> VideoClip:
    directory = Path(directory)
    tracks_path = directory / 'tracks.json'
    if not tracks_path.exists():
        raise DatasetError(f'{tracks_path} does not exist.')
    with open(tracks_path, 'r', encoding='utf-8') as f:
        tracks = json.load(f)
    frames, annotations, pseudo, blurred = [], [], [], []
    for t in range(num_frames):
        try:
            frame = load_tensor(directory / f'frame_{t:04d}.fvt')
            with open(directory / f'frame_{t:04d}.json', 'r', encoding='utf-8') as f:
                meta = json.load(f)
        except (OSError, ValueError) as e:
            raise DatasetError(f'unreadable frame {t} in {directory}: {e}') from e
        _, h, w = frame.shape
        frames.append(frame)
        annotations.append(FrameAnnotation(
            boxes=np.asarray(meta['boxes'], dtype=np.float64).reshape(-1, 4),
            classes=np.asarray(meta['classes'], dtype=np.int64),
            masks=np.array([rle_decode(c, h, w) for c in meta['masks']], dtype=bool).reshape(-1, h, w),
            track_ids=np.asarray(meta['track_ids'], dtype=np.int64)))
        pseudo.append(np.array([rle_decode(c, h, w) for c in meta['pseudo_masks']],
                               dtype=bool).reshape(-1, h, w))
        blurred.append(meta.get('blurred', False))
    return VideoClip(frames=np.stack(frames), annotations=annotations,
                     track_boxes=np.asarray(tracks['track_boxes'], dtype=np.float64),
                     track_classes=np.asarray(tracks['track_classes'], dtype=np.int64),
                     track_speeds=tracks['track_speeds'], seed=tracks['seed'],
                     blurred=np.asarray(blurred, dtype=bool),
                     track_occluded=np.asarray(tracks['track_occluded'], dtype=bool),
                     pseudo_masks=pseudo)


def make_clip(cfg: RunConfig, split: str, index: int) -> VideoClip:
    seed = clip_seed(cfg.seed, split, index)
    degradation = DegradationSpec(blur_prob=cfg.blur_prob, occlusion_prob=cfg.occlusion_prob,
                                  defocus_strength=cfg.defocus_strength)
    clip = generate_clip(cfg.frames_per_clip, cfg.image_size, cfg.image_size, cfg.num_objects,
                         cfg.motion_speed, degradation, seed, CLASS_VOCAB[:cfg.num_classes])
    clip.pseudo_masks = pseudo_masks_for(clip, cfg.pseudo_masks, seed=seed)
    return clip


def generate_dataset(cfg: RunConfig, root: Union[str, Path, None] = None) -> Path:
    """Render train and val clips and write them under ``root`` (default cfg.data_dir)."""
    root = Path(root if root is not None else cfg.data_dir)
    counts = {'train': cfg.num_train_clips, 'val': cfg.num_val_clips}
    manifest = {'format': FORMAT, 'classes': [f'{s}-{t}' for s, t in CLASS_VOCAB[:cfg.num_classes]],
                'image_size': cfg.image_size, 'frames_per_clip': cfg.frames_per_clip,
                'pseudo_masks': cfg.pseudo_masks, 'seed': cfg.seed, 'splits': {}, 'clips': {}}
    for split in SPLITS:
        ids = []
        for i in tqdm(range(counts[split]), desc=f'generate {split}'):
            clip_id = f'{split}_{i:05d}'
            clip = make_clip(cfg, split, i)
            write_clip(root / 'clips' / clip_id, clip)
            ids.append(clip_id)
            manifest['clips'][clip_id] = {'seed': clip.seed,
                                          'occluded': bool(clip.track_occluded.any())}
        manifest['splits'][split] = ids
    with open(root / MANIFEST, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logging.info('wrote %d train / %d val clips to %s', counts['train'], counts['val'], root)
    return root


class Dataset():
    """Read-only view of one split of a generated dataset."""

    def __init__(self, root: Union[str, Path], split: str = 'train') -> None:
        self.root = Path(root)
        manifest_path = self.root / MANIFEST
        if not manifest_path.exists():
            raise DatasetError(f'{manifest_path} does not exist.')
        with open(manifest_path, 'r', encoding='utf-8') as f:
            self.manifest = json.load(f)
        if self.manifest.get('format') != FORMAT:
            raise DatasetError(f'unsupported dataset format {self.manifest.get("format")!r}')
        if split not in self.manifest['splits']:
            raise DatasetError(f'split {split!r} not in {list(self.manifest["splits"])}')
        self.split = split
        self.clip_ids: List[str] = self.manifest['splits'][split]
        if not self.clip_ids:
            raise DatasetError(f'split {split!r} of {self.root} is empty')

    @property
    def classes(self) -> List[str]:
        return self.manifest['classes']

    @property
    def num_frames(self) -> int:
        return self.manifest['frames_per_clip']

    def occluded_indices(self) -> List[int]:
        return [i for i, c in enumerate(self.clip_ids) if self.manifest['clips'][c]['occluded']]

    def __len__(self) -> int:
        return len(self.clip_ids)

    def __getitem__(self, index: int) -> VideoClip:
        return read_clip(self.root / 'clips' / self.clip_ids[index], self.num_frames)
