import csv
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from Eval.metrics import (Detection, EvalReport, GroundTruth, bucket_map,
                          feature_variance_report, map_at)
from Train.TrainService import TrainService
from VOD.faim.dataset import Dataset
from VOD.faim.faim import FAIM
from VOD.faim.maskhead import pixel_window
from VOD.faim.numerics import (Parameters, Tensor, bilinear_resize,
                               load_parameters, no_grad)
from VOD.faim.synthdata import VideoClip, track_buckets
from VOD.faim.utils import DatasetError, RunConfig

POOLINGS = ('box', 'mask')
VARIANCE_FIELDS = ('seed', 'pooling', 'source', 'intra', 'inter', 'ratio')
ABLATION_FIELDS = ('seed', 'key', 'value', 'map50', 'map75', 'map50_95')


def frame_order(cfg: RunConfig, clip: VideoClip) -> List[np.ndarray]:
    """Frames shuffled with the run seed, in groups of at most m_infer."""
    order = np.random.default_rng([cfg.seed, clip.seed]).permutation(clip.num_frames)
    return [np.sort(order[i:i + cfg.m_infer]) for i in range(0, len(order), cfg.m_infer)]


def clip_detections(model: FAIM, clip: VideoClip, clip_index: int) -> List[Detection]:
    dets = []
    for group in frame_order(model.cfg, clip):
        for fd in model(clip.frames[group], frame_indices=group.tolist()):
            for box, cls, score in zip(fd.boxes, fd.class_ids, fd.scores):
                dets.append(Detection(frame_id=(clip_index, fd.frame_index), box=np.asarray(box),
                                      class_id=int(cls), score=float(score)))
    return dets


def clip_ground_truths(clip: VideoClip, clip_index: int) -> List[GroundTruth]:
    buckets = track_buckets(clip)
    gts = []
    for t, ann in enumerate(clip.annotations):
        for box, cls, track in zip(ann.boxes, ann.classes, ann.track_ids):
            bucket = buckets.get(int(track))
            gts.append(GroundTruth(frame_id=(clip_index, t), box=np.asarray(box), class_id=int(cls),
                                   bucket=bucket.value if bucket is not None else None))
    return gts


def pooled_instance_features(source: np.ndarray, clip: VideoClip, pooling: str) -> Dict[int, List[np.ndarray]]:
    """Per-class feature vectors of every visible instance of a clip.

    ``source`` is [T, C, H, W] at image resolution. ``box`` averages the
    box's pixel window, ``mask`` averages the instance mask pixels.
    """
    features: Dict[int, List[np.ndarray]] = {}
    _, _, height, width = source.shape
    for t, ann in enumerate(clip.annotations):
        for box, cls, mask in zip(ann.boxes, ann.classes, ann.masks):
            if pooling == 'box':
                r1, r2, c1, c2 = pixel_window(box, height, width)
                if r2 <= r1 or c2 <= c1:
                    continue
                vector = source[t, :, r1:r2, c1:c2].mean(axis=(1, 2))
            elif pooling == 'mask':
                if not mask.any():
                    continue
                vector = source[t][:, mask].mean(axis=1)
            else:
                raise ValueError(f'unknown pooling {pooling!r}')
            features.setdefault(int(cls), []).append(vector)
    return features


def ablation_summary(rows: Sequence[Dict], order: Sequence) -> Dict[str, Any]:
    """Per-seed ordering of map50 along ``order`` and the mean gain of its last value over its first.

    A seed counts as ordered when map50 never drops from one value to the
    next. Gains are in map50 points.
    """
    keys = [str(v) for v in order]
    by_seed: Dict[int, Dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(int(r['seed']), {})[str(r['value'])] = float(r['map50'])
    ordered, gains = 0, []
    for seed, maps in sorted(by_seed.items()):
        missing = [k for k in keys if k not in maps]
        if missing:
            raise ValueError(f'seed {seed} has no result for {missing}')
        values = [maps[k] for k in keys]
        ordered += all(a <= b for a, b in zip(values, values[1:]))
        gains.append(100.0 * (values[-1] - values[0]))
    return {'order': keys, 'seeds': len(by_seed), 'ordered_seeds': int(ordered),
            'mean_gain': float(np.mean(gains)) if gains else 0.0,
            'mean_map50': {k: float(np.mean([m[k] for m in by_seed.values()])) for k in keys}}


def variance_summary(rows: Sequence[Dict]) -> Dict[str, Any]:
    """Seeds whose mask-pooled ratio is below the box-pooled one, and the mean ratios."""
    by_seed: Dict[int, Dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(int(r['seed']), {})[r['pooling']] = float(r['ratio'])
    tighter = sum(1 for ratios in by_seed.values() if ratios['mask'] < ratios['box'])
    return {'seeds': len(by_seed), 'tighter_seeds': tighter,
            'mean_ratio': {p: float(np.mean([r[p] for r in by_seed.values()])) for p in POOLINGS}}


def load_model(cfg: RunConfig, checkpoint: Union[str, Path, None]) -> FAIM:
    model = FAIM(cfg, Parameters(rng_seed=cfg.seed), with_mask_branch=False)
    if checkpoint is not None:
        load_parameters(checkpoint, model.params, prefixes=model.inference_prefixes)
    return model


class EvalService():
    def __init__(self, cfg: RunConfig, run_dir: Union[str, Path, None] = None):
        logging.info('Initializing Eval Service...')
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir()

    def default_checkpoint(self) -> Optional[Path]:
        for phase in ('finetune', 'pretrain'):
            path = self.run_dir / phase / 'final'
            if (path / 'index.json').exists():
                return path
        return None

    def evaluate(self, dataset: Dataset, checkpoint: Union[str, Path, None] = None,
                 model: Optional[FAIM] = None) -> EvalReport:
        """Run inference over every clip of ``dataset`` and write report.json."""
        stime = time.time()
        if model is None:
            checkpoint = checkpoint if checkpoint is not None else self.default_checkpoint()
            if checkpoint is None:
                logging.warning('no checkpoint under %s; evaluating an untrained model', self.run_dir)
            model = load_model(self.cfg, checkpoint)
        dets, gts = [], []
        for i in range(len(dataset)):
            clip = dataset[i]
            dets.extend(clip_detections(model, clip, i))
            gts.extend(clip_ground_truths(clip, i))
        report = map_at(dets, gts)
        report.bucket_map50 = bucket_map(dets, gts, 0.5)
        report.counts['clips'] = len(dataset)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / 'report.json', 'w', encoding='utf-8') as f:
            json.dump(report.to_json(dataset.classes), f, indent=2)
        logging.info('map50 %.4f map75 %.4f map50_95 %.4f. time used %.2f',
                     report.map50, report.map75, report.map50_95, time.time() - stime)
        return report

    def feature_source(self, clip: VideoClip, model: Optional[FAIM]) -> np.ndarray:
        """[T, C, H, W] features the variance report pools, at image resolution.

        ``image`` is the raw frames, ``neck`` the P3 neck feature and ``ifem``
        the instance feature map extracted from the P3 video object branch.
        """
        if self.cfg.variance_source == 'image':
            return clip.frames.astype(np.float64)
        if model is None:
            raise ValueError(f'{self.cfg.variance_source} variance source needs a model')
        with no_grad():
            p3 = model.detector(Tensor(clip.frames))[0]
            if self.cfg.variance_source == 'neck':
                feature = p3.feature
            else:
                feature = model.instance_maps([p3])[0].tensor
            resized = bilinear_resize(feature, self.cfg.image_size, self.cfg.image_size)
        return resized.numpy().astype(np.float64)

    def variant_dir(self, seed: int, key: str, value: Any) -> Path:
        return self.cfg.replace(seed=seed).run_dir() / 'ablate' / f'{key}={value}'

    def seed_run(self, train: Dataset, seed: int, key: str, value: Any) -> Tuple[RunConfig, Path]:
        """Config and directory of one fine-tuned variant, training what is missing.

        Variants of one seed share that seed's pretrained detector.
        """
        seed_cfg = self.cfg.replace(seed=seed)
        trainer = TrainService(seed_cfg, seed_cfg.run_dir())
        base = trainer.base_checkpoint()
        if base is None:
            trainer.pretrain(train)
            base = trainer.base_checkpoint()
        variant = seed_cfg.replace(**{key: value, 'init_checkpoint': str(base)})
        variant_dir = self.variant_dir(seed, key, value)
        if not (variant_dir / 'finetune' / 'final' / 'index.json').exists():
            logging.info('ablation %s=%s seed %d in %s', key, value, seed, variant_dir)
            TrainService(variant, variant_dir).finetune(train)
        return variant, variant_dir

    def aggregation_model(self, seed: int, pooling: str, train: Optional[Dataset] = None) -> FAIM:
        """The fine-tuned aggregation=``pooling`` model of one seed."""
        if train is not None:
            variant, variant_dir = self.seed_run(train, seed, 'aggregation', pooling)
        else:
            variant = self.cfg.replace(seed=seed, aggregation=pooling)
            variant_dir = self.variant_dir(seed, 'aggregation', pooling)
        checkpoint = variant_dir / 'finetune' / 'final'
        if not (checkpoint / 'index.json').exists():
            raise FileNotFoundError(f'{checkpoint} does not exist; run ablate over aggregation first')
        return load_model(variant, checkpoint)

    def pooled_variance(self, dataset: Dataset, indices: Sequence[int],
                        models: Dict[str, Optional[FAIM]], seed: int) -> List[Dict]:
        """One variance row per pooling; each pooling reads the features of its own model."""
        grouped: Dict[str, Dict[int, List[np.ndarray]]] = {p: {} for p in models}
        for i in indices:
            clip = dataset[i]
            sources = {}
            for pooling, model in models.items():
                if id(model) not in sources:
                    sources[id(model)] = self.feature_source(clip, model)
                for cls, vectors in pooled_instance_features(sources[id(model)], clip, pooling).items():
                    grouped[pooling].setdefault(cls, []).extend(vectors)
        rows = []
        for pooling, acc in grouped.items():
            usable = {c: np.stack(v) for c, v in acc.items() if len(v) >= 2}
            intra, inter, ratio = feature_variance_report(usable)
            rows.append({'seed': seed, 'pooling': pooling, 'source': self.cfg.variance_source,
                         'intra': intra, 'inter': inter, 'ratio': ratio})
            logging.info('seed %d %s pooling: intra %.5f inter %.5f ratio %.5f', seed, pooling,
                         intra, inter, ratio)
        return rows

    def variance(self, dataset: Dataset, checkpoint: Union[str, Path, None] = None,
                 train: Optional[Dataset] = None) -> List[Dict]:
        """Intra/inter class variance of box- and mask-pooled features on occluded clips.

        Image features, or a given checkpoint, give one pair of rows where
        both poolings read the same features. Otherwise every seed of
        ``cfg.seeds`` pools the aggregation=box run with boxes and the
        aggregation=mask run with masks; missing runs are trained on ``train``.
        Writes variance.csv and variance_summary.json.
        """
        indices = dataset.occluded_indices()
        if not indices:
            raise DatasetError(f'no occluded clips in split {dataset.split!r}')
        if self.cfg.variance_source == 'image':
            rows = self.pooled_variance(dataset, indices, {p: None for p in POOLINGS}, self.cfg.seed)
        elif checkpoint is not None:
            model = load_model(self.cfg, checkpoint)
            rows = self.pooled_variance(dataset, indices, {p: model for p in POOLINGS}, self.cfg.seed)
        else:
            rows = []
            for seed in self.cfg.seeds:
                models = {p: self.aggregation_model(seed, p, train) for p in POOLINGS}
                rows.extend(self.pooled_variance(dataset, indices, models, seed))
        self._write_csv(self.run_dir / 'variance.csv', VARIANCE_FIELDS, rows)
        summary = variance_summary(rows)
        self._write_json(self.run_dir / 'variance_summary.json', summary)
        logging.info('mask pooling tighter in %d of %d seeds', summary['tighter_seeds'], summary['seeds'])
        return rows

    def ablate(self, train: Dataset, val: Dataset, key: Optional[str] = None,
               values: Optional[Sequence] = None) -> List[Dict]:
        """Fine-tune and evaluate every value of ``key`` for every seed of ``cfg.seeds``.

        Writes ablation.csv with one row per (seed, value) and
        ablation_summary.json with the per-seed ordering count and mean gain.
        """
        key = key if key is not None else self.cfg.ablate_key
        values = list(values) if values is not None else list(self.cfg.ablate_values)
        rows = []
        for seed in self.cfg.seeds:
            for value in values:
                variant, variant_dir = self.seed_run(train, seed, key, value)
                report = EvalService(variant, variant_dir).evaluate(val)
                rows.append({'seed': seed, 'key': key, 'value': value, 'map50': report.map50,
                             'map75': report.map75, 'map50_95': report.map50_95})
        self._write_csv(self.run_dir / 'ablation.csv', ABLATION_FIELDS, rows)
        summary = ablation_summary(rows, values)
        self._write_json(self.run_dir / 'ablation_summary.json', summary)
        logging.info('%s ordered in %d of %d seeds, mean gain %.2f map50 points', key,
                     summary['ordered_seeds'], summary['seeds'], summary['mean_gain'])
        return rows

    def _write_json(self, path: Path, data: Dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2)

    def _write_csv(self, path: Path, fields: Tuple[str, ...], rows: Sequence[Dict]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
