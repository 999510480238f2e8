# -*- encoding: utf-8 -*-
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detector import LEVELS, STRIDES, BaseDetector, LevelOutput
from .fpsm import ProposalSet, select, with_box_features
from .ifem import InstanceFeatureMap, extract, init_ifem
from .maskhead import MaskHead, MaskPair, init_maskhead
from .numerics import Parameters, Tensor, no_grad
from .synthdata import FrameAnnotation
from .ticam import (TICAM, FrameDetections, classification_targets,
                    init_ticam, ticam_loss)
from .utils import NoProposalsError, RunConfig, get_logger

logging = get_logger()

BASE_PREFIXES = ('backbone.', 'neck.', 'head.')
NEW_PREFIXES = ('vo.', 'ifem.', 'mask.', 'ticam.')
INFERENCE_PREFIXES = BASE_PREFIXES + ('vo.', 'ifem.', 'ticam.')


@dataclass
class ClipLosses():
    l_det: Tensor
    l_mask: Tensor
    num_pairs: int = 0
    skipped_rois: int = 0
    warnings: List[str] = field(default_factory=list)


def is_base(name: str) -> bool:
    return name.startswith(BASE_PREFIXES)


class FAIM():
    """Detector -> FPSM -> (IFEM) -> TICAM, with the mask branch for training.

    ``aggregation`` selects the instance pathway: ``mask`` uses IFEM features
    at the proposal cells and trains the mask head, ``box`` uses RoIAlign box
    averages of the neck features, ``none`` is the single-frame detector.
    """

    def __init__(self, cfg: RunConfig, params: Optional[Parameters] = None,
                 with_mask_branch: bool = True) -> None:
        self.cfg = cfg
        self.params = params if params is not None else Parameters(rng_seed=cfg.seed)
        self.detector = BaseDetector(self.params, cfg.num_classes, cfg.vo_channels, cfg.image_size)
        self.mode = cfg.aggregation
        ins_width = cfg.ins_channels if self.mode == 'mask' else cfg.vo_channels
        if 'ifem.conv.weight' not in self.params:
            init_ifem(self.params, cfg.vo_channels, cfg.ins_channels)
        self.ticam: Optional[TICAM] = None
        if self.mode != 'none':
            if 'ticam.head.weight' not in self.params:
                init_ticam(self.params, cfg.vo_channels, ins_width, cfg.feature_dim, cfg.num_classes)
            self.ticam = TICAM(self.params, cfg.heads, cfg.score_fusion)
        self.level_index = LEVELS.index(cfg.fpn_level)
        self.mask_head = None
        if with_mask_branch and self.mode == 'mask':
            if 'mask.predictor.weight' not in self.params:
                init_maskhead(self.params, cfg.ins_channels, cfg.mask_dim,
                              cfg.num_classes if cfg.class_aware else 1, cfg.upsample)
            self.mask_head = MaskHead(self.params, STRIDES[cfg.fpn_level], cfg.roi_size,
                                      cfg.samples_per_bin, cfg.upsample, cfg.class_aware, cfg.loss)

    @property
    def inference_prefixes(self) -> Tuple[str, ...]:
        """Checkpoint prefixes an inference model of this mode holds."""
        if self.mode == 'none':
            return tuple(p for p in INFERENCE_PREFIXES if p != 'ticam.')
        return INFERENCE_PREFIXES

    @property
    def image_hw(self) -> Tuple[int, int]:
        return self.cfg.image_size, self.cfg.image_size

    def instance_maps(self, outputs: Sequence[LevelOutput]) -> List[InstanceFeatureMap]:
        return [extract(o.v_r, self.params, o.level) for o in outputs]

    def proposals(self, outputs: Sequence[LevelOutput], nms_threshold: float,
                  frame_indices: Optional[Sequence[int]] = None,
                  ins_maps: Optional[Sequence[InstanceFeatureMap]] = None) -> List[ProposalSet]:
        """One ProposalSet per frame of the batch, instance features per the aggregation mode."""
        candidates = self.detector.decode(outputs)
        frame_indices = list(frame_indices) if frame_indices is not None else list(range(len(candidates)))
        strides = [o.stride for o in outputs]
        result = []
        for i, cands in enumerate(candidates):
            f_cls = [o.f_cls[i] for o in outputs]
            f_ins = [m.tensor[i] for m in ins_maps] if self.mode == 'mask' and ins_maps is not None else None
            pset = select(cands, f_cls, f_ins, self.cfg.k, nms_threshold, self.cfg.n_cap, frame_indices[i])
            if self.mode == 'box':
                pset = with_box_features(pset, [o.feature[i] for o in outputs], strides)
            result.append(pset)
        return result

    def single_frame_detections(self, proposal_sets: Sequence[ProposalSet]) -> List[FrameDetections]:
        return [FrameDetections(frame_index=p.frame_index, boxes=p.boxes, class_ids=p.class_ids,
                                scores=p.scores) for p in proposal_sets]

    def infer(self, frames: np.ndarray,
              frame_indices: Optional[Sequence[int]] = None) -> Tuple[List[FrameDetections], List[ProposalSet]]:
        """Detections and the proposal sets they came from, for one group of frames."""
        with no_grad():
            outputs = self.detector(Tensor(frames))
            ins_maps = self.instance_maps(outputs) if self.mode == 'mask' else None
            psets = self.proposals(outputs, self.cfg.nms_infer, frame_indices, ins_maps)
            if self.mode == 'none':
                return self.single_frame_detections(psets), psets
            try:
                return self.ticam.detections(psets), psets
            except NoProposalsError:
                logging.warning('no proposals in frames %s', [p.frame_index for p in psets])
                return self.single_frame_detections(psets), psets

    def __call__(self, frames: np.ndarray, frame_indices: Optional[Sequence[int]] = None) -> List[FrameDetections]:
        """Inference on one group of frames [m, 3, H, W] aggregated together."""
        return self.infer(frames, frame_indices)[0]

    def pretrain_loss(self, frames: np.ndarray, annotations: Sequence[FrameAnnotation]) -> Tensor:
        outputs = self.detector(Tensor(frames))
        return self.detector.loss(outputs, [{'boxes': a.boxes, 'classes': a.classes} for a in annotations])

    def clip_losses(self, frames: np.ndarray, annotations: Sequence[FrameAnnotation],
                    pseudo_masks: Sequence[np.ndarray]) -> ClipLosses:
        """L_det (detector + TICAM classification) and L_mask for one group of frames."""
        outputs = self.detector(Tensor(frames))
        l_det = self.detector.loss(outputs, [{'boxes': a.boxes, 'classes': a.classes} for a in annotations])
        if self.mode == 'none':
            return ClipLosses(l_det=l_det, l_mask=Tensor(0.0))

        ins_maps = self.instance_maps(outputs) if self.mode == 'mask' else None
        psets = self.proposals(outputs, self.cfg.nms_train, ins_maps=ins_maps)
        try:
            bank, agg = self.ticam(psets)
        except NoProposalsError as e:
            return ClipLosses(l_det=l_det, l_mask=Tensor(0.0), warnings=[str(e)])
        targets = classification_targets(psets, [a.boxes for a in annotations],
                                         [a.classes for a in annotations], self.cfg.num_classes)
        l_det = l_det + ticam_loss(agg, targets)
        if self.mask_head is None:
            return ClipLosses(l_det=l_det, l_mask=Tensor(0.0))

        foreground = agg.class_logits.numpy()[:, :-1]
        classes = foreground.argmax(axis=1)
        pairs: List[MaskPair] = []
        skipped, row = 0, 0
        level_maps = ins_maps[self.level_index].tensor
        for i, pset in enumerate(psets):
            count = len(pset)
            take = min(count, self.cfg.mask_max_proposals)
            if take and len(annotations[i]):
                frame_pairs, frame_skipped = self.mask_head(
                    level_maps[i], pset.boxes[:take], classes[row:row + take].tolist(),
                    pseudo_masks[i], annotations[i].boxes)
                pairs.extend(frame_pairs)
                skipped += len(frame_skipped)
            row += count
        return ClipLosses(l_det=l_det, l_mask=self.mask_head.loss(pairs), num_pairs=len(pairs),
                          skipped_rois=skipped)

    def trainable_predicate(self, phase: str):
        if phase == 'pretrain':
            return is_base
        if self.cfg.freeze_base:
            return lambda name: name.startswith(NEW_PREFIXES)
        return lambda name: True
