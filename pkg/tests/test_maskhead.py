import math

import numpy as np
import numpy.testing as npt
import pytest

from VOD.faim.faim import FAIM
from VOD.faim.geometry import box_to_mask
from VOD.faim.maskhead import (FilteredMasks, MaskHead, MaskPair, MaskTensor,
                               filter_by_class, init_maskhead, mask_loss,
                               match_targets, pixel_window,
                               pool_instance_features, predict_masks,
                               total_loss)
from VOD.faim.numerics import Parameters, Tensor, flop_counter, grad_check
from VOD.faim.synthdata import generate_clip, pseudo_masks_for
from VOD.faim.utils import NonFiniteError, ShapeError


def pair(logits, target):
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    h, w = np.asarray(target).shape
    return MaskPair(prediction=logits, target=np.asarray(target, dtype=np.float64),
                    gt_index=0, window=(0, h, 0, w))


class TestFiltering():
    def test_equals_index_gather(self, rng):
        data = rng.standard_normal((5, 3, 4, 4))
        classes = [2, 0, 1, 1, 2]
        filtered = filter_by_class(MaskTensor(Tensor(data)), classes)
        assert filtered.classes == classes
        for i, t in enumerate(classes):
            npt.assert_array_equal(filtered.masks[i].numpy(), data[i, t].astype(np.float32))

    def test_class_agnostic_reads_channel_zero(self, rng):
        data = rng.standard_normal((2, 1, 3, 3))
        filtered = filter_by_class(MaskTensor(Tensor(data)), [4, 7], class_aware=False)
        npt.assert_array_equal(filtered.masks[1].numpy(), data[1, 0].astype(np.float32))

    def test_errors(self, rng):
        masks = MaskTensor(Tensor(rng.standard_normal((2, 3, 2, 2))))
        with pytest.raises(ShapeError):
            filter_by_class(masks, [0])
        with pytest.raises(IndexError):
            filter_by_class(masks, [0, 3])
        with pytest.raises(ShapeError):
            MaskTensor(Tensor(np.zeros((2, 2, 2))))


class TestHead():
    def test_degenerate_boxes_are_skipped(self, rng):
        f_ins = Tensor(rng.standard_normal((2, 4, 4)))
        pooled = pool_instance_features(f_ins, np.array([[0, 0, 16, 16], [40, 40, 50, 50]]), 8, roi_size=3)
        npt.assert_array_equal(pooled.kept, [0])
        assert pooled.skipped == [1]
        assert pooled.features.shape == (1, 2, 3, 3)
        assert pool_instance_features(f_ins, np.zeros((0, 4)), 8).features is None

    @pytest.mark.parametrize('upsample, side', [('bilinear', 8), ('deconv', 8), ('none', 4)])
    def test_prediction_shapes(self, rng, upsample, side):
        params = Parameters(rng_seed=0)
        init_maskhead(params, 2, 4, 3, upsample)
        masks = predict_masks(Tensor(rng.standard_normal((5, 2, 4, 4))), params, upsample)
        assert masks.logits.shape == (5, 3, side, side)

    def test_pixel_window_rounds_outward(self):
        assert pixel_window(np.array([1.2, 2.7, 5.1, 6.0]), 10, 10) == (2, 6, 1, 6)
        assert pixel_window(np.array([-3.0, 0.0, 12.5, 4.0]), 10, 10) == (0, 4, 0, 10)

    def test_head_trains_its_parameters(self, rng):
        params = Parameters(rng_seed=0)
        init_maskhead(params, 4, 4, 3)
        head = MaskHead(params, stride=8, roi_size=4)
        f_ins = Tensor(rng.standard_normal((4, 4, 4)))
        gt_boxes = np.array([[2, 2, 14, 12], [18, 16, 30, 30]], dtype=float)
        gt_masks = [box_to_mask(b, 32, 32) for b in gt_boxes]
        pairs, skipped = head(f_ins, gt_boxes + 0.5, [0, 2], gt_masks, gt_boxes)
        assert len(pairs) == 2 and skipped == []
        loss = head.loss(pairs)
        assert np.isfinite(loss.item())
        loss.backward()
        for name in ('mask.fcn0.weight', 'mask.fcn3.weight', 'mask.predictor.weight'):
            assert np.abs(params[name].grad).sum() > 0


class TestMatching():
    def setup_method(self):
        self.gt_boxes = np.array([[0, 0, 6, 6], [8, 8, 14, 14]], dtype=float)
        self.gt_masks = [box_to_mask(b, 16, 16) for b in self.gt_boxes]

    def test_best_mask_iou(self):
        filtered = FilteredMasks(masks=[Tensor(np.full((4, 4), 3.0))], classes=[0])
        pairs = match_targets(filtered, np.array([[8, 8, 14, 14]]), self.gt_masks, self.gt_boxes)
        assert len(pairs) == 1
        assert pairs[0].gt_index == 1
        assert pairs[0].window == (8, 14, 8, 14)
        assert pairs[0].prediction.shape == (6, 6)
        npt.assert_array_equal(pairs[0].target, np.ones((6, 6)))

    def test_falls_back_to_box_iou(self):
        filtered = FilteredMasks(masks=[Tensor(np.full((4, 4), -3.0))], classes=[0])
        pairs = match_targets(filtered, np.array([[7, 7, 13, 13]]), self.gt_masks, self.gt_boxes)
        assert pairs[0].gt_index == 1

    def test_nothing_to_match(self):
        filtered = FilteredMasks(masks=[Tensor(np.zeros((4, 4)))], classes=[0])
        assert match_targets(filtered, np.array([[0, 0, 4, 4]]), [], np.zeros((0, 4))) == []


class TestLoss():
    def test_empty_is_zero(self):
        assert mask_loss([]).item() == 0.0

    def test_mean_of_per_pair_means(self):
        small = pair(np.zeros((2, 2)), np.ones((2, 2)))
        large = pair(np.full((4, 4), 10.0), np.ones((4, 4)))
        expected = (math.log(2.0) + math.log1p(math.exp(-10.0))) / 2.0
        assert mask_loss([small, large]).item() == pytest.approx(expected, rel=1e-5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            mask_loss([pair(np.zeros((2, 2)), np.ones((2, 2)))], kind='focal')

    @pytest.mark.parametrize('kind', ['bce', 'dice'])
    @pytest.mark.parametrize('seed', range(3))
    def test_gradient(self, kind, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.standard_normal((5, 6)))
        target = (rng.random((5, 6)) > 0.5).astype(np.float64)
        assert grad_check(lambda p: mask_loss([pair(p, target)], kind), [logits]) < 1e-4

    def test_total_loss(self):
        parts = total_loss(1.5, 0.25, 2.0)
        assert parts.l_total == 1.5 + 2.0 * 0.25
        assert total_loss(1.5, 0.25, 0.0).l_total == 1.5
        with pytest.raises(NonFiniteError):
            total_loss(float('nan'), 0.1)
        with pytest.raises(ValueError):
            total_loss(1.0, -0.1)


class TestInferencePurity():
    @pytest.fixture
    def clip(self, small_cfg):
        return generate_clip(small_cfg.m_infer, small_cfg.image_size, small_cfg.image_size,
                             small_cfg.num_objects, seed=5)

    def test_no_mask_tensor_during_inference(self, small_cfg, clip):
        model = FAIM(small_cfg)
        assert model.mask_head is not None
        before = MaskTensor.instances
        model.infer(clip.frames)
        assert MaskTensor.instances == before

    def test_mask_branch_adds_no_inference_flops(self, small_cfg, clip):
        with_branch = FAIM(small_cfg)
        without = FAIM(small_cfg, params=with_branch.params, with_mask_branch=False)
        assert without.mask_head is None
        results = []
        for model in (with_branch, without):
            with flop_counter() as counter:
                dets = model(clip.frames)
            results.append((counter.total, counter.get('conv.mask'), dets))
        assert results[0][0] == results[1][0]
        assert results[0][1] == 0
        for a, b in zip(results[0][2], results[1][2]):
            npt.assert_array_equal(a.boxes, b.boxes)
            npt.assert_array_equal(a.scores, b.scores)

    def test_clip_losses(self, small_cfg, clip):
        model = FAIM(small_cfg)
        losses = model.clip_losses(clip.frames, clip.annotations, pseudo_masks_for(clip, 'exact'))
        assert np.isfinite(losses.l_det.item())
        assert losses.l_mask.item() >= 0.0
        assert losses.num_pairs <= small_cfg.mask_max_proposals * clip.num_frames
