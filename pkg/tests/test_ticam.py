import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from Train.TrainService import SGD
from VOD.faim.fpsm import ProposalSet
from VOD.faim.numerics import Parameters, Tensor, grad_check, no_grad, softmax
from VOD.faim.ticam import (TICAM, AggregatedFeatures, QueryBank, aggregate, build_queries,
                            classification_targets, final_detections,
                            init_ticam, sample_frames, ticam_loss)
from VOD.faim.utils import AlignmentError, NoProposalsError

CLS_C, INS_C, DIM, K, HEADS = 4, 6, 8, 3, 2


@pytest.fixture
def params():
    p = Parameters(rng_seed=3)
    init_ticam(p, CLS_C, INS_C, DIM, K)
    return p


def pset(frame_index, n, seed=0):
    rng = np.random.default_rng([seed, frame_index])
    if n == 0:
        return ProposalSet(frame_index=frame_index, boxes=np.zeros((0, 4)), scores=np.zeros(0),
                           class_ids=np.zeros(0, dtype=np.int64), cls_feats=None, ins_feats=None)
    xy = rng.uniform(0, 40, size=(n, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(5, 20, size=(n, 2))], axis=1)
    return ProposalSet(frame_index=frame_index, boxes=boxes, scores=rng.uniform(0.1, 1.0, n),
                       class_ids=rng.integers(0, K, n),
                       cls_feats=Tensor(rng.standard_normal((n, CLS_C))),
                       ins_feats=Tensor(rng.standard_normal((n, INS_C))))


class TestSampling():
    @given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 1000))
    def test_global(self, num_frames, m, seed):
        idx = sample_frames(num_frames, m, np.random.default_rng(seed))
        assert len(idx) == min(m, num_frames)
        assert list(idx) == sorted(set(idx.tolist()))
        assert idx.min() >= 0 and idx.max() < num_frames

    def test_local_window_holds_key_frame(self, rng):
        idx = sample_frames(20, 5, rng, mode='local', key_frame=10)
        npt.assert_array_equal(idx, [8, 9, 10, 11, 12])
        npt.assert_array_equal(sample_frames(20, 5, rng, mode='local', key_frame=0), np.arange(5))
        npt.assert_array_equal(sample_frames(20, 5, rng, mode='local', key_frame=19), np.arange(15, 20))

    def test_mixed_contains_local_window(self, rng):
        idx = sample_frames(30, 8, rng, mode='mixed', m_local=3, key_frame=15)
        assert len(idx) == 8 and len(set(idx.tolist())) == 8
        assert {14, 15, 16} <= set(idx.tolist())

    def test_more_frames_than_clip(self, rng):
        npt.assert_array_equal(sample_frames(4, 10, rng), np.arange(4))

    def test_bad_arguments(self, rng):
        with pytest.raises(ValueError):
            sample_frames(0, 3, rng)
        with pytest.raises(ValueError):
            sample_frames(5, 3, rng, mode='random')


class TestQueries():
    def test_origin_skips_empty_frames(self, params):
        bank = build_queries([pset(0, 2), pset(1, 0), pset(2, 3)], params)
        assert bank.origin == [(0, 0), (0, 1), (2, 0), (2, 1), (2, 2)]
        assert bank.q_cls.shape == bank.q_ins.shape == (5, DIM)
        assert bank.m_frames == 2

    def test_all_empty_raises(self, params):
        with pytest.raises(NoProposalsError):
            build_queries([pset(0, 0), pset(1, 0)], params)

    def test_single_row_bank(self, params):
        bank = build_queries([pset(0, 1)], params)
        assert len(bank) == 1 and bank.m_frames == 1
        logits = aggregate(bank, params, HEADS).class_logits.numpy()

        def affine(x, name):
            return x @ params[f'{name}.weight'].data.T + params[f'{name}.bias'].data

        def attend_self(x, scope):
            # one key: the softmax is 1, so attention returns the projected value
            return x + affine(affine(x, f'{scope}.v'), f'{scope}.out')

        a_cls = attend_self(bank.q_cls.numpy(), 'ticam.attn_cls')
        a_ins = attend_self(bank.q_ins.numpy(), 'ticam.attn_ins')
        fused = affine(np.concatenate([a_cls, a_ins], axis=1), 'ticam.fuse')
        npt.assert_allclose(logits, affine(fused, 'ticam.head'), atol=1e-5)

    def test_zero_instance_queries_match_cls_only_fusion(self, params):
        rng = np.random.default_rng(5)
        q_cls = Tensor(rng.standard_normal((6, DIM)))
        origin = [(i // 2, i % 2) for i in range(6)]
        zero_ins = aggregate(QueryBank(q_cls, Tensor(np.zeros((6, DIM))), origin, 3), params, HEADS)
        params['ticam.fuse.weight'].data[:, DIM:] = 0.0
        cls_only = aggregate(QueryBank(q_cls, Tensor(rng.standard_normal((6, DIM))), origin, 3),
                             params, HEADS)
        npt.assert_allclose(zero_ins.class_logits.numpy(), cls_only.class_logits.numpy(), atol=1e-5)

    def test_permutation_equivariant(self, params):
        bank = build_queries([pset(0, 3), pset(1, 4)], params)
        perm = np.random.default_rng(0).permutation(len(bank))
        shuffled = QueryBank(q_cls=bank.q_cls[perm], q_ins=bank.q_ins[perm],
                             origin=[bank.origin[i] for i in perm], m_frames=bank.m_frames)
        a = aggregate(bank, params, HEADS).class_logits.numpy()
        b = aggregate(shuffled, params, HEADS).class_logits.numpy()
        npt.assert_allclose(b, a[perm], atol=1e-5)

    @pytest.mark.parametrize('seed', range(3))
    def test_aggregation_gradient(self, params, seed):
        rng = np.random.default_rng(seed)
        q_cls = Tensor(rng.standard_normal((5, DIM)))
        q_ins = Tensor(rng.standard_normal((5, DIM)))
        w = rng.standard_normal((5, K + 1))
        origin = [(0, i) for i in range(5)]

        def f(qc, qi):
            return (aggregate(QueryBank(qc, qi, origin, 1), params, HEADS).class_logits * w).sum()

        assert grad_check(f, [q_cls, q_ins]) < 1e-4

    def test_loss_reaches_every_module(self, params):
        sets = [pset(0, 3), pset(1, 2)]
        bank = build_queries(sets, params)
        agg = aggregate(bank, params, HEADS)
        loss = ticam_loss(agg, np.array([0, 1, 2, 3, 3]))
        loss.backward()
        for name in ('ticam.lp_cls.weight', 'ticam.lp_ins.weight', 'ticam.attn_cls.q.weight',
                     'ticam.attn_ins.out.weight', 'ticam.fuse.weight', 'ticam.head.weight'):
            assert params[name].grad is not None


class TestDetections():
    def test_boxes_pass_through(self, params):
        sets = [pset(0, 2), pset(1, 0), pset(2, 3)]
        dets = TICAM(params, HEADS).detections(sets)
        assert [len(d) for d in dets] == [2, 0, 3]
        for d, p in zip(dets, sets):
            npt.assert_array_equal(d.boxes, p.boxes)
            assert d.frame_index == p.frame_index
            assert ((d.scores >= 0) & (d.scores <= 1)).all()
            assert ((d.class_ids >= 0) & (d.class_ids < K)).all()

    def test_multiply_scales_by_proposal_score(self, params):
        sets = [pset(0, 3), pset(1, 2)]
        bank, agg = TICAM(params, HEADS)(sets)
        replaced = final_detections(sets, bank, agg, 'replace')
        multiplied = final_detections(sets, bank, agg, 'multiply')
        for r, m, p in zip(replaced, multiplied, sets):
            npt.assert_array_equal(r.class_ids, m.class_ids)
            npt.assert_allclose(m.scores, r.scores * p.scores)
        with pytest.raises(ValueError):
            final_detections(sets, bank, agg, 'max')

    def test_one_hot_logits(self):
        logits = np.zeros((1, 6))
        logits[0, 3] = 30.0
        sets = [pset(0, 1)]
        bank = QueryBank(q_cls=Tensor(np.zeros((1, DIM))), q_ins=Tensor(np.zeros((1, DIM))),
                         origin=[(0, 0)], m_frames=1)
        agg = AggregatedFeatures(features=Tensor(np.zeros((1, DIM))), class_logits=Tensor(logits))
        [det] = final_detections(sets, bank, agg)
        npt.assert_array_equal(det.boxes, sets[0].boxes)
        assert det.class_ids.tolist() == [3]
        assert det.scores[0] == pytest.approx(1.0, abs=1e-9)

    def test_misaligned_rows(self, params):
        sets = [pset(0, 2), pset(1, 2)]
        bank, agg = TICAM(params, HEADS)(sets)
        bank.origin[0], bank.origin[2] = bank.origin[2], bank.origin[0]
        with pytest.raises(AlignmentError):
            final_detections(sets, bank, agg)
        bank, agg = TICAM(params, HEADS)(sets)
        with pytest.raises(AlignmentError):
            final_detections(sets[:1], bank, agg)


def test_classification_targets():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 6], [30, 30, 40, 40]], dtype=float)
    p = ProposalSet(frame_index=0, boxes=boxes, scores=np.ones(3), class_ids=np.zeros(3, dtype=np.int64),
                    cls_feats=None, ins_feats=None)
    targets = classification_targets([p, pset(1, 0)], [np.array([[0, 0, 10, 10]]), np.zeros((0, 4))],
                                     [np.array([2]), np.zeros(0, dtype=np.int64)], K)
    npt.assert_array_equal(targets, [2, 2, K])


def test_no_ground_truth_is_background():
    targets = classification_targets([pset(0, 3)], [np.zeros((0, 4))], [np.zeros(0, dtype=np.int64)], K)
    npt.assert_array_equal(targets, [K, K, K])


@pytest.mark.slow
def test_aggregation_recovers_a_blurred_frame():
    num_classes, frames = 3, 5
    params = Parameters(rng_seed=7)
    init_ticam(params, CLS_C, INS_C, DIM, num_classes)
    model = TICAM(params, HEADS)
    optimizer = SGD(params)
    prototypes = np.random.default_rng(100)
    cls_protos = 2.0 * prototypes.standard_normal((num_classes, CLS_C))
    ins_protos = 2.0 * prototypes.standard_normal((num_classes, INS_C))

    def scene(rng, blurred):
        """One object seen in every frame; the blurred frame keeps a tenth of the signal."""
        label = int(rng.integers(num_classes))
        sets = []
        for t in range(frames):
            signal, noise = (0.1, 1.0) if t == blurred else (1.0, 0.3)
            cls = signal * cls_protos[label] + noise * rng.standard_normal(CLS_C)
            ins = signal * ins_protos[label] + noise * rng.standard_normal(INS_C)
            sets.append(ProposalSet(frame_index=t, boxes=np.array([[10.0, 10.0, 30.0, 30.0]]),
                                    scores=np.ones(1), class_ids=np.array([label]),
                                    cls_feats=Tensor(cls[None]), ins_feats=Tensor(ins[None])))
        return sets, label

    rng = np.random.default_rng(0)
    for _ in range(300):
        sets, label = scene(rng, int(rng.integers(frames)))
        _, agg = model(sets)
        loss = ticam_loss(agg, np.full(frames, label))
        params.zero_grad()
        loss.backward()
        optimizer.step(0.02)

    rng = np.random.default_rng(1)
    aggregated, single = [], []
    with no_grad():
        for _ in range(20):
            sets, label = scene(rng, frames - 1)
            _, agg = model(sets)
            aggregated.append(softmax(agg.class_logits).numpy()[-1, label])
            _, alone = model(sets[-1:])
            single.append(softmax(alone.class_logits).numpy()[0, label])
    assert np.mean(aggregated) > np.mean(single)
    assert np.mean(aggregated) > 0.5
