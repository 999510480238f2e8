import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from VOD.faim.numerics import (Parameters, Tensor, attention_heads, avg_pool2x2,
                               bce_with_logits, bilinear_resize,
                               binary_cross_entropy, concat, conv2d,
                               conv_transpose2x2, cross_entropy, float64_mode,
                               flop_counter, grad_check, init_attention,
                               interpolation_matrix, linear, load_parameters,
                               load_tensor, matmul, multi_head_attention,
                               no_grad, read_index, save_parameters,
                               save_tensor, sigmoid, silu, sliding_window,
                               softmax, stack)
from VOD.faim.numerics.tensorio import decode_tensor, encode_tensor
from VOD.faim.utils import DatasetError, NonFiniteError, ShapeError

pytestmark = pytest.mark.usefixtures('strict_float')

SEEDS = range(5)
TOLERANCE = 1e-4


def weighted(out: Tensor, seed: int) -> Tensor:
    """Scalar read-out with non-uniform weights so every output element matters."""
    w = np.random.default_rng(seed + 100).standard_normal(out.shape)
    return (out * w).sum()


class TestTensor():
    def test_storage_is_float32(self):
        t = Tensor([1.0, 2.0])
        assert t.numpy().dtype == np.float32

    def test_float64_mode_storage(self):
        with float64_mode():
            assert Tensor([1.0]).numpy().dtype == np.float64

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_item_needs_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_reflected_ops_with_ndarray(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = np.full(3, 2.0) * x
        assert isinstance(out, Tensor)
        out.sum().backward()
        npt.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_shared_parent_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        npt.assert_allclose(x.grad, [7.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.creator is None


class TestParameters():
    def test_init_independent_of_order(self):
        a, b = Parameters(rng_seed=7), Parameters(rng_seed=7)
        a.init_linear('one', 3, 4)
        a.init_conv('two', 2, 5, 3)
        b.init_conv('two', 2, 5, 3)
        b.init_linear('one', 3, 4)
        assert a.checksum() == b.checksum()

    def test_scope_names(self):
        params = Parameters()
        init_attention(params.scope('attn'), 8)
        assert 'attn.q.weight' in params
        assert params.scope('attn')['out.bias'].shape == (8,)

    def test_duplicate_name_rejected(self):
        params = Parameters()
        params.init_linear('fc', 2, 2)
        with pytest.raises(ValueError):
            params.init_linear('fc', 2, 2)

    def test_set_trainable(self):
        params = Parameters()
        params.init_linear('a', 2, 2)
        params.init_linear('b', 2, 2)
        params.set_trainable(lambda name: name.startswith('a.'))
        assert [n for n, _ in params.trainable()] == ['a.bias', 'a.weight']


@pytest.mark.parametrize('seed', SEEDS)
class TestGradients():
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        k = Tensor(rng.standard_normal((4, 3, 3, 3)))
        b = Tensor(rng.standard_normal(4))
        err = grad_check(lambda x, k, b: weighted(conv2d(x, k, b, padding=1), seed), [x, k, b])
        assert err < TOLERANCE

    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = (Tensor(rng.standard_normal(s)) for s in ((4, 3), (5, 3), (5,)))
        assert grad_check(lambda x, w, b: weighted(linear(x, w, b), seed), [x, w, b]) < TOLERANCE

    def test_softmax(self, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((3, 6)))
        assert grad_check(lambda x: weighted(softmax(x), seed), [x]) < TOLERANCE

    def test_attention(self, seed):
        rng = np.random.default_rng(seed)
        params = Parameters(rng_seed=seed)
        init_attention(params, 8)
        x = Tensor(rng.standard_normal((5, 8)))
        wq, wv = params['q.weight'], params['v.weight']

        def f(x, wq, wv):
            scoped = params.replaced({'q.weight': wq, 'v.weight': wv})
            return weighted(multi_head_attention(x, x, x, scoped, heads=2), seed)

        assert grad_check(f, [x, wq, wv]) < TOLERANCE

    def test_bilinear_resize(self, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((2, 4, 5)))
        assert grad_check(lambda x: weighted(bilinear_resize(x, 7, 3), seed), [x]) < TOLERANCE

    def test_avg_pool_and_silu(self, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((1, 2, 4, 4)))
        assert grad_check(lambda x: weighted(avg_pool2x2(silu(x)), seed), [x]) < TOLERANCE

    def test_conv_transpose(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 3, 3)))
        w = Tensor(rng.standard_normal((3, 2, 2, 2)))
        b = Tensor(rng.standard_normal(2))
        err = grad_check(lambda x, w, b: weighted(conv_transpose2x2(x, w, b), seed), [x, w, b])
        assert err < TOLERANCE

    def test_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.standard_normal((6, 4)))
        targets = rng.integers(0, 4, size=6)
        assert grad_check(lambda z: cross_entropy(z, targets).mean(), [logits]) < TOLERANCE

    def test_binary_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.standard_normal((3, 4)) * 2.0)
        target = (rng.random((3, 4)) > 0.5).astype(np.float64)
        assert grad_check(lambda z: binary_cross_entropy(z, target).mean(), [logits]) < TOLERANCE
        assert grad_check(lambda z: bce_with_logits(z, target).mean(), [logits]) < TOLERANCE

    def test_gather_concat_stack(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((3, 2)))
        b = Tensor(rng.standard_normal((3, 2)))

        def f(a, b):
            joined = concat([a, b[np.array([0, 0, 2])]], axis=1)
            return weighted(stack([sigmoid(joined), joined * joined]), seed)

        assert grad_check(f, [a, b]) < TOLERANCE


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), [Tensor([1.0])], epsilon=1e-1)


def test_grad_check_needs_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, [Tensor([1.0, 2.0])])


def test_bce_at_half_is_ln2():
    loss = binary_cross_entropy(Tensor(np.zeros((1, 1))), np.ones((1, 1)))
    assert abs(loss.item() - math.log(2.0)) < 1e-6


def test_attention_matches_naive_loop(rng):
    dim, heads, n = 8, 2, 5
    params = Parameters(rng_seed=3)
    init_attention(params, dim)
    x = rng.standard_normal((n, dim))
    with float64_mode():
        got = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), params, heads).numpy()

    def proj(name, v):
        return v @ params[f'{name}.weight'].numpy().astype(np.float64).T + params[f'{name}.bias'].numpy()

    q, k, v = proj('q', x), proj('k', x), proj('v', x)
    dh = dim // heads
    context = np.zeros((n, dim))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, cols] @ k[j, cols] / math.sqrt(dh) for j in range(n)])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            context[i, cols] = sum(weights[j] * v[j, cols] for j in range(n))
    npt.assert_allclose(got, proj('out', context), atol=1e-5)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ShapeError):
        attention_heads(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), heads=4)


def test_flop_counter_labels():
    a, b = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 5)))
    with flop_counter() as counter:
        matmul(a, b, label='attention.scores')
        conv2d(Tensor(np.ones((1, 2, 6, 6))), Tensor(np.ones((3, 2, 3, 3))), Tensor(np.zeros(3)),
               padding=1, label='conv.test')
    assert counter.get('attention.scores') == 2 * 3 * 4 * 5
    assert counter.get('conv') == 6 * 6 * 3 * 2 * 9
    assert counter.total == 2 * 3 * 4 * 5 + 6 * 6 * 3 * 2 * 9


def test_flop_count_independent_of_values(rng):
    def macs(x):
        with flop_counter() as counter:
            bilinear_resize(Tensor(x), 9, 9)
        return counter.total

    assert macs(np.zeros((2, 4, 4))) == macs(rng.standard_normal((2, 4, 4)))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4))
def test_interpolation_rows_sum_to_one(in_size, out_size, samples):
    weights = interpolation_matrix(in_size, out_size, samples=samples)
    npt.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    assert (weights >= 0).all()


def test_resize_same_size_is_identity(rng):
    x = rng.standard_normal((3, 5, 4))
    npt.assert_allclose(bilinear_resize(Tensor(x), 5, 4).numpy(), x.astype(np.float32), atol=1e-6)


def test_sliding_window_shape():
    x = np.arange(2 * 5 * 6, dtype=np.float64).reshape(2, 5, 6)
    windows = sliding_window(x, 3, 3)
    assert windows.shape == (2, 3, 4, 3, 3)
    npt.assert_array_equal(windows[1, 2, 3], x[1, 2:5, 3:6])


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 2, 2))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((3, 2, 5, 5))), Tensor(np.zeros(3)))


class TestTensorIO():
    def test_tensor_file(self, tmp_path, rng):
        x = rng.standard_normal((2, 3, 4)).astype(np.float32)
        save_tensor(tmp_path / 'x.fvt', x)
        npt.assert_array_equal(load_tensor(tmp_path / 'x.fvt'), x)

    def test_bad_magic(self):
        raw = bytearray(encode_tensor(np.ones(3)))
        raw[:4] = b'NOPE'
        with pytest.raises(DatasetError):
            decode_tensor(bytes(raw))

    def test_truncated_payload(self):
        with pytest.raises(DatasetError):
            decode_tensor(encode_tensor(np.ones(3))[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tensor(tmp_path / 'absent.fvt')

    def test_checkpoint_directory(self, tmp_path):
        params = Parameters(rng_seed=5)
        params.init_linear('backbone.fc', 3, 4)
        params.init_linear('ticam.fc', 4, 2)
        save_parameters(tmp_path / 'ckpt', params, {'backbone.fc.weight': np.ones((4, 3))}, {'iteration': 9})
        assert read_index(tmp_path / 'ckpt')['meta'] == {'iteration': 9}

        fresh = Parameters(rng_seed=6)
        fresh.init_linear('backbone.fc', 3, 4)
        fresh.init_linear('ticam.fc', 4, 2)
        ticam_before = fresh.checksum(['ticam.fc.weight', 'ticam.fc.bias'])
        extra, meta = load_parameters(tmp_path / 'ckpt', fresh, prefixes=('backbone.',))
        assert meta['iteration'] == 9
        npt.assert_array_equal(extra['backbone.fc.weight'], np.ones((4, 3)))
        names = ['backbone.fc.weight', 'backbone.fc.bias']
        assert fresh.checksum(names) == params.checksum(names)
        assert fresh.checksum(['ticam.fc.weight', 'ticam.fc.bias']) == ticam_before

    def test_strict_load_reports_missing(self, tmp_path):
        params = Parameters()
        params.init_linear('a', 2, 2)
        save_parameters(tmp_path / 'ckpt', params)
        bigger = Parameters()
        bigger.init_linear('a', 2, 2)
        bigger.init_linear('b', 2, 2)
        with pytest.raises(ShapeError):
            load_parameters(tmp_path / 'ckpt', bigger)


class TestConvExamples():
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 5, 6)).astype(np.float32)
        kernel = np.zeros((2, 2, 3, 3))
        kernel[0, 0, 1, 1] = kernel[1, 1, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(2)), padding=1)
        npt.assert_array_equal(out.numpy(), x)

    def test_zero_input_zero_bias(self, rng):
        out = conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(rng.standard_normal((2, 3, 3, 3))),
                     Tensor(np.zeros(2)), padding=1)
        npt.assert_array_equal(out.numpy(), 0.0)

    def test_ones_kernel_on_constant_input(self):
        c = 1.5
        out = conv2d(Tensor(np.full((1, 5, 5), c)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)),
                     padding=1).numpy()
        npt.assert_allclose(out[0, 1:4, 1:4], 9 * c)
        assert out[0, 0, 0] == pytest.approx(4 * c)


class TestLinearExamples():
    def test_hand_dot_product(self):
        out = linear(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        npt.assert_array_equal(out.numpy(), [[5.0]])

    def test_identity_and_constant(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        npt.assert_allclose(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).numpy(), x, atol=1e-7)
        b = np.array([1.0, -2.0])
        npt.assert_array_equal(linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b)).numpy(), np.tile(b, (3, 1)))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))


class TestSoftmaxExamples():
    def test_analytic_pair(self):
        out = softmax(Tensor([0.0, math.log(2.0)])).numpy()
        npt.assert_allclose(out, [1.0 / 3.0, 2.0 / 3.0], atol=1e-7)

    def test_constant_is_uniform(self):
        npt.assert_allclose(softmax(Tensor(np.full((2, 5), 3.0))).numpy(), 0.2, atol=1e-7)

    @given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
    def test_shift_invariance_and_rows(self, seed, shift):
        x = np.random.default_rng(seed).standard_normal((4, 6)) * 5.0
        with float64_mode():
            out = softmax(Tensor(x)).numpy()
            shifted = softmax(Tensor(x + shift)).numpy()
        npt.assert_allclose(shifted, out, atol=1e-6)
        npt.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert ((out > 0) & (out < 1)).all()


class TestResizeExamples():
    def test_two_to_four_half_pixel(self):
        out = bilinear_resize(Tensor([[[0.0, 1.0]]]), 1, 4).numpy()
        expected = []
        for i in range(4):
            src = min(max((i + 0.5) * 2 / 4 - 0.5, 0.0), 1.0)
            expected.append(src)
        npt.assert_allclose(out[0, 0], expected, atol=1e-7)
        npt.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)

    @pytest.mark.parametrize('size', [(1, 1), (3, 7), (11, 4)])
    def test_constant_preserved(self, size):
        out = bilinear_resize(Tensor(np.full((2, 5, 3), -0.75)), *size).numpy()
        assert out.shape == (2,) + size
        npt.assert_allclose(out, -0.75, atol=1e-6)


class TestGradCheckExamples():
    def test_sum_is_exact(self, rng):
        assert grad_check(lambda x: x.sum(), [Tensor(rng.standard_normal((3, 4)))]) < 1e-8

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        npt.assert_allclose(x.grad, [2.0, 4.0])
        assert grad_check(lambda x: (x * x).sum(), [Tensor([1.0, 2.0])]) < 1e-6

    @pytest.mark.parametrize('seed', SEEDS)
    def test_conv_softmax_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((1, 4, 4)))
        k = Tensor(rng.standard_normal((2, 1, 3, 3)))
        b = Tensor(np.zeros(2))
        err = grad_check(lambda x, k, b: weighted(softmax(conv2d(x, k, b, padding=1)), seed), [x, k, b])
        assert err < TOLERANCE
