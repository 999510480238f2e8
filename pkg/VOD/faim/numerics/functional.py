# -*- encoding: utf-8 -*-
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from ..utils import ShapeError
from .tensor import Function, Parameters, Tensor, as_tensor, count_macs


# ---------- windows ----------

def sliding_window(x: np.ndarray, window_h: int, window_w: int) -> np.ndarray:
    """[..., H, W] -> read-only [..., H-wh+1, W-ww+1, wh, ww] view."""
    shape = x.shape[:-2] + (x.shape[-2] - window_h + 1, x.shape[-1] - window_w + 1, window_h, window_w)
    strides = x.strides + x.strides[-2:]
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides, writeable=False)


def interpolation_matrix(in_size: int, out_size: int, start: float = 0.0,
                         extent: Optional[float] = None, samples: int = 1) -> np.ndarray:
    """Bilinear weights [out_size, in_size] along one axis.

    Output bin i covers [start + i*step, start + (i+1)*step) in pixel space
    with step = extent / out_size; it averages `samples` regularly spaced
    points. A pixel-space point p is read at index coordinate p - 0.5,
    clamped to [0, in_size - 1].
    """
    if extent is None:
        extent = float(in_size)
    step = extent / out_size
    offsets = (np.arange(samples) + 0.5) / samples
    points = start + (np.arange(out_size)[:, None] + offsets[None, :]) * step
    coords = np.clip(points - 0.5, 0.0, in_size - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = coords - lo
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.repeat(np.arange(out_size)[:, None], samples, axis=1)
    np.add.at(weights, (rows, lo), (1.0 - frac) / samples)
    np.add.at(weights, (rows, hi), frac / samples)
    return weights


# ---------- elementwise ----------

def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    if a.shape != b.shape:
        raise ShapeError(f'shape mismatch: {a.shape} vs {b.shape}')
    return a, b


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        b = b.astype(np.float64)
        return grad / b, -grad * a / (b * b)


class Maximum(Function):
    def forward(self, a, b):
        self.mask = a >= b
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return grad * self.mask, grad * ~self.mask


class Minimum(Function):
    def forward(self, a, b):
        self.mask = a <= b
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return grad * self.mask, grad * ~self.mask


def add(a, b) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_pair(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_pair(a, b))


def maximum(a, b) -> Tensor:
    return Maximum.apply(*_pair(a, b))


def minimum(a, b) -> Tensor:
    return Minimum.apply(*_pair(a, b))


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class SiLU(Function):
    def forward(self, x):
        x64 = x.astype(np.float64)
        self.saved = (x64, expit(x64))
        return x64 * self.saved[1]

    def backward(self, grad):
        x, s = self.saved
        return (grad * (s + x * s * (1.0 - s)),)


class Sigmoid(Function):
    def forward(self, x):
        self.s = expit(x.astype(np.float64))
        return self.s

    def backward(self, grad):
        return (grad * self.s * (1.0 - self.s),)


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tabs(x: Tensor) -> Tensor:
    return Abs.apply(x)


# ---------- shape ----------

class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, index):
        self.index = index
        self.in_shape = x.shape
        return np.array(x[index])

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=np.float64)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError('concat of an empty list')
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: List[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError('stack of an empty list')
    return Stack.apply(*tensors, axis=axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    total = tsum(x, axis=axis, keepdims=keepdims)
    return total * (1.0 / max(count, 1))


# ---------- dense ----------

class MatMul(Function):
    def forward(self, a, b, label='matmul'):
        self.saved = (a, b)
        batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
        count_macs(label, batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
        return a @ b

    def backward(self, grad):
        a, b = self.saved
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


def matmul(a: Tensor, b: Tensor, label: str = 'matmul') -> Tensor:
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul shapes {a.shape} @ {b.shape}')
    return MatMul.apply(a, b, label=label)


class Linear(Function):
    def forward(self, x, weight, bias, label='linear'):
        self.saved = (x, weight)
        rows = x.size // x.shape[-1] if x.size else 0
        count_macs(label, rows * weight.shape[0] * weight.shape[1])
        return x @ weight.T + bias

    def backward(self, grad):
        x, w = self.saved
        g2 = grad.reshape(-1, w.shape[0])
        x2 = x.reshape(-1, w.shape[1])
        return grad @ w, g2.T @ x2, g2.sum(axis=0)


def linear(input: Tensor, weight: Tensor, bias: Tensor, label: str = 'linear') -> Tensor:
    """Affine map along the last dimension: input @ weight.T + bias."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f'linear weight {weight.shape} / bias {bias.shape}')
    if input.shape[-1] != weight.shape[1]:
        raise ShapeError(f'linear input last dim {input.shape[-1]} != Din {weight.shape[1]}')
    return Linear.apply(input, weight, bias, label=label)


# ---------- softmax family ----------

class Softmax(Function):
    def forward(self, x):
        z = x.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.s = e / e.sum(axis=-1, keepdims=True)
        return self.s

    def backward(self, grad):
        s = self.s
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x):
        z = x.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        self.s = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.s * grad.sum(axis=-1, keepdims=True),)


def softmax(input: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if input.ndim == 0 or input.shape[-1] < 1:
        raise ShapeError('softmax needs a non-empty last axis')
    return Softmax.apply(input)


def log_softmax(input: Tensor) -> Tensor:
    return LogSoftmax.apply(input)


class CrossEntropy(Function):
    def forward(self, logits, targets=None):
        z = logits.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.p = np.exp(logp)
        self.targets = targets
        return -logp[np.arange(len(targets)), targets]

    def backward(self, grad):
        g = self.p.copy()
        g[np.arange(len(self.targets)), self.targets] -= 1.0
        return (grad[:, None] * g,)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer targets; logits [N, K]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f'cross_entropy logits {logits.shape} targets {targets.shape}')
    return CrossEntropy.apply(logits, targets=targets)


class BinaryCrossEntropy(Function):
    def forward(self, logits, target=None, clip=1e-7):
        p = expit(logits.astype(np.float64))
        pc = np.clip(p, clip, 1.0 - clip)
        self.inside = (p > clip) & (p < 1.0 - clip)
        self.p = p
        self.target = target
        return -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))

    def backward(self, grad):
        return (grad * (self.p - self.target) * self.inside,)


def binary_cross_entropy(logits: Tensor, target: np.ndarray, clip: float = 1e-7) -> Tensor:
    """Elementwise BCE on sigmoid(logits), probabilities clipped to [clip, 1-clip]."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f'bce target {target.shape} != logits {logits.shape}')
    return BinaryCrossEntropy.apply(logits, target=target, clip=clip)


class BCEWithLogits(Function):
    def forward(self, logits, target=None):
        z = logits.astype(np.float64)
        self.p = expit(z)
        self.target = target
        return np.logaddexp(0.0, z) - target * z

    def backward(self, grad):
        return (grad * (self.p - self.target),)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Unclipped, overflow-safe elementwise BCE used by the detector losses."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f'bce target {target.shape} != logits {logits.shape}')
    return BCEWithLogits.apply(logits, target=target)


# ---------- convolution ----------

class Conv2d(Function):
    def forward(self, x, kernel, bias, padding=0, label='conv2d'):
        n, cin, h, w = x.shape
        cout, _, kh, kw = kernel.shape
        self.padding = padding
        self.in_hw = (h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window(xp, kh, kw)
        ho, wo = windows.shape[2], windows.shape[3]
        count_macs(label, n * cout * ho * wo * cin * kh * kw)
        out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
        self.saved = (windows, kernel, xp.shape)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]

    def backward(self, grad):
        windows, kernel, xp_shape = self.saved
        kh, kw = kernel.shape[2:]
        ho, wo = grad.shape[2:]
        gk = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad.sum(axis=(0, 2, 3))
        gxp = np.zeros(xp_shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, kernel[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + ho, j:j + wo] += contrib.transpose(0, 3, 1, 2)
        p = self.padding
        h, w = self.in_hw
        return gxp[:, :, p:p + h, p:p + w], gk, gb


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0,
           label: str = 'conv2d') -> Tensor:
    """Stride-1 cross-correlation. input is [Cin,H,W] or batched [N,Cin,H,W]."""
    if kernel.ndim != 4:
        raise ShapeError(f'kernel must be [Cout,Cin,kh,kw], got {kernel.shape}')
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f'kernel size must be odd, got {kh}x{kw}')
    if padding < 0:
        raise ShapeError(f'padding must be >= 0, got {padding}')
    if bias.shape != (cout,):
        raise ShapeError(f'bias {bias.shape} does not match Cout={cout}')
    single = input.ndim == 3
    if input.ndim not in (3, 4):
        raise ShapeError(f'conv2d input must be 3D or 4D, got {input.shape}')
    x = input.reshape((1,) + input.shape) if single else input
    if x.shape[1] != cin:
        raise ShapeError(f'input channels {x.shape[1]} != kernel Cin {cin}')
    ho = x.shape[2] + 2 * padding - kh + 1
    wo = x.shape[3] + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f'conv2d output would be {ho}x{wo}')
    out = Conv2d.apply(x, kernel, bias, padding=padding, label=label)
    return out.reshape(out.shape[1:]) if single else out


class AvgPool2x2(Function):
    def forward(self, x):
        h, w = x.shape[-2:]
        return x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def backward(self, grad):
        return (np.repeat(np.repeat(grad, 2, axis=-2), 2, axis=-1) * 0.25,)


def avg_pool2x2(x: Tensor) -> Tensor:
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f'avg_pool2x2 needs even spatial dims, got {x.shape}')
    return AvgPool2x2.apply(x)


class ConvTranspose2x2(Function):
    def forward(self, x, weight, bias, label='deconv'):
        n, cin, h, w = x.shape
        cout = weight.shape[1]
        count_macs(label, n * cin * cout * h * w * 4)
        self.saved = (x, weight)
        out = np.einsum('nchw,coab->nohawb', x, weight, optimize=True)
        return out.reshape(n, cout, 2 * h, 2 * w) + bias[None, :, None, None]

    def backward(self, grad):
        x, weight = self.saved
        n, cin, h, w = x.shape
        cout = weight.shape[1]
        g6 = grad.reshape(n, cout, h, 2, w, 2)
        gx = np.einsum('nohawb,coab->nchw', g6, weight, optimize=True)
        gw = np.einsum('nchw,nohawb->coab', x, g6, optimize=True)
        return gx, gw, grad.sum(axis=(0, 2, 3))


def conv_transpose2x2(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Learned x2 upsampling: 2x2 kernel, stride 2. input [N,Cin,H,W], weight [Cin,Cout,2,2]."""
    if input.ndim != 4 or weight.shape[0] != input.shape[1] or weight.shape[2:] != (2, 2):
        raise ShapeError(f'deconv input {input.shape} weight {weight.shape}')
    return ConvTranspose2x2.apply(input, weight, bias)


# ---------- resampling ----------

class Resample(Function):
    """out[..., o, p] = sum_hw ry[o, h] x[..., h, w] rx[p, w]"""

    def forward(self, x, ry=None, rx=None, label='resample'):
        self.ry, self.rx = ry, rx
        lead = int(np.prod(x.shape[:-2]))
        h, w = x.shape[-2:]
        count_macs(label, lead * (h * w * rx.shape[0] + ry.shape[0] * h * rx.shape[0]))
        return ry @ (x @ rx.T)

    def backward(self, grad):
        return ((self.ry.T @ grad) @ self.rx,)


class RoIResample(Function):
    """out[n, c, o, p] = sum_hw ry[n, o, h] x[c, h, w] rx[n, p, w]"""

    def forward(self, x, ry=None, rx=None, label='roi_align'):
        self.ry, self.rx = ry, rx
        c, h, w = x.shape
        n, oh, ow = ry.shape[0], ry.shape[1], rx.shape[1]
        count_macs(label, n * c * (h * w * ow + oh * h * ow))
        t = np.einsum('chw,npw->nchp', x, rx, optimize=True)
        return np.einsum('noh,nchp->ncop', ry, t, optimize=True)

    def backward(self, grad):
        gt = np.einsum('noh,ncop->nchp', self.ry, grad, optimize=True)
        return (np.einsum('nchp,npw->chw', gt, self.rx, optimize=True),)


def resample(x: Tensor, ry: np.ndarray, rx: np.ndarray, label: str = 'resample') -> Tensor:
    if ry.shape[1] != x.shape[-2] or rx.shape[1] != x.shape[-1]:
        raise ShapeError(f'resample matrices {ry.shape}/{rx.shape} vs input {x.shape}')
    return Resample.apply(x, ry=ry, rx=rx, label=label)


def roi_resample(x: Tensor, ry: np.ndarray, rx: np.ndarray, label: str = 'roi_align') -> Tensor:
    if x.ndim != 3 or ry.ndim != 3 or rx.ndim != 3 or ry.shape[0] != rx.shape[0]:
        raise ShapeError(f'roi_resample input {x.shape} matrices {ry.shape}/{rx.shape}')
    if ry.shape[2] != x.shape[1] or rx.shape[2] != x.shape[2]:
        raise ShapeError(f'roi_resample matrices {ry.shape}/{rx.shape} vs input {x.shape}')
    return RoIResample.apply(x, ry=ry, rx=rx, label=label)


def bilinear_resize(input: Tensor, outH: int, outW: int) -> Tensor:
    """Half-pixel-center bilinear resize of the last two axes (source coords clamped)."""
    if outH < 1 or outW < 1:
        raise ShapeError(f'output size must be positive, got {outH}x{outW}')
    h, w = input.shape[-2:]
    return resample(input, interpolation_matrix(h, outH), interpolation_matrix(w, outW),
                    label='bilinear_resize')


# ---------- attention ----------

def init_attention(params: Parameters, dim: int) -> None:
    for name in ('q', 'k', 'v', 'out'):
        params.init_linear(name, dim, dim)


def attention_heads(q: Tensor, k: Tensor, v: Tensor, heads: int, label: str = 'attention') -> Tensor:
    """Scaled dot-product attention per head on projected q/k/v; returns [Nq, D] before
    the output projection."""
    nq, d = q.shape
    nk = k.shape[0]
    if d % heads:
        raise ShapeError(f'feature dim {d} is not divisible by heads={heads}')
    if nk < 1:
        raise ShapeError('attention needs at least one key')
    dh = d // heads
    qh = q.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(nk, heads, dh).transpose(1, 2, 0)
    vh = v.reshape(nk, heads, dh).transpose(1, 0, 2)
    scores = matmul(qh, kh, label=f'{label}.scores') * (1.0 / math.sqrt(dh))
    context = matmul(softmax(scores), vh, label=f'{label}.context')
    return context.transpose(1, 0, 2).reshape(nq, d)


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, params: Parameters,
                         heads: int, label: str = 'attention') -> Tensor:
    d = query.shape[-1]
    if d % heads:
        raise ShapeError(f'feature dim {d} is not divisible by heads={heads}')
    q = linear(query, params['q.weight'], params['q.bias'], label=f'{label}.proj')
    k = linear(key, params['k.weight'], params['k.bias'], label=f'{label}.proj')
    v = linear(value, params['v.weight'], params['v.bias'], label=f'{label}.proj')
    context = attention_heads(q, k, v, heads, label=label)
    return linear(context, params['out.weight'], params['out.bias'], label=f'{label}.proj')
