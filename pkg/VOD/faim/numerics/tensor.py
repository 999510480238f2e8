# -*- encoding: utf-8 -*-
"""Tensor, differentiable Function base and named Parameters.

Storage is float32 by default. Gradients are always float64 buffers.
Inside ``float64_mode()`` op results are stored as float64, which is what
``grad_check`` relies on.
"""
import contextlib
import hashlib
import threading
import zlib
from collections import defaultdict
from typing import (Any, Callable, Dict, Iterable, Iterator, List, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from ..utils import NonFiniteError, ShapeError

_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]


def grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


def active_dtype() -> type:
    return getattr(_state, 'dtype', np.float32)


def debug_enabled() -> bool:
    return getattr(_state, 'debug', False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    prev = active_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def debug_mode() -> Iterator[None]:
    """Also reject non-finite gradients during backward."""
    prev = debug_enabled()
    _state.debug = True
    try:
        yield
    finally:
        _state.debug = prev


class FlopCounter():
    """Multiply-accumulate counts keyed by op label."""

    def __init__(self) -> None:
        self.macs: Dict[str, int] = defaultdict(int)

    def add(self, label: str, macs: int) -> None:
        self.macs[label] += int(macs)

    def get(self, prefix: str = '') -> int:
        return sum(v for k, v in self.macs.items() if k.startswith(prefix))

    @property
    def total(self) -> int:
        return sum(self.macs.values())


@contextlib.contextmanager
def flop_counter() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    prev = getattr(_state, 'counter', None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def count_macs(label: str, macs: int) -> None:
    counter = getattr(_state, 'counter', None)
    if counter is not None:
        counter.add(label, macs)


class Tensor():
    __slots__ = ('data', 'grad', 'requires_grad', 'creator')
    # ndarray <op> Tensor must dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 creator: Optional['Function'] = None) -> None:
        arr = np.asarray(data, dtype=active_dtype())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f'non-finite values in tensor of shape {arr.shape}')
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.creator = creator

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError('backward() on a tensor that does not require grad')
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f'backward() needs a scalar, got shape {self.shape}')
            grad = np.ones(self.shape, dtype=np.float64)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.creator is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            input_grads = node.creator.backward(g)
            for parent, pg in zip(node.creator.tensors, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    raise ShapeError(f'{type(node.creator).__name__} produced grad {pg.shape} '
                                     f'for input {parent.shape}')
                if debug_enabled() and not np.isfinite(pg).all():
                    raise NonFiniteError(f'non-finite gradient from {type(node.creator).__name__}')
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def _topo(self) -> List['Tensor']:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    # arithmetic sugar, implemented in functional
    def __add__(self, other):
        from .functional import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .functional import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .functional import sub
        return sub(other, self)

    def __mul__(self, other):
        from .functional import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from .functional import div
        return div(self, other)

    def __rtruediv__(self, other):
        from .functional import div
        return div(other, self)

    def __neg__(self):
        from .functional import mul
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .functional import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        from .functional import getitem
        return getitem(self, index)

    def reshape(self, *shape) -> 'Tensor':
        from .functional import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        from .functional import transpose
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        from .functional import tsum
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        from .functional import mean
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if like is not None and arr.shape != like.shape:
        if arr.ndim != 0:
            raise ShapeError(f'constant of shape {arr.shape} does not match {like.shape}')
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


class Function():
    """Base class for differentiable operations.

    ``forward`` receives the raw arrays of the input tensors and returns the
    output array. ``backward`` receives dL/d(output) as a float64 array and
    returns one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: Tensor) -> None:
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError('Forward pass not implemented for this function')

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError('Backward pass not implemented for this function')

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        if not requires_grad:
            # forward may have stashed arrays for backward; drop them
            func = None
        return Tensor(out, requires_grad=requires_grad, creator=func)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Parameters():
    """Named tensors of one model plus the seed they were initialized from.

    ``scope(prefix)`` returns a view over the same storage whose names are
    relative to ``prefix``; initialization draws from a generator keyed by
    (seed, full name), so the order in which modules register is irrelevant.
    """

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None,
                 rng_seed: int = 0, prefix: str = '') -> None:
        self._tensors: Dict[str, Tensor] = tensors if tensors is not None else {}
        self.rng_seed = int(rng_seed)
        self.prefix = prefix

    def scope(self, name: str) -> 'Parameters':
        return Parameters(self._tensors, self.rng_seed, f'{self.prefix}{name}.')

    def _full(self, name: str) -> str:
        return f'{self.prefix}{name}'

    def __getitem__(self, name: str) -> Tensor:
        full = self._full(name)
        try:
            return self._tensors[full]
        except KeyError:
            raise KeyError(f'parameter {full!r} is not initialized') from None

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self._tensors

    def __len__(self) -> int:
        return len(self.names())

    def names(self) -> List[str]:
        return sorted(n for n in self._tensors if n.startswith(self.prefix))

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def add(self, name: str, value: ArrayLike, requires_grad: bool = True) -> Tensor:
        full = self._full(name)
        if full in self._tensors:
            raise ValueError(f'parameter {full!r} already exists')
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=requires_grad)
        self._tensors[full] = t
        return t

    def rng(self, name: str) -> np.random.Generator:
        full = self._full(name)
        return np.random.default_rng([self.rng_seed % (1 << 64), zlib.crc32(full.encode('utf-8'))])

    def init_linear(self, name: str, din: int, dout: int) -> None:
        w = kaiming_uniform(self.rng(f'{name}.weight'), (dout, din), din)
        self.add(f'{name}.weight', w)
        self.add(f'{name}.bias', np.zeros(dout, dtype=np.float32))

    def init_conv(self, name: str, cin: int, cout: int, kernel: int) -> None:
        w = kaiming_uniform(self.rng(f'{name}.weight'), (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.add(f'{name}.weight', w)
        self.add(f'{name}.bias', np.zeros(cout, dtype=np.float32))

    def init_deconv(self, name: str, cin: int, cout: int) -> None:
        w = kaiming_uniform(self.rng(f'{name}.weight'), (cin, cout, 2, 2), cin)
        self.add(f'{name}.weight', w)
        self.add(f'{name}.bias', np.zeros(cout, dtype=np.float32))

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, t in self.items():
            t.requires_grad = bool(predicate(name))

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def checksum(self, names: Optional[Iterable[str]] = None) -> str:
        h = hashlib.sha1()
        for name in sorted(names) if names is not None else self.names():
            h.update(name.encode('utf-8'))
            h.update(np.ascontiguousarray(self._tensors[name].data, dtype=np.float32).tobytes())
        return h.hexdigest()

    def state(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._tensors:
                raise KeyError(f'unknown parameter {name!r} in state')
            current = self._tensors[name]
            if tuple(arr.shape) != current.shape:
                raise ShapeError(f'{name}: state shape {arr.shape} != {current.shape}')
            current.data = np.asarray(arr, dtype=np.float32).copy()

    def copy(self) -> 'Parameters':
        tensors = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                   for n, t in self._tensors.items()}
        return Parameters(tensors, self.rng_seed, self.prefix)

    def replaced(self, mapping: Dict[str, Tensor]) -> 'Parameters':
        """Same parameters with some (relative) names bound to other tensors."""
        tensors = dict(self._tensors)
        for name, t in mapping.items():
            full = self._full(name)
            if full not in tensors:
                raise KeyError(f'parameter {full!r} is not initialized')
            tensors[full] = t
        return Parameters(tensors, self.rng_seed, self.prefix)

    def __repr__(self) -> str:
        return f'Parameters(prefix={self.prefix!r}, count={len(self)}, seed={self.rng_seed})'
