# -*- encoding: utf-8 -*-
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor, float64_mode, no_grad
from ..utils import ShapeError


def grad_check(f: Callable[..., Tensor], inputs: List[Tensor], epsilon: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every input is copied to a float64 leaf that requires grad; f must return a
    scalar. Relative error per element is |a - n| / max(1, |a|, |n|).
    `sample` limits the check to that many randomly chosen elements per input.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError(f'epsilon must lie in [1e-5, 1e-2], got {epsilon}')
    rng = np.random.default_rng(seed)
    with float64_mode():
        leaves = [Tensor(np.array(t.data, dtype=np.float64, order='C'), requires_grad=True)
                  for t in inputs]
        out = f(*leaves)
        if out.size != 1:
            raise ShapeError(f'grad_check needs a scalar output, got shape {out.shape}')
        out.backward()
        analytic: Dict[int, np.ndarray] = {
            i: (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape))
            for i, leaf in enumerate(leaves)}

        worst = 0.0
        with no_grad():
            for i, leaf in enumerate(leaves):
                flat = leaf.data.reshape(-1)
                positions = np.arange(flat.size)
                if sample is not None and sample < flat.size:
                    positions = rng.choice(flat.size, size=sample, replace=False)
                for pos in positions:
                    orig = flat[pos]
                    flat[pos] = orig + epsilon
                    plus = f(*leaves).item()
                    flat[pos] = orig - epsilon
                    minus = f(*leaves).item()
                    flat[pos] = orig
                    numeric = (plus - minus) / (2.0 * epsilon)
                    a = float(analytic[i].reshape(-1)[pos])
                    err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                    worst = max(worst, err)
    return worst
