"""Named parameter collections, the Adam optimizer, and a gradient-check
oracle based on central finite differences."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import NumericError


class Params:
    """Ordered name -> Tensor table. Insertion order is the canonical
    order for optimization, serialization and gradient checks."""

    def __init__(self):
        self._tensors: dict[str, T.Tensor] = {}

    def add(self, name, data, requires_grad=True):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state_dict(self):
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, state):
        for n, t in self._tensors.items():
            arr = state.get(n)
            if arr is None:
                raise KeyError(f"missing parameter {n!r} in state dict")
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {n!r}: shape {arr.shape} != expected {t.data.shape}")
            t.data = np.asarray(arr, dtype=np.float64).copy()


class Adam:
    """Adam with bias correction. step() consumes grads and zeroes them."""

    def __init__(self, params: Params, alpha, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.trainable()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.trainable()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.trainable():
            if p.grad is None:
                raise ValueError(f"adam step: parameter {name!r} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.alpha * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def finite_diff_check(params: Params, loss_fn, eps=1e-5, max_coords_per_tensor=None, rng=None):
    """Max relative error between analytic grads and central differences.

    loss_fn must be a deterministic zero-argument callable returning a
    scalar Tensor built from `params`. Relative error per coordinate is
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|); the max is
    taken over (optionally subsampled) coordinates of every trainable
    tensor.
    """
    trainable = params.trainable()
    if not trainable:
        return 0.0
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("finite_diff_check: loss is not finite")
    T.backward(loss)
    analytic = {
        n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for n, p in trainable
    }
    params.zero_grad()

    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    with T.no_grad():
        for name, p in trainable:
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords_per_tensor is not None and n > max_coords_per_tensor:
                coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
            else:
                coords = range(n)
            ga = analytic[name].reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                lp = float(loss_fn().data)
                flat[c] = orig - eps
                lm = float(loss_fn().data)
                flat[c] = orig
                numeric = (lp - lm) / (2.0 * eps)
                err = abs(ga[c] - numeric) / max(1e-12, abs(ga[c]) + abs(numeric))
                if err > max_err:
                    max_err = err
    return max_err
