"""Adam with bias correction, one instance per parameter group."""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError, ShapeError
from .tensor import Tensor


def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Single bias-corrected Adam update on plain arrays.

    Complex parameters share one second moment, the running mean of ``|g|^2``.
    Returns ``(param, m, v)`` as new arrays; inputs are not modified.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"parameter {param.shape} and gradient {grad.shape} differ")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient encountered in Adam step")
    g2 = grad.real**2 + grad.imag**2 if np.iscomplexobj(grad) else grad * grad
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * g2
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    step = lr * mhat / (np.sqrt(vhat) + eps)
    return (param - step).astype(param.dtype, copy=False), m, v


class Adam:
    """Adam over a list of :class:`Tensor` leaves.

    Parameters with ``grad is None`` are skipped for that step.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=p.data.real.dtype) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient encountered in Adam step")
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            p.data, self.m[i], self.v[i] = adam_update(
                p.data, g, self.m[i], self.v[i], self.t, self.lr, self.beta1, self.beta2, self.eps
            )

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]
