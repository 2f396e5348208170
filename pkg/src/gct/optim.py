"""SGD with classic momentum, and the finite-difference gradient oracle."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .tensor import Tensor


class SgdMomentum:
    """Classic momentum: v <- mu*v + g ; w <- w - lr*v.

    Velocities are allocated lazily per parameter and mirror its shape.
    step() clears gradients afterwards, so gradients accumulated over a
    batch are consumed exactly once.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, momentum: float = 0.99):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; run backward() first")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[name] = v
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between autodiff and central-difference gradients.

    f must be a deterministic scalar function of `params` (dropout off).
    Relative error uses a unit floor in the denominator so near-zero
    gradients are compared absolutely. Parameters are restored in place.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]) + abs(fd))
            if err > worst:
                worst = err
    return worst
