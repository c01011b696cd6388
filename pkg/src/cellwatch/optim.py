"""Parameter update rules: SGD with momentum and Adam.

Both follow the published update equations exactly. ``step()`` refuses
non-finite gradients, so a NaN produced anywhere in the backward pass
surfaces as an error instead of silently corrupting the weights.
"""

import numpy as np

from .errors import NumericsError, ShapeError


class Optimizer:
    def __init__(self, params):
        self.params = list(params)
        self.state = [self._init_state(p) for p in self.params]

    def _init_state(self, param):
        raise NotImplementedError

    def _update(self, param, grad, state):
        raise NotImplementedError

    def step(self):
        for param, state in zip(self.params, self.state):
            if param.grad is None:
                continue
            if param.grad.shape != param.data.shape:
                raise ShapeError(
                    f"grad shape {param.grad.shape} != param shape {param.data.shape}"
                )
            if not np.isfinite(param.grad).all():
                raise NumericsError("non-finite gradient in optimizer step")
            self._update(param, param.grad, state)

    def zero_grad(self):
        for param in self.params:
            param.grad = None


class SgdMomentum(Optimizer):
    """v <- momentum * v + g;  p <- p - lr * v."""

    def __init__(self, params, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        super().__init__(params)

    def _init_state(self, param):
        return {"v": np.zeros_like(param.data)}

    def _update(self, param, grad, state):
        v = state["v"]
        v *= param.data.dtype.type(self.momentum)
        v += grad
        param.data -= param.data.dtype.type(self.lr) * v


class Adam(Optimizer):
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 defaults)."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        super().__init__(params)

    def _init_state(self, param):
        return {"m": np.zeros_like(param.data), "v": np.zeros_like(param.data), "t": 0}

    def _update(self, param, grad, state):
        dt = param.data.dtype.type
        state["t"] += 1
        t = state["t"]
        m, v = state["m"], state["v"]
        m *= dt(self.beta1)
        m += dt(1.0 - self.beta1) * grad
        v *= dt(self.beta2)
        v += dt(1.0 - self.beta2) * grad * grad
        mhat = m / dt(1.0 - self.beta1**t)
        vhat = v / dt(1.0 - self.beta2**t)
        param.data -= dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


def make_optimizer(name, params, lr, momentum=0.9):
    if name == "sgd":
        return SgdMomentum(params, lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer: {name!r}")
