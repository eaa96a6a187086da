"""Adam optimizer over autodiff tensors."""

import numpy as np

from .autodiff import Tensor


class MissingGradientError(RuntimeError):
    """A parameter handed to the optimizer carries no gradient."""


class Adam:
    """Adam with classic L2 weight decay folded into the gradient.

    All parameters are validated to carry gradients before the first
    in-place write, so a failed step never leaves a partial update.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 0.0,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError(
                    f"parameter of shape {p.shape} has no gradient"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        state = {"adam.t": np.uint64(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"adam.m.{i}"] = m
            state[f"adam.v.{i}"] = v
        return state

    def load_state_arrays(self, state: dict) -> None:
        self.t = int(state["adam.t"])
        for i in range(len(self.params)):
            m, v = state[f"adam.m.{i}"], state[f"adam.v.{i}"]
            if m.shape != self.params[i].shape or v.shape != self.params[i].shape:
                raise ValueError(f"optimizer state {i} does not match parameter shape")
            self.m[i] = m.astype(np.float32)
            self.v[i] = v.astype(np.float32)
