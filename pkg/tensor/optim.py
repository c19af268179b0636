from typing import List, Sequence, Tuple

import numpy as np

from tensor.tensor import Tensor
from utils.errors import ConfigError, OptimizerStateError


class Optimizer:
    """SGD or Adam (bias-corrected) over a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", learning_rate: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer kind: {kind!r}")
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if not all(0.0 < b < 1.0 for b in betas):
            raise ConfigError(f"adam betas must lie in (0, 1), got {betas}")
        self.params: List[Tensor] = list(params)
        self.kind = kind
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.step_count = 0

        # Moment buffers, one per parameter
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update using each parameter's populated ``grad``."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                name = p.name or f"param[{i}]"
                raise OptimizerStateError(f"{name} has no gradient; call backward() first")

        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            for p in self.params:
                p.data -= (lr * p.grad).astype(p.data.dtype)
            return

        b1, b2 = self.betas
        correction1 = 1.0 - b1 ** self.step_count
        correction2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def optimizer_step(opt: Optimizer, params: Sequence[Tensor] = None, grads: Sequence[np.ndarray] = None) -> None:
    """Functional form: optionally install ``grads`` on ``params`` then step."""
    if grads is not None:
        targets = list(params) if params is not None else opt.params
        if len(targets) != len(grads):
            raise OptimizerStateError(f"got {len(grads)} gradients for {len(targets)} parameters")
        for p, g in zip(targets, grads):
            p.grad = None if g is None else np.asarray(g, dtype=p.data.dtype)
    opt.step()
