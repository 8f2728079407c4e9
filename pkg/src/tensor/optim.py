"""
Adam over a named parameter collection
"""
import logging

import numpy as np

from src.errors import NumericalError

logger = logging.getLogger(__name__)


class Adam:
    """
    Single-writer Adam optimizer.

    params dict[str, Tensor]: named leaves updated in place of their `data`
    lr float: learning rate
    grad_clip float: global-norm clipping threshold, None disables
    """

    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values() if p.grad is not None)
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm: {norm}")
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            # fresh array: graphs built before the step keep their operands
            p.data = (p.data - update).astype(p.data.dtype)
        return norm

    def state_arrays(self) -> dict:
        arrays = {}
        for name in self.params:
            arrays[f"adam.m.{name}"] = self.m[name]
            arrays[f"adam.v.{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name, p in self.params.items():
            self.m[name] = np.asarray(arrays[f"adam.m.{name}"], dtype=p.data.dtype)
            self.v[name] = np.asarray(arrays[f"adam.v.{name}"], dtype=p.data.dtype)
        self.step_count = step_count
        logger.debug("Restored Adam state at step %d", step_count)
