"""SGD and Adam over dictionaries of named parameter blocks.

Parameters are updated in place.  Blocks whose gradient is missing or None
(frozen blocks) are skipped and never get optimizer state.
"""

from __future__ import annotations

import numpy as np


class OptimizerError(ValueError):
    pass


def _check(name, p, g):
    if p.shape != g.shape:
        raise OptimizerError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.state: dict = {}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            _check(name, p, g)
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            _check(name, p, g)
            st = self.state.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / bc1
            v_hat = st["v"] / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if lr <= 0:
        raise OptimizerError("learning rate must be positive")
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise OptimizerError(f"unknown optimizer {name!r}")


def clip_by_global_norm(grads, max_norm: float):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {k: None if g is None else g * factor for k, g in grads.items()}
