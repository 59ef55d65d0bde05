"""AdamW with decoupled weight decay, plus global-norm gradient clipping.

All moment buffers are float32 and updates walk parameters in sorted-name
order, so a training step is a pure function of (parameters, gradients,
optimizer state) and replays bitwise.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor


def clip_global_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm. Parameters without gradients are skipped.
    """
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = np.float32(max_norm / (norm + 1e-12))
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam (update then `p -= lr * wd * p`).

    `lr` and `weight_decay` are read at each `step`, so schedules can
    reassign them freely between steps. `decay_filter(name)` can exempt
    parameters (e.g. norms and biases) from decay.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_filter: Optional[Callable[[str], bool]] = None,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.decay_filter = decay_filter
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        lr = np.float32(self.lr)
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += np.float32(1.0 - self.beta1) * g
            v *= self.beta2
            v += np.float32(1.0 - self.beta2) * (g * g)
            m_hat = m / np.float32(bc1)
            v_hat = v / np.float32(bc2)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + np.float32(self.eps)))
            if self.weight_decay > 0.0 and (self.decay_filter is None or self.decay_filter(name)):
                p.data -= lr * np.float32(self.weight_decay) * p.data

    # -- resume support ------------------------------------------------------

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"opt.step": np.asarray(float(self.step_count), dtype=np.float32)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, state: Mapping[str, np.ndarray]) -> None:
        try:
            self.step_count = int(state["opt.step"])
            for name in self.params:
                self.m[name] = np.asarray(state[f"opt.m.{name}"], dtype=np.float32).copy()
                self.v[name] = np.asarray(state[f"opt.v.{name}"], dtype=np.float32).copy()
        except KeyError as exc:
            raise CheckpointError(f"optimizer state missing tensor {exc.args[0]}") from None
        for name in self.params:
            if self.m[name].shape != self.params[name].shape:
                raise CheckpointError(
                    f"optimizer moment shape {self.m[name].shape} does not match "
                    f"parameter {name} with shape {self.params[name].shape}"
                )


class SGD:
    """Plain SGD, used by the small supervised heads."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.1, momentum: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.buf: Dict[str, np.ndarray] = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            if self.momentum > 0.0:
                b = self.buf[name]
                b *= np.float32(self.momentum)
                b += p.grad
                p.data -= np.float32(self.lr) * b
            else:
                p.data -= np.float32(self.lr) * p.grad
