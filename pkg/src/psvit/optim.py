"""SGD with (Nesterov) momentum and a cosine learning-rate schedule."""

import math

import numpy as np


class SGD:
    """Momentum SGD over a name -> Tensor mapping.

    Only parameters holding a gradient are updated, so weights outside the
    sampled supernet path (and their momentum buffers) stay bit-identical.
    """

    def __init__(self, params, lr=0.05, momentum=0.9, nesterov=True, weight_decay=1e-4):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.buffers = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        touched = []
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = g + self.momentum * buf if self.nesterov else buf
            p.data -= lr * g
            touched.append(name)
        return touched

    def state_dict(self):
        return {name: buf.copy() for name, buf in self.buffers.items()}

    def load_state_dict(self, state):
        unknown = set(state) - set(self.params)
        if unknown:
            raise KeyError(f"optimizer state for unknown parameters: {sorted(unknown)[:5]}")
        self.buffers = {k: np.array(v, dtype=np.float64) for k, v in state.items()}


def cosine_lr(base_lr, step, total_steps, warmup=0):
    """Linear warmup then cosine decay to 0 at ``total_steps``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    t = min(1.0, (step - warmup) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))
