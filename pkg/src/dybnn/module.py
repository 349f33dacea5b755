"""Minimal trainable-layer protocol.

Each layer caches what it needs during ``forward`` and accumulates parameter
gradients into ``Param.grad`` during ``backward``.  Composite layers list
their children in ``children()`` so parameters and buffers get dotted names.
"""

from __future__ import annotations

import zlib

import numpy as np


class Param:
    """A trainable array together with its gradient and update policy.

    ``decay`` marks parameters eligible for weight decay; ``clamp`` marks latent
    binary weights that are clipped to [-1, 1] after every optimizer step.
    """

    def __init__(self, data, decay=True, clamp=False):
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay
        self.clamp = clamp

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    def params(self):
        """Own parameters as ``{local_name: Param}``."""
        return {}

    def own_buffers(self):
        """Own non-trainable state arrays as ``{local_name: ndarray}``."""
        return {}

    def children(self):
        return {}

    def named_parameters(self, prefix=""):
        out = {prefix + k: p for k, p in self.params().items()}
        for name, child in self.children().items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: b for k, b in self.own_buffers().items()}
        for name, child in self.children().items():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def set_buffer(self, name, value):
        raise KeyError(name)

    def modules(self):
        yield self
        for child in self.children().values():
            yield from child.modules()

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name).

    Initial values then depend only on the seed and the parameter's position in
    the model, not on which other layers exist, so static and dynamic variants
    built from one seed share every common parameter exactly.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode())])
