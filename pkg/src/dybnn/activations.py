"""Threshold and shift activations for binary networks.

Static variants (``rsign``, ``rprelu``) carry one learnable value per channel.
Dynamic variants (``dysign``, ``dyprelu``) generate those values per sample
from a small squeeze-and-excitation style hyper function::

    g      = spatial mean of x                      (n, c)
    hidden = relu(g @ w1 + b1)                      (n, c // r)
    out    = hidden @ w2 + b2                       (n, k)

The output is left linear so thresholds and shifts may take any real value.

All backward functions return plain arrays or gradient dataclasses; parameter
containers are never mutated here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, StaleState
from .tensor import BitTensor, global_avg_pool, global_avg_pool_backward, pack_sign

DEFAULT_REDUCTION = 16


def hidden_width(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(1, channels // reduction)


@dataclass
class HyperFunctionParams:
    w1: np.ndarray  # (c, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, k)
    b2: np.ndarray  # (k,)

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_width(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, channels, out_width, rng, reduction=DEFAULT_REDUCTION, dtype=np.float32):
        """Fan-in scaled uniform first layer; all-zero second layer.

        A zero second layer makes the generated values exactly zero, so every
        dynamic activation starts out identical to its static counterpart.
        """
        if out_width not in (channels, 2 * channels):
            raise ShapeMismatch(f"out_width must be {channels} or {2 * channels}")
        hidden = hidden_width(channels, reduction)
        bound = 1.0 / np.sqrt(channels)
        return cls(
            w1=rng.uniform(-bound, bound, size=(channels, hidden)).astype(dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=np.zeros((hidden, out_width), dtype=dtype),
            b2=np.zeros(out_width, dtype=dtype),
        )

    def zeros_like(self) -> "HyperFunctionParams":
        return HyperFunctionParams(*(np.zeros_like(a) for a in self.arrays()))

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class RSignParams:
    thresholds: np.ndarray  # (c,)


@dataclass
class RPReLUParams:
    gamma: np.ndarray  # (c,)
    zeta: np.ndarray  # (c,)
    beta: np.ndarray  # (c,)

    @classmethod
    def init(cls, channels, dtype=np.float32, slope=0.25):
        return cls(
            gamma=np.zeros(channels, dtype=dtype),
            zeta=np.zeros(channels, dtype=dtype),
            beta=np.full(channels, slope, dtype=dtype),
        )


@dataclass
class DynActState:
    """Everything a dynamic activation's backward pass needs."""

    x: np.ndarray
    pooled: np.ndarray
    hidden_pre: np.ndarray
    generated: np.ndarray
    params: HyperFunctionParams


@dataclass
class RPReLUGrads:
    x: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    beta: np.ndarray


# ---------------------------------------------------------------------------
# hyper function


def _check_hyper(g, p):
    if g.ndim != 2 or g.shape[1] != p.channels:
        raise ShapeMismatch(
            f"hyper function expects (n, {p.channels}) input, got {g.shape}"
        )


def _hyper(g, p):
    _check_hyper(g, p)
    hidden_pre = g @ p.w1 + p.b1
    out = np.maximum(hidden_pre, 0) @ p.w2 + p.b2
    return out, hidden_pre


def hyper_forward(g: np.ndarray, p: HyperFunctionParams) -> np.ndarray:
    """Map pooled channel statistics ``g`` of shape ``(n, c)`` to ``(n, k)``."""
    return _hyper(np.atleast_2d(g), p)[0]


def hyper_backward(grad_out, g, hidden_pre, p):
    """Return ``(grad_g, grads)`` where ``grads`` mirrors ``p``."""
    hidden = np.maximum(hidden_pre, 0)
    grad_w2 = hidden.T @ grad_out
    grad_b2 = grad_out.sum(axis=0)
    grad_hidden = (grad_out @ p.w2.T) * (hidden_pre > 0)
    grad_w1 = g.T @ grad_hidden
    grad_b1 = grad_hidden.sum(axis=0)
    grad_g = grad_hidden @ p.w1.T
    return grad_g, HyperFunctionParams(grad_w1, grad_b1, grad_w2, grad_b2)


def hyper_generate(x, p, expected_width):
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (n, c, h, w) input, got {x.shape}")
    if p.channels != x.shape[1] or p.out_width != expected_width:
        raise ShapeMismatch(
            f"hyper function maps {p.channels}->{p.out_width}, input has "
            f"{x.shape[1]} channels and needs width {expected_width}"
        )
    pooled = global_avg_pool(x)
    generated, hidden_pre = _hyper(pooled, p)
    return DynActState(x, pooled, hidden_pre, generated, p)


def _check_state(state, grad_out):
    if state is None or grad_out.shape != state.x.shape:
        shape = None if state is None else state.x.shape
        raise StaleState(f"gradient shape {grad_out.shape} does not match cache {shape}")


def _through_hyper(state, grad_generated):
    """Chain a gradient on the generated values back to x and hyper params."""
    grad_pooled, grads = hyper_backward(
        grad_generated, state.pooled, state.hidden_pre, state.params
    )
    grad_x = global_avg_pool_backward(grad_pooled, state.x.shape[2:])
    return grad_x, grads


# ---------------------------------------------------------------------------
# sign family


def threshold_sign(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """+1 where ``x > threshold`` else -1, as floats.

    ``thresholds`` is ``(c,)`` for a static threshold or ``(n, c)`` per sample.
    """
    t = thresholds.reshape(thresholds.shape + (1, 1))
    return np.where(x > t, 1.0, -1.0).astype(x.dtype, copy=False)


def approx_sign(u: np.ndarray) -> np.ndarray:
    """Piecewise quadratic sign surrogate whose derivative is :func:`sign_surrogate_grad`."""
    out = np.where(u < 0, 2 * u + u * u, 2 * u - u * u)
    return np.clip(np.where(np.abs(u) >= 1, np.sign(u), out), -1, 1).astype(u.dtype, copy=False)


def sign_surrogate_grad(u: np.ndarray) -> np.ndarray:
    """``2 + 2u`` on [-1, 0), ``2 - 2u`` on [0, 1], zero elsewhere."""
    # 2 - 2|u| covers both halves; clipping at zero removes |u| > 1
    s = np.abs(u)
    s *= -2
    s += 2
    return np.maximum(s, 0, out=s)


def sign_backward(x, thresholds, grad_out):
    """Surrogate gradient of ``threshold_sign`` w.r.t. ``x`` and the thresholds.

    Threshold gradients are summed over space (and over the batch when
    ``thresholds`` is a static ``(c,)`` vector).
    """
    u = x - thresholds.reshape(thresholds.shape + (1, 1))
    grad_x = grad_out * sign_surrogate_grad(u)
    grad_t = -grad_x.sum(axis=(2, 3))
    if thresholds.ndim == 1:
        grad_t = grad_t.sum(axis=0)
    return grad_x, grad_t


def rsign_forward(x: np.ndarray, p: RSignParams) -> BitTensor:
    if x.ndim != 4 or p.thresholds.shape != (x.shape[1],):
        raise ShapeMismatch(
            f"thresholds {p.thresholds.shape} do not match input {x.shape}"
        )
    return pack_sign(x - p.thresholds[None, :, None, None])


def dysign_forward(x: np.ndarray, p: HyperFunctionParams):
    """Binarize ``x`` against per-sample thresholds from the hyper function."""
    state = hyper_generate(x, p, x.shape[1])
    return pack_sign(x - state.generated[:, :, None, None]), state


def dysign_backward(state: DynActState, grad_out: np.ndarray):
    """Return ``(grad_x, hyper_grads)`` through the sign surrogate."""
    _check_state(state, grad_out)
    grad_direct, grad_alpha = sign_backward(state.x, state.generated, grad_out)
    grad_indirect, grads = _through_hyper(state, grad_alpha)
    return grad_direct + grad_indirect, grads


# ---------------------------------------------------------------------------
# PReLU family


def _bcast(v):
    return v.reshape(v.shape + (1, 1))


def shifted_prelu(x, gamma, zeta, beta):
    """``x - gamma + zeta`` above ``gamma``; ``beta (x - gamma) + zeta`` at or below.

    ``gamma``/``zeta`` may be ``(c,)`` or per-sample ``(n, c)``; ``beta`` is ``(c,)``.
    """
    d = x - _bcast(gamma)
    return np.where(d > 0, d, _bcast(beta) * d) + _bcast(zeta)


def shifted_prelu_backward(x, gamma, beta, grad_out) -> RPReLUGrads:
    d = x - _bcast(gamma)
    neg = d <= 0
    slope = np.where(neg, _bcast(beta), np.ones((), dtype=grad_out.dtype))
    grad_x = grad_out * slope
    grad_gamma = -grad_x.sum(axis=(2, 3))
    grad_zeta = grad_out.sum(axis=(2, 3))
    if gamma.ndim == 1:
        grad_gamma = grad_gamma.sum(axis=0)
        grad_zeta = grad_zeta.sum(axis=0)
    d *= grad_out
    d *= neg
    grad_beta = d.sum(axis=(0, 2, 3))
    return RPReLUGrads(grad_x, grad_gamma, grad_zeta, grad_beta.astype(x.dtype, copy=False))


def rprelu_forward(x: np.ndarray, p: RPReLUParams) -> np.ndarray:
    c = x.shape[1] if x.ndim == 4 else -1
    if any(v.shape != (c,) for v in (p.gamma, p.zeta, p.beta)):
        raise ShapeMismatch(f"RPReLU parameters do not match input {x.shape}")
    return shifted_prelu(x, p.gamma, p.zeta, p.beta)


def rprelu_backward(x: np.ndarray, p: RPReLUParams, grad_out: np.ndarray) -> RPReLUGrads:
    if grad_out.shape != x.shape:
        raise StaleState(f"gradient shape {grad_out.shape} does not match input {x.shape}")
    return shifted_prelu_backward(x, p.gamma, p.beta, grad_out)


def dyprelu_forward(x: np.ndarray, p: HyperFunctionParams, beta: np.ndarray):
    """Shifted PReLU whose ``gamma`` and ``zeta`` come from the hyper function."""
    c = x.shape[1]
    state = hyper_generate(x, p, 2 * c)
    if beta.shape != (c,):
        raise ShapeMismatch(f"beta has shape {beta.shape}, expected ({c},)")
    gamma, zeta = state.generated[:, :c], state.generated[:, c:]
    return shifted_prelu(x, gamma, zeta, beta), state


def dyprelu_backward(state: DynActState, beta: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, hyper_grads, grad_beta)``."""
    _check_state(state, grad_out)
    c = state.x.shape[1]
    gamma = state.generated[:, :c]
    g = shifted_prelu_backward(state.x, gamma, beta, grad_out)
    grad_generated = np.concatenate([g.gamma, g.zeta], axis=1)
    grad_indirect, grads = _through_hyper(state, grad_generated)
    return g.x + grad_indirect, grads, g.beta
