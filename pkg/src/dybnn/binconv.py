"""Bit-packed XNOR-popcount convolution, dense convolution and batch norm.

Binary convolutions pad with logical -1 (the image of a zero pad under
``Sign``).  Their output is an integer-valued float tensor, identical whether
computed by :func:`xnor_popcount_conv2d` on packed words or by the dense
``im2col`` path over unpacked +/-1 operands; training uses the dense path.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PaddingOverflow, ShapeMismatch, StaleState
from .module import Module, Param
from .tensor import BitTensor, pack_sign, valid_bits

BINARY_WEIGHTS = "binary"
REAL_WEIGHTS = "real"
WEIGHT_MODES = (BINARY_WEIGHTS, REAL_WEIGHTS)

# upper bound on temporary uint64 elements per popcount chunk
_POPCOUNT_CHUNK = 1 << 22


def output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_geometry(h, w, kh, kw, stride, padding):
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeMismatch(
            f"invalid geometry kernel=({kh},{kw}) stride={stride} padding={padding}"
        )
    if padding >= kh or padding >= kw:
        raise PaddingOverflow(
            f"padding {padding} leaves outputs with no support for kernel ({kh},{kw})"
        )
    ho, wo = output_size(h, kh, stride, padding), output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"input {h}x{w} too small for kernel ({kh},{kw})")
    return ho, wo


# ---------------------------------------------------------------------------
# dense path


def im2col(x, kh, kw, stride, padding, pad_value=0.0):
    """Return ``(cols, (ho, wo))`` with ``cols`` of shape ``(n*ho*wo, c*kh*kw)``."""
    n, c, h, w = x.shape
    ho, wo = _check_geometry(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=pad_value,
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def col2im(grad_cols, x_shape, kh, kw, stride, padding, out_hw):
    n, c, h, w = x_shape
    ho, wo = out_hw
    if kh == kw == 1 and stride == 1 and padding == 0:
        return grad_cols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    # accumulate channel-last so every strided add touches contiguous channel runs
    g = np.ascontiguousarray(grad_cols.reshape(n, ho, wo, c, kh * kw).transpose(4, 0, 1, 2, 3))
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=grad_cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[i * kw + j]
    return xp[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2)


def conv2d(x, w, stride=1, padding=0, pad_value=0.0):
    """Dense 2-D cross-correlation.  Returns ``(out, cols)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with weights {w.shape}")
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, padding, pad_value)
    out = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)), cols


def conv2d_backward(grad_out, cols, w, x_shape, stride, padding):
    """Gradients of :func:`conv2d` w.r.t. its input and weights."""
    cout, _, kh, kw = w.shape
    n, _, ho, wo = grad_out.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_cols = g @ w.reshape(cout, -1)
    grad_x = col2im(grad_cols, x_shape, kh, kw, stride, padding, (ho, wo))
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# packed path


def binarize_weights(w: np.ndarray) -> BitTensor:
    """``Sign(w)`` (zero maps to -1) packed along the input-channel axis."""
    return pack_sign(np.asarray(w))


def xnor_popcount_conv2d(x: BitTensor, w: BitTensor, stride=1, padding=0) -> np.ndarray:
    """Convolve packed activations with packed weights.

    For each block of 64 channels the +/-1 dot product is
    ``2 * agreements - valid_bits`` where ``agreements = valid_bits -
    popcount(a ^ b)``; pad bits are zero in both operands so their XOR is
    zero and only the per-block valid count needs to know about them.
    Spatial padding is all-zero words, i.e. logical -1 on every channel.
    """
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeMismatch(f"input has {cin} channels, weights expect {wcin}")
    ho, wo = _check_geometry(h, wd, kh, kw, stride, padding)
    words = x.words
    if padding:
        words = np.pad(words, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(words, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]  # (n, ho, wo, nb, kh, kw)
    a = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, -1)
    b = w.words.reshape(cout, -1)  # (cout, kh*kw*nb), same (kh, kw, nb) order
    valid = np.tile(valid_bits(cin), kh * kw)
    total = int(valid.sum())

    rows = a.shape[0]
    k = a.shape[1]
    out = np.empty((rows, cout), dtype=np.int64)
    step = max(1, _POPCOUNT_CHUNK // max(1, cout * k))
    for start in range(0, rows, step):
        blk = a[start : start + step]
        mismatches = np.bitwise_count(blk[:, None, :] ^ b[None, :, :]).sum(axis=2, dtype=np.int64)
        out[start : start + step] = total - 2 * mismatches
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def xnor_popcount_conv(x: BitTensor, layer: "BinaryConv2d", dtype=np.float32) -> np.ndarray:
    """Packed convolution of ``x`` with ``layer``'s binarized weights."""
    if layer.mode != BINARY_WEIGHTS:
        raise ShapeMismatch("xnor_popcount_conv requires a layer in binary-weights mode")
    out = xnor_popcount_conv2d(x, layer.packed(), layer.stride, layer.padding)
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# layers


def _uniform_fan_in(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Real-valued convolution without bias (the stem)."""

    def __init__(self, cin, cout, kernel, stride=1, padding=None, rng=None, dtype=np.float32):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        self.weight = Param(_uniform_fan_in(rng, (cout, cin, kernel, kernel), dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight}

    def forward(self, x, training=False, surrogate=False):
        out, cols = conv2d(x, self.weight.data, self.stride, self.padding)
        self._cache = (cols, x.shape) if training else None
        return out

    def backward(self, grad):
        if self._cache is None:
            raise StaleState("Conv2d.backward without a training forward")
        cols, x_shape = self._cache
        grad_x, grad_w = conv2d_backward(grad, cols, self.weight.data, x_shape, self.stride, self.padding)
        self.weight.grad += grad_w
        return grad_x


class BinaryConv2d(Module):
    """Convolution over binarized activations with latent real weights.

    ``mode="binary"`` uses ``Sign(w)`` (clipped-identity STE for the weight
    gradient); ``mode="real"`` uses the latent weights directly, which is the
    first phase of two-step training.  With ``surrogate=True`` the binary mode
    uses ``clip(w, -1, 1)`` in the forward pass so that the analytic backward
    becomes the exact gradient of a differentiable model.
    """

    def __init__(self, cin, cout, kernel, stride=1, padding=None, mode=BINARY_WEIGHTS,
                 rng=None, dtype=np.float32):
        if mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {mode!r}")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.mode = mode
        self.pad_value = -1.0
        rng = rng or np.random.default_rng(0)
        self.weight = Param(_uniform_fan_in(rng, (cout, cin, kernel, kernel), dtype), clamp=True)
        self._packed = None
        self._packed_src = None
        self._cache = None

    def params(self):
        return {"weight": self.weight}

    def packed(self) -> BitTensor:
        """Packed ``Sign`` of the latent weights, rebuilt when they change."""
        w = self.weight.data
        if self._packed is None or not np.array_equal(self._packed_src, w):
            self._packed = binarize_weights(w)
            self._packed_src = w.copy()
        return self._packed

    def effective_weight(self, surrogate=False):
        w = self.weight.data
        if self.mode == REAL_WEIGHTS:
            return w
        if surrogate:
            return np.clip(w, -1, 1)
        return np.where(w > 0, 1.0, -1.0).astype(w.dtype)

    def forward(self, x, training=False, surrogate=False):
        if isinstance(x, BitTensor):
            if training:
                raise ValueError("packed activations are inference-only")
            return xnor_popcount_conv(x, self, dtype=self.weight.data.dtype)
        w_eff = self.effective_weight(surrogate)
        out, cols = conv2d(x, w_eff, self.stride, self.padding, pad_value=self.pad_value)
        self._cache = (cols, x.shape, w_eff) if training else None
        return out

    def backward(self, grad):
        if self._cache is None:
            raise StaleState("BinaryConv2d.backward without a training forward")
        cols, x_shape, w_eff = self._cache
        grad_x, grad_w = conv2d_backward(grad, cols, w_eff, x_shape, self.stride, self.padding)
        if self.mode == BINARY_WEIGHTS:
            grad_w = grad_w * (np.abs(self.weight.data) <= 1)
        self.weight.grad += grad_w
        return grad_x


def batchnorm_forward(x, scale, shift, mean, var, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat * scale[None, :, None, None] + shift[None, :, None, None], xhat, inv_std


def batchnorm_backward(grad, xhat, inv_std, scale, batch_stats):
    """Return ``(grad_x, grad_scale, grad_shift)``.

    ``batch_stats`` selects whether mean/variance were computed from this batch
    (and therefore depend on ``x``) or came from running estimates.
    """
    grad_shift = grad.sum(axis=(0, 2, 3))
    grad_scale = (grad * xhat).sum(axis=(0, 2, 3))
    gxhat = grad * scale[None, :, None, None]
    if not batch_stats:
        return gxhat * inv_std[None, :, None, None], grad_scale, grad_shift
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    grad_x = (inv_std[None, :, None, None] / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return grad_x, grad_scale, grad_shift


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.scale = Param(np.ones(channels, dtype=dtype))
        self.shift = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, value)

    def forward(self, x, training=False, surrogate=False):
        dt = x.dtype
        if training:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.var(axis=(0, 2, 3), dtype=np.float64)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            mo = self.momentum
            self.running_mean = ((1 - mo) * self.running_mean + mo * mean).astype(dt)
            self.running_var = ((1 - mo) * self.running_var + mo * unbiased).astype(dt)
            mean, var = mean.astype(dt), var.astype(dt)
        else:
            mean, var = self.running_mean, self.running_var
        y, xhat, inv_std = batchnorm_forward(x, self.scale.data, self.shift.data, mean, var, self.eps)
        self._cache = (xhat, inv_std.astype(dt), training) if training else None
        return y.astype(dt, copy=False)

    def backward(self, grad):
        if self._cache is None:
            raise StaleState("BatchNorm2d.backward without a training forward")
        xhat, inv_std, batch_stats = self._cache
        grad_x, gs, gb = batchnorm_backward(grad, xhat, inv_std, self.scale.data, batch_stats)
        self.scale.grad += gs
        self.shift.grad += gb
        return grad_x
