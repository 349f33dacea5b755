"""Dense float tensors, bit-packed binary tensors and their primitives.

Float tensors are plain ``numpy.ndarray`` objects in ``(n, c, h, w)`` layout
(2-D ``(n, features)`` is accepted where noted).  Binary tensors are packed
64 logical values per ``uint64`` word with the channel axis innermost, so a
convolution tap at a fixed spatial offset reads ``ceil(c / 64)`` contiguous
words.  Bit 1 encodes +1 and bit 0 encodes -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySpatial, NonBinaryInput, NonFiniteInput, ShapeMismatch

WORD_BITS = 64


def float_tensor(data, dtype=np.float32) -> np.ndarray:
    """Validate and copy ``data`` into a finite 4-D or 2-D float array."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim not in (2, 4):
        raise ShapeMismatch(f"expected a 2-D or 4-D tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("tensor contains NaN or Inf")
    return arr


def num_blocks(channels: int) -> int:
    return -(-channels // WORD_BITS)


def valid_bits(channels: int) -> np.ndarray:
    """Number of meaningful bits in each 64-bit block of a channel run."""
    counts = np.full(num_blocks(channels), WORD_BITS, dtype=np.int64)
    if channels % WORD_BITS:
        counts[-1] = channels % WORD_BITS
    return counts


@dataclass(frozen=True)
class BitTensor:
    """Bit-packed +/-1 tensor.

    ``words`` has shape ``(n, h, w, ceil(c / 64))``; bit ``j`` of block ``b``
    holds channel ``64 * b + j``.  Bits beyond ``c`` in the last block are
    always zero.
    """

    shape: tuple
    words: np.ndarray

    def __post_init__(self):
        n, c, h, w = self.shape
        expected = (n, h, w, num_blocks(c))
        if self.words.shape != expected or self.words.dtype != np.uint64:
            raise ShapeMismatch(
                f"words must be uint64 of shape {expected}, got "
                f"{self.words.dtype} {self.words.shape}"
            )
        self.words.flags.writeable = False

    @property
    def channels(self) -> int:
        return self.shape[1]

    def is_canonical(self) -> bool:
        c = self.shape[1]
        if c % WORD_BITS == 0:
            return True
        pad_mask = ~np.uint64((1 << (c % WORD_BITS)) - 1)
        return not np.any(self.words[..., -1] & pad_mask)

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    __hash__ = None


def _pack_bool(bits: np.ndarray, shape: tuple) -> BitTensor:
    # bits: (n, h, w, c) bool, channel innermost
    n, c, h, w = shape
    nb = num_blocks(c)
    padded = np.zeros((n, h, w, nb * WORD_BITS), dtype=bool)
    padded[..., :c] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitTensor(tuple(int(s) for s in shape), words.reshape(n, h, w, nb))


def pack(t: np.ndarray) -> BitTensor:
    """Pack a +/-1 valued 4-D tensor into canonical bit form."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeMismatch(f"pack expects a 4-D tensor, got shape {t.shape}")
    pos = t == 1
    if not np.all(pos | (t == -1)):
        raise NonBinaryInput("pack: every element must be exactly +1 or -1")
    return _pack_bool(pos.transpose(0, 2, 3, 1), t.shape)


def pack_sign(x: np.ndarray) -> BitTensor:
    """Pack ``Sign(x)`` directly (``x > 0`` -> +1, else -1)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"pack_sign expects a 4-D tensor, got shape {x.shape}")
    return _pack_bool((x > 0).transpose(0, 2, 3, 1), x.shape)


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`pack`."""
    n, c, h, w = b.shape
    raw = np.ascontiguousarray(b.words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, count=c, bitorder="little")
    out = bits.astype(dtype).transpose(0, 3, 1, 2) * 2 - 1
    return np.ascontiguousarray(out, dtype=dtype)


def sign(x: np.ndarray) -> np.ndarray:
    """Hard sign with ``Sign(0) = -1``."""
    return np.where(x > 0, 1.0, -1.0).astype(x.dtype, copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel spatial mean; returns an ``(n, c)`` array.

    Accumulation is carried out in float64 regardless of storage dtype.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects (n, c, h, w), got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise EmptySpatial("global_avg_pool over an empty spatial extent")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype, copy=False)


def global_avg_pool_backward(grad: np.ndarray, spatial: tuple) -> np.ndarray:
    """Spread an ``(n, c)`` gradient uniformly over ``spatial = (h, w)``."""
    h, w = spatial
    g = grad / (h * w)
    return np.broadcast_to(g[:, :, None, None], g.shape + (h, w)).copy()
