"""Packed +/-1 tensors and the XNOR-popcount convolution.

Run: python demos/01_packed_convolution.py
"""

import numpy as np

from dybnn.binconv import conv2d, xnor_popcount_conv2d
from dybnn.tensor import pack, pack_sign, unpack

rng = np.random.default_rng(0)

# 70 channels need two 64-bit words per pixel; the second word uses 6 bits
x = np.where(rng.random((1, 70, 5, 5)) < 0.5, -1.0, 1.0)
bits = pack(x)
print("packed words:", bits.words.shape, bits.words.dtype)
print("pad bits zero:", bits.is_canonical())
print("round trip exact:", np.array_equal(unpack(bits, np.float64), x))

# sign of real activations packs straight from floats (0 maps to -1)
a = rng.standard_normal((2, 70, 6, 6))
w = rng.standard_normal((8, 70, 3, 3))
a_bits, w_bits = pack_sign(a), pack_sign(w)

# per block: agreements = valid - popcount(a ^ w); dot = 2*agreements - valid
out = xnor_popcount_conv2d(a_bits, w_bits, stride=1, padding=1)

# same result with a float convolution over +/-1 values; padding is -1 in both
dense, _ = conv2d(np.where(a > 0, 1.0, -1.0), np.where(w > 0, 1.0, -1.0), 1, 1, pad_value=-1.0)
print("output:", out.shape, out.dtype)
print("integer-exact vs dense:", np.array_equal(out, dense.astype(np.int64)))
print("value range:", out.min(), out.max(), "(bounded by 70*9 =", 70 * 9, ")")
