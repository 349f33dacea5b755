"""Static vs. dynamic thresholds and shifts.

RSign uses one learned threshold per channel.  DySign generates thresholds
per sample from the channel means with two small FC layers.  With the second
FC layer at zero both are the plain sign function.

Run: python demos/02_dynamic_activations.py
"""

import numpy as np

from dybnn import activations as act
from dybnn.config import load_config
from dybnn.network import build_model
from dybnn.tensor import unpack

rng = np.random.default_rng(1)
x = rng.standard_normal((3, 32, 8, 8)).astype(np.float32)
x[1] += 0.8  # a brighter sample: its channel means are shifted up

# freshly initialized hyper function: zero output, so DySign == Sign
p = act.HyperFunctionParams.init(32, 32, rng, reduction=4)
bits, state = act.dysign_forward(x, p)
print("initial thresholds all zero:", not state.generated.any())

# give the second layer some weight and the thresholds start to track the input
p.w2[:] = rng.standard_normal(p.w2.shape).astype(np.float32)
bits, state = act.dysign_forward(x, p)
print("thresholds, first 4 channels:\n", np.round(state.generated[:, :4], 3))
print("fraction of +1 per sample:", np.round((unpack(bits) > 0).mean(axis=(1, 2, 3)), 3))

# DyPReLU generates (gamma, zeta) per sample; beta stays a static slope
q = act.HyperFunctionParams.init(32, 64, rng)
y, _ = act.dyprelu_forward(x, q, np.full(32, 0.25, dtype=np.float32))
print("DyPReLU at init equals PReLU(0.25):", np.array_equal(y, np.where(x > 0, x, 0.25 * x)))

# the same holds for whole models built from one seed
static = build_model(load_config("cifar-static"))
dynamic = build_model(load_config("cifar-dynamic"))
images = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
print("static and dynamic logits identical at init:", np.array_equal(static(images), dynamic(images)))
