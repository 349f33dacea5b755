"""Two-step training on an MNIST subset.

Phase 1 trains binary activations with real weights.  Phase 2 loads the
phase-1 checkpoint, switches the convolutions to sign(w) and trains again.

Run: python demos/04_two_step_mnist.py [mnist_dir]
"""

import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from dybnn.activations import hyper_generate
from dybnn.config import load_config
from dybnn.datasets import load_dataset
from dybnn.serialize import load_model
from dybnn.trainer import TrainConfig, evaluate, run_two_step

logging.basicConfig(level=logging.INFO, format="%(message)s")

train, test = load_dataset("mnist", sys.argv[1] if len(sys.argv) > 1 else None)
train, test = train.subset(4000), test.subset(1000)

out = Path(tempfile.mkdtemp(prefix="dybnn-mnist-"))
cfg = TrainConfig(epochs=2, batch_size=64, seed=0)
model, metrics = run_two_step(load_config("mnist-dynamic"), train, test, cfg, out_dir=out)

# the saved phase-2 model gives the same accuracy with the packed kernel
packed = load_model(out / "step2" / "model.dybnn", kernel="popcount")
print("dense   :", evaluate(model, test))
print("popcount:", evaluate(packed, test))
print("metrics log:", out / "metrics.log")

# learned thresholds now differ between samples
sign = model.blocks[0].sign1
x = model.stem.forward(test.images[:64])
alpha = hyper_generate(x, sign.hyper_params(), x.shape[1]).generated
print("block-0 threshold std across samples:", np.round(alpha.std(axis=0).mean(), 4))
