"""Layer graph: activation stages, residual blocks and the full model.

Block layout (every binary convolution is preceded by one sign stage and
followed by batch norm)::

    x -> sign -> 3x3 bconv(stride) -> BN -> (+ avgpool(x) if stride 2 else x) -> act
      -> sign -> 1x1 bconv -> BN -> (+ previous) -> act

When a block doubles its width the 1x1 stage is duplicated; both branches
share the sign stage and the residual input, and their outputs are
concatenated along channels.
"""

from __future__ import annotations

import numpy as np

from . import activations as act
from .binconv import BINARY_WEIGHTS, REAL_WEIGHTS, WEIGHT_MODES, BatchNorm2d, BinaryConv2d, Conv2d
from .config import REAL, BlockSpec, ModelConfig
from .errors import ShapeMismatch, StaleState
from .module import Module, Param, param_rng
from .tensor import BitTensor, global_avg_pool, global_avg_pool_backward, pack_sign


class SignStage(Module):
    """Binarization with a static (RSign) or dynamic (DySign) threshold.

    ``mode="identity"`` passes real values through (real-valued teachers).
    """

    def __init__(self, channels, mode, reduction=16, rng=None, dtype=np.float32):
        self.mode = mode
        self.channels = channels
        if mode == "static":
            self.thresholds = Param(np.zeros(channels, dtype=dtype), decay=False)
        elif mode == "dynamic":
            hp = act.HyperFunctionParams.init(channels, channels, rng, reduction, dtype)
            self.hyper = {k: Param(v, decay=False) for k, v in zip(("w1", "b1", "w2", "b2"), hp.arrays())}
        elif mode != "identity":
            raise ValueError(f"unknown sign mode {mode!r}")
        self._cache = None

    def params(self):
        if self.mode == "static":
            return {"thresholds": self.thresholds}
        if self.mode == "dynamic":
            return dict(self.hyper)
        return {}

    def hyper_params(self) -> act.HyperFunctionParams:
        return act.HyperFunctionParams(*(self.hyper[k].data for k in ("w1", "b1", "w2", "b2")))

    def forward(self, x, training=False, surrogate=False, packed=False):
        if self.mode == "identity":
            return x
        state = None
        if self.mode == "static":
            t = self.thresholds.data
        else:
            state = act.hyper_generate(x, self.hyper_params(), self.channels)
            t = state.generated
        self._cache = (x, t, state) if training else None
        if surrogate:
            return act.approx_sign(x - t[..., None, None])
        if packed:
            return pack_sign(x - t[..., None, None])
        return act.threshold_sign(x, t)

    def backward(self, grad):
        if self.mode == "identity":
            return grad
        if self._cache is None:
            raise StaleState("SignStage.backward without a training forward")
        x, t, state = self._cache
        if self.mode == "static":
            grad_x, grad_t = act.sign_backward(x, t, grad)
            self.thresholds.grad += grad_t
            return grad_x
        grad_x, grads = act.dysign_backward(state, grad)
        for k, g in zip(("w1", "b1", "w2", "b2"), grads.arrays()):
            self.hyper[k].grad += g
        return grad_x


class ActStage(Module):
    """Shifted PReLU with static (RPReLU) or generated (DyPReLU) shifts."""

    def __init__(self, channels, dynamic, reduction=16, rng=None, dtype=np.float32, slope=0.25):
        self.dynamic = dynamic
        self.channels = channels
        self.beta = Param(np.full(channels, slope, dtype=dtype), decay=False)
        if dynamic:
            hp = act.HyperFunctionParams.init(channels, 2 * channels, rng, reduction, dtype)
            self.hyper = {k: Param(v, decay=False) for k, v in zip(("w1", "b1", "w2", "b2"), hp.arrays())}
        else:
            self.gamma = Param(np.zeros(channels, dtype=dtype), decay=False)
            self.zeta = Param(np.zeros(channels, dtype=dtype), decay=False)
        self._cache = None

    def params(self):
        if self.dynamic:
            return {**self.hyper, "beta": self.beta}
        return {"gamma": self.gamma, "zeta": self.zeta, "beta": self.beta}

    def hyper_params(self) -> act.HyperFunctionParams:
        return act.HyperFunctionParams(*(self.hyper[k].data for k in ("w1", "b1", "w2", "b2")))

    def forward(self, x, training=False, surrogate=False):
        if self.dynamic:
            y, state = act.dyprelu_forward(x, self.hyper_params(), self.beta.data)
            self._cache = state if training else None
            return y
        self._cache = x if training else None
        return act.shifted_prelu(x, self.gamma.data, self.zeta.data, self.beta.data)

    def backward(self, grad):
        if self._cache is None:
            raise StaleState("ActStage.backward without a training forward")
        if self.dynamic:
            grad_x, grads, grad_beta = act.dyprelu_backward(self._cache, self.beta.data, grad)
            for k, g in zip(("w1", "b1", "w2", "b2"), grads.arrays()):
                self.hyper[k].grad += g
            self.beta.grad += grad_beta
            return grad_x
        g = act.shifted_prelu_backward(self._cache, self.gamma.data, self.beta.data, grad)
        self.gamma.grad += g.gamma
        self.zeta.grad += g.zeta
        self.beta.grad += g.beta
        return g.x


def avg_pool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad):
    return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * np.asarray(0.25, grad.dtype)


class Block(Module):
    def __init__(self, spec: BlockSpec, name, seed, reduction=16, weight_mode=BINARY_WEIGHTS,
                 dtype=np.float32):
        self.spec = spec
        cin, cout, stride = spec.in_channels, spec.out_channels, spec.stride
        real = spec.activation == REAL

        def rng(local):
            return param_rng(seed, f"{name}.{local}")

        sign_mode = "identity" if real else ("dynamic" if spec.sign_dynamic else "static")
        self.real = real
        self.sign1 = SignStage(cin, sign_mode, reduction, rng("sign1"), dtype)
        self.conv1 = BinaryConv2d(cin, cin, 3, stride, mode=weight_mode, rng=rng("conv1"), dtype=dtype)
        self.bn1 = BatchNorm2d(cin, dtype=dtype)
        self.act1 = ActStage(cin, spec.prelu_dynamic, reduction, rng("act1"), dtype)
        self.sign2 = SignStage(cin, sign_mode, reduction, rng("sign2"), dtype)
        self.conv2 = [BinaryConv2d(cin, cin, 1, 1, mode=weight_mode, rng=rng(f"conv2_{i}"), dtype=dtype)
                      for i in range(spec.branches)]
        self.bn2 = [BatchNorm2d(cin, dtype=dtype) for _ in range(spec.branches)]
        self.act2 = ActStage(cout, spec.prelu_dynamic, reduction, rng("act2"), dtype)
        if real:
            for conv in self.convs():
                conv.mode = REAL_WEIGHTS
                conv.pad_value = 0.0

    def convs(self):
        return [self.conv1, *self.conv2]

    def children(self):
        out = {"sign1": self.sign1, "conv1": self.conv1, "bn1": self.bn1, "act1": self.act1,
               "sign2": self.sign2}
        for i, (conv, bn) in enumerate(zip(self.conv2, self.bn2)):
            out[f"conv2_{i}"] = conv
            out[f"bn2_{i}"] = bn
        out["act2"] = self.act2
        return out

    def layer_sequence(self):
        """Flat list of ``(name, kind)`` in execution order."""
        seq = [("sign1", self.sign1.mode + "-sign"), ("conv1", "binary-conv3x3"), ("bn1", "bn"),
               ("add1", "shortcut-add"), ("act1", "dyprelu" if self.act1.dynamic else "rprelu"),
               ("sign2", self.sign2.mode + "-sign")]
        for i in range(len(self.conv2)):
            seq += [(f"conv2_{i}", "binary-conv1x1"), (f"bn2_{i}", "bn"), (f"add2_{i}", "shortcut-add")]
        if len(self.conv2) > 1:
            seq.append(("concat", "concat"))
        seq.append(("act2", "dyprelu" if self.act2.dynamic else "rprelu"))
        return seq

    def forward(self, x, training=False, surrogate=False, packed=False):
        use_packed1 = packed and not training and self.conv1.mode == BINARY_WEIGHTS and not self.real
        s = self.sign1.forward(x, training, surrogate, use_packed1)
        h = self.bn1.forward(self.conv1.forward(s, training, surrogate), training)
        h = h + (avg_pool2(x) if self.spec.stride == 2 else x)
        a1 = self.act1.forward(h, training)
        use_packed2 = packed and not training and self.conv2[0].mode == BINARY_WEIGHTS and not self.real
        s2 = self.sign2.forward(a1, training, surrogate, use_packed2)
        outs = [bn.forward(conv.forward(s2, training, surrogate), training) + a1
                for conv, bn in zip(self.conv2, self.bn2)]
        h2 = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        return self.act2.forward(h2, training)

    def backward(self, grad):
        g_h2 = self.act2.backward(grad)
        chunks = np.split(g_h2, len(self.conv2), axis=1)
        g_a1 = sum(chunks)
        g_s2 = sum(conv.backward(bn.backward(c)) for conv, bn, c in zip(self.conv2, self.bn2, chunks))
        g_a1 = g_a1 + self.sign2.backward(g_s2)
        g_h = self.act1.backward(g_a1)
        g_x = avg_pool2_backward(g_h) if self.spec.stride == 2 else g_h
        g_s = self.conv1.backward(self.bn1.backward(g_h))
        return g_x + self.sign1.backward(g_s)


class Linear(Module):
    def __init__(self, fin, fout, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = Param(rng.uniform(-bound, bound, size=(fout, fin)).astype(dtype))
        self.bias = Param(np.zeros(fout, dtype=dtype), decay=False)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False, surrogate=False):
        self._cache = x if training else None
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        if self._cache is None:
            raise StaleState("Linear.backward without a training forward")
        self.weight.grad += grad.T @ self._cache
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class Stem(Module):
    def __init__(self, cin, spec, seed, dtype=np.float32):
        self.conv = Conv2d(cin, spec.out_channels, spec.kernel, spec.stride,
                           rng=param_rng(seed, "stem.conv"), dtype=dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)

    def children(self):
        return {"conv": self.conv, "bn": self.bn}

    def forward(self, x, training=False, surrogate=False):
        return self.bn.forward(self.conv.forward(x, training), training)

    def backward(self, grad):
        return self.conv.backward(self.bn.backward(grad))


class Classifier(Module):
    """Global average pool followed by a real-valued linear layer."""

    def __init__(self, cin, classes, seed, dtype=np.float32):
        self.fc = Linear(cin, classes, rng=param_rng(seed, "classifier.fc"), dtype=dtype)
        self._spatial = None

    def children(self):
        return {"fc": self.fc}

    def forward(self, x, training=False, surrogate=False):
        self._spatial = x.shape[2:]
        return self.fc.forward(global_avg_pool(x), training)

    def backward(self, grad):
        return global_avg_pool_backward(self.fc.backward(grad), self._spatial)


class Model(Module):
    """Instantiated :class:`ModelConfig`.

    ``kernel`` selects how binary convolutions run at inference:
    ``"popcount"`` packs activations and uses XNOR-popcount, ``"dense"`` uses
    the float path.  Both give identical integer results; training always uses
    the dense path.
    """

    def __init__(self, cfg: ModelConfig, weight_mode=BINARY_WEIGHTS, dtype=np.float32, kernel="dense"):
        if weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {weight_mode!r}")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.kernel = kernel
        seed = cfg.seed
        cin = cfg.input_shape[0]
        self.stem = Stem(cin, cfg.stem, seed, dtype) if cfg.stem else None
        self.blocks = [Block(b, f"blocks.{i}", seed, cfg.reduction, weight_mode, dtype)
                       for i, b in enumerate(cfg.blocks)]
        last_c = cfg.spatial_shapes()[-1][0]
        self.classifier = Classifier(last_c, cfg.classifier.classes, seed, dtype) if cfg.classifier else None
        self._weight_mode = weight_mode

    def children(self):
        out = {}
        if self.stem:
            out["stem"] = self.stem
        for i, b in enumerate(self.blocks):
            out[f"blocks.{i}"] = b
        if self.classifier:
            out["classifier"] = self.classifier
        return out

    @property
    def weight_mode(self):
        return self._weight_mode

    def set_weight_mode(self, mode):
        """Switch every binary convolution between real and binary weights."""
        if mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {mode!r}")
        for b in self.blocks:
            if not b.real:
                for conv in b.convs():
                    conv.mode = mode
        self._weight_mode = mode

    def binary_convs(self):
        return [conv for b in self.blocks if not b.real for conv in b.convs()]

    def layer_sequence(self):
        seq = []
        if self.stem:
            seq += [("stem.conv", "real-conv"), ("stem.bn", "bn")]
        for i, b in enumerate(self.blocks):
            seq += [(f"blocks.{i}.{n}", k) for n, k in b.layer_sequence()]
        if self.classifier:
            seq += [("classifier.pool", "gap"), ("classifier.fc", "linear")]
        return seq

    def forward(self, x, training=False, surrogate=False):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise ShapeMismatch(
                f"input shape {tuple(x.shape[1:])} does not match model input {tuple(self.cfg.input_shape)}"
            )
        x = x.astype(self.dtype, copy=False)
        packed = self.kernel == "popcount" and not training and not surrogate
        if self.stem:
            x = self.stem.forward(x, training)
        for b in self.blocks:
            x = b.forward(x, training, surrogate, packed)
        if self.classifier:
            x = self.classifier.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        if self.classifier:
            grad = self.classifier.backward(grad)
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        if self.stem:
            grad = self.stem.backward(grad)
        return grad

    def state_arrays(self):
        """Every parameter and buffer array by dotted name, in a stable order."""
        out = {k: p.data for k, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays):
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(arrays)
        if missing:
            raise KeyError(sorted(missing)[0])
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ShapeMismatch(f"{name}: expected {p.data.shape}, got {arrays[name].shape}")
            p.data = arrays[name].astype(self.dtype).copy()
            p.zero_grad()
        owners = {}
        for mod_name, mod in self._named_modules():
            for b in mod.own_buffers():
                owners[f"{mod_name}{b}"] = (mod, b)
        for name in buffers:
            mod, local = owners[name]
            mod.set_buffer(local, arrays[name].astype(self.dtype).copy())

    def _named_modules(self, prefix=""):
        yield prefix, self
        stack = [(prefix, self)]
        while stack:
            pre, mod = stack.pop()
            for name, child in mod.children().items():
                full = f"{pre}{name}."
                yield full, child
                stack.append((full, child))


def build_model(cfg: ModelConfig, weight_mode=BINARY_WEIGHTS, dtype=np.float32, kernel="dense") -> Model:
    """Instantiate ``cfg`` deterministically from ``cfg.seed``."""
    return Model(cfg, weight_mode=weight_mode, dtype=dtype, kernel=kernel)
