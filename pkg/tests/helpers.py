"""Independent oracles shared by the test modules."""

import numpy as np


def naive_conv(x, w, stride=1, padding=0, pad_value=0.0):
    """Direct loop cross-correlation; exact for small integer-valued inputs."""
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.full((n, c, h + 2 * padding, wd + 2 * padding), pad_value, dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def random_pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def numerical_grad(f, x, h=1e-6):
    """Central differences of the scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0), 1e-12)
    return float(np.abs(a - n).max(initial=0) / scale)


def check_module(module, x, forward, rng, h=1e-6):
    """Compare a module's backward with central differences.

    ``forward(module, x)`` must run a training-mode forward.  Returns the
    worst relative error over the input and every parameter.
    """
    out = forward(module, x)
    weights = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(forward(module, x) * weights))

    module.zero_grad()
    forward(module, x)
    grad_x = module.backward(weights)
    errors = {"x": rel_error(grad_x, numerical_grad(loss, x, h))}
    for name, p in module.named_parameters().items():
        analytic = p.grad.copy()
        errors[name] = rel_error(analytic, numerical_grad(loss, p.data, h))
    return errors
