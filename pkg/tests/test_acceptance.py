"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary under "acceptance criteria".
"""

import json
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dybnn import activations as act
from dybnn.ablation import AblationSettings, run_ablation, summarize
from dybnn.binconv import BINARY_WEIGHTS, REAL_WEIGHTS, BatchNorm2d, Conv2d, conv2d, xnor_popcount_conv2d
from dybnn.config import load_config
from dybnn.cost import compare_configs, count_ops
from dybnn.datasets import LabeledBatch
from dybnn.network import ActStage, Classifier, SignStage, build_model
from dybnn.serialize import load_model, save_model
from dybnn.tensor import pack, pack_sign
from dybnn.trainer import Adam, TrainConfig, linear_lr, run_two_step, train_step

from conftest import ACCEPTANCE_LINES, REPO
from helpers import check_module, naive_conv, numerical_grad, random_pm1, rel_error

ABLATION_RESULTS = REPO / "results" / "ablation.json"


@contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line; ``detail`` may be filled in by the body."""
    info = {"detail": ""}
    start = time.time()
    try:
        yield info
    except BaseException:
        ACCEPTANCE_LINES.append(f"[{number}] FAIL  {title}  {info['detail']} ({time.time() - start:.1f}s)")
        raise
    ACCEPTANCE_LINES.append(f"[{number}] PASS  {title}  {info['detail']} ({time.time() - start:.1f}s)")


def test_criterion_1_xnor_popcount_oracle():
    with criterion(1, "xnor-popcount == naive +/-1 conv") as info:
        rng = np.random.default_rng(2024)
        start = time.time()
        cases = 0
        while cases < 1200:
            cin = int(rng.integers(1, 131))
            k = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2)) if k == 3 else 0
            hw = int(rng.integers(k, 7))
            x = random_pm1(rng, (int(rng.integers(1, 3)), cin, hw, hw))
            w = random_pm1(rng, (int(rng.integers(1, 5)), cin, k, k))
            got = xnor_popcount_conv2d(pack(x), pack(w), stride, padding)
            want = naive_conv(x, w, stride, padding, pad_value=-1.0)
            assert np.array_equal(got, want.astype(np.int64)), (cin, k, stride, padding, hw)
            cases += 1
        elapsed = time.time() - start
        info["detail"] = f"{cases} cases exact in {elapsed:.1f}s"
        assert elapsed < 60


def test_criterion_2_cost_model():
    with criterion(2, "OPs within 5% of 0.97e8 / 0.99e8, exact delta") as info:
        static_cfg = load_config("mobilenet-reactnet-static")
        dynamic_cfg = load_config("mobilenet-reactnet-dynamic")
        static = count_ops(static_cfg).total.ops
        dynamic = count_ops(dynamic_cfg).total.ops
        delta = compare_configs(static_cfg, dynamic_cfg).total_delta.ops

        sites = Fraction(0)
        shapes = static_cfg.spatial_shapes()
        for i, b in enumerate(static_cfg.blocks):
            c = shapes[i][0]
            sites += 2 * (c + Fraction(c * c, 8))  # two sign sites per block
            for ch in (c, b.out_channels):  # two PReLU sites per block
                sites += 2 * (ch + Fraction(ch * ch, 8))

        info["detail"] = (f"static={float(static) / 1e8:.4f}e8 dynamic={float(dynamic) / 1e8:.4f}e8 "
                          f"delta={float(delta) / 1e8:.4f}e8")
        assert abs(float(static) / 0.97e8 - 1) <= 0.05
        assert abs(float(dynamic) / 0.99e8 - 1) <= 0.05
        assert delta == sites
        # the expected 0.02e8 is the difference of totals rounded to 0.01e8
        assert round(float(dynamic) / 1e8, 2) - round(float(static) / 1e8, 2) == pytest.approx(0.02)
        assert abs(float(delta) - 0.02e8) <= 0.05 * 0.99e8


def _randomize(module, rng, scale=0.3):
    for p in module.named_parameters().values():
        p.data[...] = p.data + rng.standard_normal(p.data.shape) * scale


def _gradient_instances(rng):
    """Yield ``(layer type, worst relative error)`` for one random instance of each type."""
    n = int(rng.integers(1, 4))
    c = int(rng.integers(2, 9))
    hw = int(rng.integers(2, 5))

    # hyper function
    k = c * int(rng.integers(1, 3))
    p = act.HyperFunctionParams(rng.standard_normal((c, 2)), rng.standard_normal(2) * 0.5,
                                rng.standard_normal((2, k)), rng.standard_normal(k) * 0.1)
    g = rng.standard_normal((n, c))
    weights = rng.standard_normal((n, k))

    def hyper_loss():
        return float(np.sum(act.hyper_forward(g, p) * weights))

    _, hidden_pre = act._hyper(g, p)
    grad_g, grads = act.hyper_backward(weights, g, hidden_pre, p)
    err = rel_error(grad_g, numerical_grad(hyper_loss, g))
    for analytic, param in zip(grads.arrays(), p.arrays()):
        err = max(err, rel_error(analytic, numerical_grad(hyper_loss, param)))
    yield "hyper", err

    x = rng.standard_normal((n, c, hw, hw))
    for name, dynamic in (("rprelu", False), ("dyprelu", True)):
        stage = ActStage(c, dynamic, reduction=2, rng=rng, dtype=np.float64)
        _randomize(stage, rng)
        errs = check_module(stage, x.copy(), lambda m, v: m.forward(v, training=True), rng)
        yield name, max(errs.values())

    bn = BatchNorm2d(c, dtype=np.float64)
    _randomize(bn, rng)
    errs = check_module(bn, rng.standard_normal((n + 1, c, hw, hw)), lambda m, v: m.forward(v, training=True), rng)
    yield "batchnorm", max(errs.values())

    kernel = int(rng.choice([1, 3]))
    conv = Conv2d(c, int(rng.integers(1, 5)), kernel, int(rng.integers(1, 3)), rng=rng, dtype=np.float64)
    errs = check_module(conv, x.copy(), lambda m, v: m.forward(v, training=True), rng)
    yield "real-conv", max(errs.values())

    clf = Classifier(c, int(rng.integers(2, 6)), seed=int(rng.integers(1000)), dtype=np.float64)
    errs = check_module(clf, x.copy(), lambda m, v: m.forward(v, training=True), rng)
    yield "classifier", max(errs.values())

    for name, mode in (("sign-surrogate-static", "static"), ("sign-surrogate-dynamic", "dynamic")):
        stage = SignStage(c, mode, reduction=2, rng=rng, dtype=np.float64)
        _randomize(stage, rng, 0.2)
        xs = rng.uniform(-1.2, 1.2, (n, c, hw, hw))
        errs = check_module(stage, xs, lambda m, v: m.forward(v, training=True, surrogate=True), rng)
        yield name, max(errs.values())


def test_criterion_3_gradient_suite():
    with criterion(3, "gradient suite vs central differences (float64)") as info:
        rng = np.random.default_rng(7)
        worst, counts = {}, {}
        for _ in range(25):
            for name, err in _gradient_instances(rng):
                worst[name] = max(worst.get(name, 0.0), err)
                counts[name] = counts.get(name, 0) + 1
        info["detail"] = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
        assert min(counts.values()) >= 20
        assert all(v < 1e-4 for v in worst.values()), worst


def test_criterion_4_reduction_property():
    with criterion(4, "dynamic with zero f2 == static, bit-identical logits") as info:
        rng = np.random.default_rng(11)
        mismatches = 0
        for backbone, shape in (("cifar", (3, 32, 32)), ("mnist", (1, 28, 28))):
            static = build_model(load_config(f"{backbone}-static"))
            dynamic = build_model(load_config(f"{backbone}-dynamic"))
            x = rng.standard_normal((100, *shape)).astype(np.float32)
            mismatches += int(np.count_nonzero(static(x) != dynamic(x)))
        info["detail"] = f"200 inputs, {mismatches} differing logits"
        assert mismatches == 0


@pytest.mark.slow
def test_criterion_5_ablation_direction(cifar10):
    with criterion(5, "ablation: static <= sign-only <= dynamic, margin > pooled std") as info:
        if not ABLATION_RESULTS.exists():
            pytest.fail(f"{ABLATION_RESULTS} missing; run demos/ablation.py")
        doc = json.loads(ABLATION_RESULTS.read_text())
        settings = AblationSettings.from_dict(doc["settings"])
        assert len(settings.seeds) >= 5 and set(settings.variants) == {"static", "dynamic-sign-only", "dynamic"}
        summary = summarize(doc)
        assert all(summary.counts[v] == len(settings.seeds) for v in settings.variants), summary.counts
        info["detail"] = "; ".join(f"{v}={summary.means[v]:.4f}" for v in settings.variants) + (
            f"; margin={summary.margin:+.4f} pooled_std={summary.pooled_std:.4f}")
        assert summary.ordered, summary.lines()
        assert summary.margin_ok, summary.lines()


def test_criterion_6_two_step_contract(mnist, tmp_path):
    with criterion(6, "two-step: inheritance, real-conv phase 1, binary phase 2") as info:
        train, test = mnist
        snapshots = {}

        def observer(event, phase, model):
            if event in ("start", "end"):
                snapshots[(event, phase)] = (model.weight_mode,
                                             {k: v.copy() for k, v in model.state_arrays().items()})

        cfg = TrainConfig(epochs=2, batch_size=64, seed=0)
        model, metrics = run_two_step(load_config("mnist-dynamic"), train.subset(3000), test.subset(1000), cfg,
                                      out_dir=tmp_path, observer=observer)
        end1 = snapshots[("end", "step1")][1]
        start2 = snapshots[("start", "step2")][1]
        assert snapshots[("start", "step1")][0] == REAL_WEIGHTS
        assert snapshots[("start", "step2")][0] == BINARY_WEIGHTS
        assert end1.keys() == start2.keys()
        assert all(np.array_equal(end1[k], start2[k]) for k in end1)

        rng = np.random.default_rng(0)
        phase1 = load_model(tmp_path / "step1" / "model.dybnn", dtype=np.float64)
        assert phase1.weight_mode == REAL_WEIGHTS
        worst = 0.0
        for conv in phase1.binary_convs():
            x = random_pm1(rng, (2, conv.weight.data.shape[1], 7, 7))
            oracle = naive_conv(x, conv.weight.data, conv.stride, conv.padding, pad_value=-1.0)
            worst = max(worst, float(np.abs(conv.forward(x) - oracle).max()))
        assert worst < 1e-9

        phase2 = load_model(tmp_path / "step2" / "model.dybnn")
        assert phase2.weight_mode == BINARY_WEIGHTS
        for conv in phase2.binary_convs():
            x = rng.standard_normal((2, conv.weight.data.shape[1], 7, 7)).astype(np.float32)
            dense = conv.forward(np.where(x > 0, 1.0, -1.0).astype(np.float32))
            packed = xnor_popcount_conv2d(pack_sign(x), conv.packed(), conv.stride, conv.padding)
            assert np.array_equal(dense, packed.astype(np.float32))
            w_sign = np.where(conv.weight.data > 0, 1.0, -1.0)
            assert np.array_equal(dense, conv2d(np.where(x > 0, 1.0, -1.0), w_sign, conv.stride,
                                                conv.padding, -1.0)[0].astype(np.float32))
        phases = {(r["phase"], r["split"]) for r in metrics.records}
        assert phases == {("step1", "train"), ("step1", "test"), ("step2", "train"), ("step2", "test")}
        final = [r for r in metrics.records if r["split"] == "test"][-1]
        info["detail"] = f"phase-1 conv max|diff|={worst:.1e}; final test top1={final['top1']:.3f}"


def test_criterion_7_serialization(tmp_path):
    with criterion(7, "save -> load -> forward bit-identical (3 variants)") as info:
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
        for variant in ("static", "dynamic-sign-only", "dynamic"):
            model = build_model(load_config(f"cifar-{variant}"))
            for p in model.named_parameters().values():
                p.data = (p.data + rng.standard_normal(p.data.shape) * 0.1).astype(np.float32)
            for b in model.blocks:
                b.bn1.running_var = rng.uniform(0.5, 2, b.bn1.running_var.shape).astype(np.float32)
            path = tmp_path / f"{variant}.dybnn"
            save_model(model, path)
            assert np.array_equal(model(x), load_model(path)(x)), variant
            assert np.array_equal(model(x), load_model(path, kernel="popcount")(x)), variant
        info["detail"] = "static, dynamic-sign-only, dynamic"


def test_criterion_8_single_sample_overfit(mnist):
    with criterion(8, "single MNIST sample: CE < 0.01 within 200 steps (fully dynamic)") as info:
        train, _ = mnist
        batch = LabeledBatch(train.images[:1], train.labels[:1])
        model = build_model(load_config("mnist-dynamic"))
        assert model.weight_mode == BINARY_WEIGHTS
        opt = Adam(model.named_parameters())
        cfg = TrainConfig()
        start = time.time()
        loss = float("inf")
        for step in range(200):
            loss, _ = train_step(model, batch, cfg, opt, linear_lr(step, 200, cfg.initial_lr))
            if loss < 0.01:
                break
        info["detail"] = f"CE={loss:.4g} after {step + 1} steps in {time.time() - start:.1f}s"
        assert loss < 0.01
