import numpy as np
import pytest

from dybnn.binconv import BINARY_WEIGHTS, REAL_WEIGHTS
from dybnn.config import DYNAMIC, DYNAMIC_SIGN_ONLY, REAL, STATIC, config_from_dict, load_config
from dybnn.cost import count_ops
from dybnn.errors import ShapeMismatch, StaleState
from dybnn.network import Block, Classifier, avg_pool2, avg_pool2_backward, build_model

from helpers import check_module, naive_conv, numerical_grad, rel_error

TINY = {
    "name": "tiny",
    "input_shape": [2, 8, 8],
    "reduction": 4,
    "stem": {"out_channels": 8, "kernel": 3, "stride": 1},
    "blocks": [
        {"in_channels": 8, "out_channels": 8, "stride": 1},
        {"in_channels": 8, "out_channels": 16, "stride": 2},
    ],
    "classifier": {"classes": 3},
}


def tiny(activation=DYNAMIC, seed=0):
    return config_from_dict({**TINY, "activation": activation, "seed": seed})


def test_reduction_property_dynamic_equals_static():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 3, 32, 32)).astype(np.float32)
    static = build_model(load_config("cifar-static"))
    dynamic = build_model(load_config("cifar-dynamic"))
    np.testing.assert_array_equal(static(x), dynamic(x))


def test_shared_parameters_identical_across_variants():
    a = build_model(tiny(STATIC)).named_parameters()
    b = build_model(tiny(DYNAMIC)).named_parameters()
    common = set(a) & set(b)
    assert "blocks.0.conv1.weight" in common and "stem.conv.weight" in common
    for name in common:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_seed_changes_initialization():
    a = build_model(tiny(seed=0)).named_parameters()["blocks.0.conv1.weight"].data
    b = build_model(tiny(seed=1)).named_parameters()["blocks.0.conv1.weight"].data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("activation", [STATIC, DYNAMIC_SIGN_ONLY, DYNAMIC])
def test_popcount_kernel_matches_dense(activation):
    cfg = tiny(activation)
    rng = np.random.default_rng(1)
    dense = build_model(cfg)
    for p in dense.named_parameters().values():
        p.data[...] = rng.standard_normal(p.data.shape).astype(np.float32) * 0.3
    packed = build_model(cfg, kernel="popcount")
    packed.load_state_arrays(dense.state_arrays())
    x = rng.standard_normal((4, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(dense(x), packed(x))


def test_input_shape_checked():
    model = build_model(tiny())
    with pytest.raises(ShapeMismatch):
        model(np.zeros((1, 3, 8, 8), dtype=np.float32))


def test_layer_sequence_names_match_cost_rows():
    cfg = tiny()
    seq = [name for name, kind in build_model(cfg).layer_sequence() if kind not in ("shortcut-add", "concat", "gap")]
    assert seq == [r.name for r in count_ops(cfg).rows]


def test_weight_mode_switch_only_touches_binary_convs():
    model = build_model(tiny(), weight_mode=REAL_WEIGHTS)
    assert all(c.mode == REAL_WEIGHTS for c in model.binary_convs())
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    model.set_weight_mode(BINARY_WEIGHTS)
    assert model.weight_mode == BINARY_WEIGHTS
    assert all(c.mode == BINARY_WEIGHTS for c in model.binary_convs())
    for k, v in model.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_real_teacher_has_no_binarization():
    model = build_model(tiny(REAL))
    assert model.binary_convs() == []
    block = model.blocks[0]
    x = np.random.default_rng(2).standard_normal((2, 8, 8, 8)).astype(np.float32)
    assert block.sign1.forward(x) is x
    out = block.conv1.forward(x)
    want = naive_conv(x, block.conv1.weight.data.astype(np.float64), 1, 1, pad_value=0.0)
    np.testing.assert_allclose(out, want, rtol=1e-4, atol=1e-5)


def test_block_shapes_and_concat():
    cfg = tiny()
    block = Block(cfg.blocks[1], "blocks.1", 0, reduction=4)
    x = np.random.default_rng(3).standard_normal((2, 8, 8, 8)).astype(np.float32)
    assert block.forward(x).shape == (2, 16, 4, 4)
    assert len(block.conv2) == 2


def test_avg_pool2_backward_is_adjoint():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 6))
    g = rng.standard_normal((2, 3, 2, 3))
    assert abs(np.sum(avg_pool2(x) * g) - np.sum(x * avg_pool2_backward(g))) < 1e-12


def test_classifier_gradients():
    rng = np.random.default_rng(5)
    clf = Classifier(6, 4, seed=0, dtype=np.float64)
    x = rng.standard_normal((3, 6, 2, 3))
    errors = check_module(clf, x, lambda m, v: m.forward(v, training=True), rng)
    assert max(errors.values()) < 1e-6, errors


@pytest.mark.parametrize("activation", [STATIC, DYNAMIC])
def test_whole_model_surrogate_gradient(activation):
    """Hard sign replaced by its surrogate everywhere: analytic == numeric."""
    rng = np.random.default_rng(6)
    cfg = config_from_dict({**TINY, "activation": activation, "input_shape": [2, 4, 4],
                            "stem": {"out_channels": 8, "kernel": 3, "stride": 1}})
    model = build_model(cfg, dtype=np.float64)
    for p in model.named_parameters().values():
        p.data[...] = p.data + rng.standard_normal(p.data.shape) * 0.2
    x = rng.standard_normal((3, 2, 4, 4))
    labels_w = rng.standard_normal((3, 3))

    def loss():
        return float(np.sum(model.forward(x, training=True, surrogate=True) * labels_w))

    model.zero_grad()
    model.forward(x, training=True, surrogate=True)
    model.backward(labels_w)
    params = model.named_parameters()
    for name in ("blocks.0.conv1.weight", "blocks.1.act2.beta", "stem.conv.weight",
                 "blocks.1.bn2_1.scale", "classifier.fc.weight"):
        analytic = params[name].grad.copy()
        assert rel_error(analytic, numerical_grad(loss, params[name].data)) < 1e-4, name
    sign_param = "blocks.0.sign1.w1" if activation == DYNAMIC else "blocks.0.sign1.thresholds"
    analytic = params[sign_param].grad.copy()
    assert rel_error(analytic, numerical_grad(loss, params[sign_param].data)) < 1e-4


def test_backward_requires_training_forward():
    model = build_model(tiny())
    x = np.zeros((1, 2, 8, 8), dtype=np.float32)
    model(x)
    with pytest.raises(StaleState):
        model.backward(np.zeros((1, 3), dtype=np.float32))


def test_state_arrays_round_trip():
    a = build_model(tiny(seed=3))
    b = build_model(tiny(seed=4))
    b.load_state_arrays(a.state_arrays())
    x = np.random.default_rng(7).standard_normal((2, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(a(x), b(x))
    arrays = a.state_arrays()
    arrays["stem.conv.weight"] = arrays["stem.conv.weight"][:1]
    with pytest.raises(ShapeMismatch):
        b.load_state_arrays(arrays)
