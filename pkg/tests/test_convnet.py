"""Convolutional interpolator stage: structure parsing, forward/backward,
padding, Adam and the training loop."""

import copy

import numpy as np
import pytest

from chandb.convnet import (
    AdamState,
    ConvNet,
    LayerSpec,
    Normalizer,
    TrainConfig,
    adam_step,
    backward,
    conv_output_size,
    forward,
    load_model,
    masked_loss,
    masked_rmse,
    output_shape,
    pad_input,
    parse_structure,
    save_model,
    structure_string,
    total_shrink,
    train_network,
)

from oracles import conv_forward_naive, fd_gradients

SWEEP_SHAPES = ["9-1-5", "9-3-5", "9-5-5", "9-3-3-5", "9-3-3-3-5"]


# ---------------------------------------------------------------- structure

def test_parse_structure_example():
    layers = parse_structure("9-1-5(64-32-1)")
    assert [(l.filter_size, l.stride, l.tiers_out) for l in layers] == [
        (9, 1, 64), (1, 1, 32), (5, 1, 1)
    ]


def test_structure_string_round_trip():
    for text in ["9-1-5(64-32-1)", "9(1)", "9-3-3-3-5(256-128-128-128-1)"]:
        assert structure_string(parse_structure(text)) == text


def test_parse_structure_rejects_count_mismatch():
    with pytest.raises(ValueError):
        parse_structure("9-1(4)")


def test_parse_structure_rejects_nonunit_final_tier():
    with pytest.raises(ValueError):
        parse_structure("9-5(4-2)")


def test_parse_structure_rejects_garbage():
    for text in ["abc", "9-1-5", "(64-32-1)", "9-1-5(64-32-1"]:
        with pytest.raises(ValueError):
            parse_structure(text)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(0)
    with pytest.raises(ValueError):
        LayerSpec(3, 0)
    with pytest.raises(ValueError):
        LayerSpec(3, 1, 0)


# ---------------------------------------------------------------- shape law

def test_conv_output_size_example():
    assert conv_output_size(11, 9, 1) == 3


def test_conv_output_size_unit_filter_preserves():
    for c in [1, 2, 17, 301]:
        assert conv_output_size(c, 1, 1) == c


def test_conv_output_size_stride():
    # floor((10 - 3) / 2) + 1
    assert conv_output_size(10, 3, 2) == 4


def test_conv_output_size_rejects_small_input():
    with pytest.raises(ValueError):
        conv_output_size(8, 9, 1)


def test_output_shape_chain():
    net = ConvNet.create(parse_structure("9-1-5(8-4-1)"))
    assert output_shape(net, (301, 169)) == (289, 157)
    assert total_shrink(net) == 12


def test_output_shape_reports_failing_layer():
    net = ConvNet.create(parse_structure("9-5(2-1)"))
    with pytest.raises(ValueError, match="layer 1"):
        output_shape(net, (12, 12))


def test_total_shrink_requires_unit_stride():
    net = ConvNet(
        [LayerSpec(3, 2, 1)],
        [np.zeros((3, 3, 2, 1))],
        [np.zeros(1)],
    )
    with pytest.raises(ValueError):
        total_shrink(net)


def test_shape_law_all_sweep_structures():
    # every structure in the default sweep shrinks by sum(f - 1) per side
    for shape in SWEEP_SHAPES:
        filters = [int(tok) for tok in shape.split("-")]
        tiers = "-".join(["4"] * (len(filters) - 1) + ["1"])
        net = ConvNet.create(parse_structure(f"{shape}({tiers})"))
        shrink = sum(f - 1 for f in filters)
        assert total_shrink(net) == shrink
        assert output_shape(net, (40, 33)) == (40 - shrink, 33 - shrink)


# ---------------------------------------------------------------- ConvNet

def test_create_shapes_and_zero_bias():
    net = ConvNet.create(parse_structure("9-1-5(8-4-1)"), seed=5)
    assert [w.shape for w in net.weights] == [
        (9, 9, 2, 8), (1, 1, 8, 4), (5, 5, 4, 1)
    ]
    assert all(np.array_equal(b, np.zeros(b.shape)) for b in net.biases)
    assert [b.shape for b in net.biases] == [(8,), (4,), (1,)]


def test_create_seed_determinism():
    a = ConvNet.create(parse_structure("5-3(3-1)"), seed=9)
    b = ConvNet.create(parse_structure("5-3(3-1)"), seed=9)
    c = ConvNet.create(parse_structure("5-3(3-1)"), seed=10)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert any(not np.array_equal(x, y) for x, y in zip(a.weights, c.weights))


def test_convnet_validates_weight_shapes():
    layers = parse_structure("3(1)")
    with pytest.raises(ValueError, match="layer 0"):
        ConvNet(layers, [np.zeros((3, 3, 1, 1))], [np.zeros(1)])
    with pytest.raises(ValueError, match="bias"):
        ConvNet(layers, [np.zeros((3, 3, 2, 1))], [np.zeros(2)])


def test_convnet_rejects_nonunit_final_tier():
    with pytest.raises(ValueError):
        ConvNet([LayerSpec(1, 1, 2)], [np.zeros((1, 1, 2, 2))], [np.zeros(2)])


def test_convnet_rejects_empty_stack():
    with pytest.raises(ValueError):
        ConvNet([], [], [])


# ---------------------------------------------------------------- forward

def test_forward_zero_weights_constant_bias():
    # all-zero weights with bias b >= 0 and a 1x1 filter give a constant b
    net = ConvNet([LayerSpec(1, 1, 1)], [np.zeros((1, 1, 2, 1))],
                  [np.array([0.7])])
    stack = np.random.default_rng(0).standard_normal((2, 6, 5))
    assert np.array_equal(forward(net, stack), np.full((6, 5), 0.7))


def test_forward_negative_bias_clipped_by_final_relu():
    w = [np.zeros((1, 1, 2, 1))]
    b = [np.array([-0.7])]
    stack = np.ones((2, 4, 4))
    clipped = ConvNet([LayerSpec(1, 1, 1)], w, b, final_relu=True)
    linear = ConvNet([LayerSpec(1, 1, 1)],
                     [a.copy() for a in w], [a.copy() for a in b],
                     final_relu=False)
    assert np.array_equal(forward(clipped, stack), np.zeros((4, 4)))
    assert np.allclose(forward(linear, stack), np.full((4, 4), -0.7))


def test_forward_single_linear_layer_closed_form():
    a, c, b = 1.3, -0.4, 0.2
    w = np.zeros((1, 1, 2, 1))
    w[0, 0, 0, 0], w[0, 0, 1, 0] = a, c
    net = ConvNet([LayerSpec(1, 1, 1)], [w], [np.array([b])],
                  final_relu=False)
    rng = np.random.default_rng(3)
    stack = rng.standard_normal((2, 7, 9))
    expect = a * stack[0] + c * stack[1] + b
    assert np.allclose(forward(net, stack), expect, atol=1e-12)


@pytest.mark.parametrize("final_relu", [True, False])
def test_forward_matches_nested_loop_oracle(final_relu):
    net = ConvNet.create(parse_structure("5-3-3(4-2-1)"), seed=2,
                         final_relu=final_relu)
    rng = np.random.default_rng(12)
    for b in net.biases:
        b += 0.3 * rng.standard_normal(b.shape)
    stack = rng.standard_normal((2, 14, 14))
    got = forward(net, stack)
    want = conv_forward_naive(stack, net.weights, net.biases,
                              [l.stride for l in net.layers], final_relu)
    assert got.shape == want.shape == (6, 6)
    assert np.allclose(got, want, atol=1e-10)


def test_forward_matches_oracle_with_stride():
    layers = [LayerSpec(3, 2, 3), LayerSpec(2, 1, 1)]
    net = ConvNet.create(layers, seed=4)
    rng = np.random.default_rng(8)
    for b in net.biases:
        b += 0.3 * rng.standard_normal(b.shape)
    stack = rng.standard_normal((2, 11, 11))
    got = forward(net, stack)
    want = conv_forward_naive(stack, net.weights, net.biases,
                              [l.stride for l in net.layers], True)
    assert got.shape == want.shape == (4, 4)
    assert np.allclose(got, want, atol=1e-10)


def test_forward_rejects_wrong_tier_count():
    net = ConvNet.create(parse_structure("3(1)"))
    with pytest.raises(ValueError):
        forward(net, np.zeros((3, 8, 8)))


def test_forward_rejects_undersized_input():
    net = ConvNet.create(parse_structure("9(1)"))
    with pytest.raises(ValueError, match="layer 0"):
        forward(net, np.zeros((2, 8, 8)))


# ---------------------------------------------------------------- loss

def test_masked_loss_zero_at_truth():
    truth = np.random.default_rng(0).standard_normal((5, 5))
    mask = np.ones((5, 5))
    assert masked_loss(truth, truth, mask) == 0.0


def test_masked_loss_single_cell():
    out = np.zeros((4, 4))
    truth = np.zeros((4, 4))
    truth[2, 1] = -3.0
    mask = np.zeros((4, 4))
    mask[2, 1] = 1.0
    assert masked_loss(out, truth, mask) == pytest.approx(9.0, abs=1e-12)


def test_masked_loss_matches_loop():
    rng = np.random.default_rng(17)
    out = rng.standard_normal((6, 7))
    truth = rng.standard_normal((6, 7))
    mask = (rng.random((6, 7)) < 0.5).astype(float)
    want = 0.0
    for i in range(6):
        for j in range(7):
            if mask[i, j] == 1.0:
                want += (out[i, j] - truth[i, j]) ** 2
    assert masked_loss(out, truth, mask) == pytest.approx(want, rel=1e-12)


def test_masked_loss_ignores_unlabeled_cells():
    rng = np.random.default_rng(2)
    truth = rng.standard_normal((5, 5))
    out = truth.copy()
    out[0, 0] += 100.0
    mask = np.ones((5, 5))
    mask[0, 0] = 0.0
    assert masked_loss(out, truth, mask) == 0.0


def test_masked_loss_shape_mismatch():
    with pytest.raises(ValueError):
        masked_loss(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))


def test_masked_rmse():
    out = np.zeros((2, 2))
    truth = np.array([[3.0, 4.0], [0.0, 0.0]])
    mask = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert masked_rmse(out, truth, mask) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        masked_rmse(out, truth, np.zeros((2, 2)))


# ---------------------------------------------------------------- backward

def _generic_point_net(structure, data_seed, net_seed, in_hw,
                       out_transform=None):
    """Net with randomized biases so no ReLU pre-activation sits at zero."""
    net = ConvNet.create(parse_structure(structure), seed=net_seed,
                         final_relu=True)
    rng = np.random.default_rng(data_seed)
    for b in net.biases:
        b += 0.3 * rng.standard_normal(b.shape)
    stack = rng.standard_normal((2, *in_hw))
    oh, ow = output_shape(net, in_hw)
    truth = rng.standard_normal((oh, ow))
    if out_transform is not None:
        truth = out_transform.denormalize(truth)
    mask = (rng.random((oh, ow)) < 0.6).astype(float)
    return net, stack, truth, mask


def _fd_worst_rel(net, stack, truth, mask, h, out_transform=None):
    an = backward(net, stack, truth, mask, out_transform=out_transform)
    fd = fd_gradients(
        net, stack, truth, mask, h=h,
        out_transform=out_transform.denormalize if out_transform else None,
    )
    worst = 0.0
    for a, f in zip([*an[0], *an[1]], fd):
        den = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-300)
        rel = np.abs(a - f) / den
        rel = np.where((np.abs(a) < 1e-6) & (np.abs(f) < 1e-6), 0.0, rel)
        worst = max(worst, float(rel.max()))
    return worst


def test_backward_zero_mask_zero_gradients():
    net, stack, truth, _ = _generic_point_net("5-3(3-1)", 0, 0, (12, 12))
    dws, dbs = backward(net, stack, truth, np.zeros_like(truth))
    assert all(np.array_equal(g, np.zeros(g.shape)) for g in dws)
    assert all(np.array_equal(g, np.zeros(g.shape)) for g in dbs)


def test_backward_single_linear_layer_closed_form():
    a, c, b = 0.9, -1.1, 0.25
    w = np.zeros((1, 1, 2, 1))
    w[0, 0, 0, 0], w[0, 0, 1, 0] = a, c
    net = ConvNet([LayerSpec(1, 1, 1)], [w], [np.array([b])],
                  final_relu=False)
    rng = np.random.default_rng(6)
    stack = rng.standard_normal((2, 5, 8))
    truth = rng.standard_normal((5, 8))
    mask = (rng.random((5, 8)) < 0.5).astype(float)
    out = a * stack[0] + c * stack[1] + b
    resid = 2.0 * (out - truth) * mask
    dws, dbs = backward(net, stack, truth, mask)
    assert dws[0][0, 0, 0, 0] == pytest.approx((resid * stack[0]).sum(), rel=1e-12)
    assert dws[0][0, 0, 1, 0] == pytest.approx((resid * stack[1]).sum(), rel=1e-12)
    assert dbs[0][0] == pytest.approx(resid.sum(), rel=1e-12)


def test_backward_matches_central_differences():
    # two-layer net at a generic point; h pinned at 1e-4
    net, stack, truth, mask = _generic_point_net("5-3(3-1)", 0, 0, (12, 12))
    assert _fd_worst_rel(net, stack, truth, mask, h=1e-4) < 1e-3


def test_backward_matches_differences_through_denormalizer():
    tr = Normalizer(-75.0, 9.5)
    net, stack, truth, mask = _generic_point_net("5-3(3-1)", 0, 0, (12, 12),
                                                 out_transform=tr)
    assert _fd_worst_rel(net, stack, truth, mask, h=1e-4,
                         out_transform=tr) < 1e-3


@pytest.mark.parametrize("shape,in_hw", [
    ("9-1-5", (18, 18)),
    ("9-3-5", (20, 20)),
    ("9-5-5", (22, 22)),
    ("9-3-3-5", (22, 22)),
    ("9-3-3-3-5", (24, 24)),
])
def test_gradient_check_across_sweep_layer_shapes(shape, in_hw):
    filters = shape.split("-")
    tiers = "-".join(["4"] + ["2"] * (len(filters) - 2) + ["1"])
    net, stack, truth, mask = _generic_point_net(
        f"{shape}({tiers})", 0, 0, in_hw
    )
    assert _fd_worst_rel(net, stack, truth, mask, h=1e-4) < 1e-3


# ---------------------------------------------------------------- padding

def test_pad_input_restores_output_shape():
    for text in ["9-1-5(8-4-1)", "9-3-3-3-5(4-2-2-2-1)"]:
        net = ConvNet.create(parse_structure(text))
        rng = np.random.default_rng(1)
        values = rng.standard_normal((21, 26))
        mask = (rng.random((21, 26)) < 0.5).astype(float)
        stack = pad_input(values, mask, net)
        shrink = total_shrink(net)
        assert stack.shape == (2, 21 + shrink, 26 + shrink)
        assert output_shape(net, stack.shape[1:]) == (21, 26)
        assert forward(net, stack).shape == (21, 26)


def test_pad_input_replicates_values_and_zeroes_mask():
    net = ConvNet.create(parse_structure("9-1-5(8-4-1)"))  # shrink 12, 6/6
    rng = np.random.default_rng(4)
    values = rng.standard_normal((10, 11))
    mask = np.ones((10, 11))
    stack = pad_input(values, mask, net)
    v, m = stack[0], stack[1]
    assert np.array_equal(v[6:16, 6:17], values)
    assert np.array_equal(m[6:16, 6:17], mask)
    # corner block replicates the corner value, edges replicate edge rows
    assert np.array_equal(v[:6, :6], np.full((6, 6), values[0, 0]))
    assert np.array_equal(v[16:, 17:], np.full((6, 6), values[-1, -1]))
    assert np.array_equal(v[:6, 6:17], np.tile(values[0], (6, 1)))
    assert m.sum() == mask.sum()
    assert np.array_equal(m[:6, :], np.zeros((6, 11 + 12)))


def test_pad_input_odd_shrink_splits_low():
    # single 2x2 filter shrinks by 1: no pad before, one cell after
    net = ConvNet([LayerSpec(2, 1, 1)], [np.zeros((2, 2, 2, 1))],
                  [np.zeros(1)])
    values = np.arange(12, dtype=float).reshape(3, 4)
    stack = pad_input(values, np.ones((3, 4)), net)
    assert stack.shape == (2, 4, 5)
    assert np.array_equal(stack[0][:3, :4], values)
    assert stack[0][3, 4] == values[-1, -1]


def test_pad_input_shape_mismatch():
    net = ConvNet.create(parse_structure("3(1)"))
    with pytest.raises(ValueError):
        pad_input(np.zeros((4, 4)), np.zeros((4, 5)), net)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    params = [np.array([1.5, -2.0]), np.array([[0.3]])]
    state = AdamState.create(params, lr=1e-2)
    adam_step(state, params, [np.zeros(2), np.zeros((1, 1))])
    assert np.array_equal(params[0], [1.5, -2.0])
    assert np.array_equal(params[1], [[0.3]])
    assert state.step == 1


def test_adam_first_step_magnitude_near_lr():
    # bias correction makes the first update lr * g / (|g| + eps)
    params = [np.array([0.0])]
    state = AdamState.create(params, lr=1e-3)
    adam_step(state, params, [np.array([0.37])])
    assert params[0][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_descends_quadratic_bowl():
    params = [np.array([3.0]), np.array([-2.0])]
    state = AdamState.create(params, lr=1e-3)
    losses = []
    for _ in range(100):
        losses.append(float(params[0][0] ** 2 + params[1][0] ** 2))
        grads = [2.0 * params[0], 2.0 * params[1]]
        adam_step(state, params, grads)
    losses.append(float(params[0][0] ** 2 + params[1][0] ** 2))
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert state.step == 100


def test_adam_state_mismatch_rejected():
    params = [np.zeros(3)]
    state = AdamState.create(params)
    with pytest.raises(ValueError):
        adam_step(state, params, [np.zeros(3), np.zeros(1)])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(log_every=0)


# ---------------------------------------------------------------- training

def _training_instance(seed=0):
    rng = np.random.default_rng(11)
    i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    truth = -60.0 - 0.8 * np.hypot(i - 8, j - 5)
    mask = (rng.random((16, 16)) < 0.55).astype(float)
    values = np.where(mask == 1, truth, 0.0)
    net = ConvNet.create(parse_structure("5-3(4-1)"), seed=seed)
    obs = values[mask == 1]
    net.normalizer = Normalizer(float(obs.min()), float(obs.std()))
    stack = pad_input(
        np.where(mask == 1, net.normalizer.normalize(values), 0.0), mask, net
    )
    return net, stack, truth, mask


def test_train_network_log_layout():
    net, stack, truth, mask = _training_instance()
    cfg = TrainConfig(iterations=6, lr=1e-3, log_every=2)
    log = train_network(net, stack, truth, mask, cfg)
    assert log.shape == (3, 2)
    assert np.array_equal(log[:, 0], [0.0, 2.0, 4.0])


def test_train_network_logs_before_update():
    net, stack, truth, mask = _training_instance()
    fresh = copy.deepcopy(net)
    log = train_network(net, stack, truth, mask,
                        TrainConfig(iterations=3, lr=1e-3))
    out0 = fresh.normalizer.denormalize(forward(fresh, stack))
    assert log[0, 1] == pytest.approx(masked_rmse(out0, truth, mask),
                                      rel=1e-12)


def test_train_network_reduces_label_rmse():
    net, stack, truth, mask = _training_instance()
    cfg = TrainConfig(iterations=120, lr=1e-2, log_every=20)
    log = train_network(net, stack, truth, mask, cfg)
    assert log[-1, 1] < 0.5 * log[0, 1]
    assert net.trained_shape == (16, 16)


def test_train_network_deterministic():
    runs = []
    for _ in range(2):
        net, stack, truth, mask = _training_instance()
        log = train_network(net, stack, truth, mask,
                            TrainConfig(iterations=40, lr=1e-2, log_every=10))
        runs.append((log, [w.copy() for w in net.weights]))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_train_network_rejects_empty_label_mask():
    net, stack, truth, _ = _training_instance()
    with pytest.raises(ValueError):
        train_network(net, stack, truth, np.zeros_like(truth),
                      TrainConfig(iterations=1))


def test_train_network_rejects_misaligned_truth():
    net, stack, truth, mask = _training_instance()
    with pytest.raises(ValueError, match="pad"):
        train_network(net, stack[:, :-1, :-1], truth, mask,
                      TrainConfig(iterations=1))


# ---------------------------------------------------------------- storage

def test_save_load_round_trip(tmp_path):
    net, stack, truth, mask = _training_instance(seed=3)
    train_network(net, stack, truth, mask, TrainConfig(iterations=5, lr=1e-3))
    path = tmp_path / "model.npz"
    save_model(path, net)
    back = load_model(path)
    assert back.layers == net.layers
    assert back.in_tiers == net.in_tiers
    assert back.final_relu == net.final_relu
    assert back.normalizer == net.normalizer
    assert back.trained_shape == net.trained_shape
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, net.weights))
    assert all(np.array_equal(a, b) for a, b in zip(back.biases, net.biases))
    assert np.array_equal(forward(back, stack), forward(net, stack))


def test_load_model_rejects_unknown_version(tmp_path):
    import json

    path = tmp_path / "model.npz"
    np.savez(path, meta=json.dumps({"version": 2}))
    with pytest.raises(ValueError, match="version"):
        load_model(path)


# ---------------------------------------------------------------- normalizer

def test_normalizer_round_trip():
    tr = Normalizer(-81.5, 7.25)
    x = np.random.default_rng(5).standard_normal(20) * 30 - 70
    assert np.allclose(tr.denormalize(tr.normalize(x)), x, atol=1e-12)


def test_normalizer_requires_positive_scale():
    with pytest.raises(ValueError):
        Normalizer(0.0, 0.0)
    with pytest.raises(ValueError):
        Normalizer(0.0, -1.0)
