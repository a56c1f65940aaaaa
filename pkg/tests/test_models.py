import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wstrack.convlstm import ConvLSTMState
from wstrack.models import (
    BASELINES, CL_VARIANTS, NUM_CLASSES, TOOL_NAMES, VARIANTS, Model, ModelConfig, WildcatConfig,
    compute_class_weights, load_checkpoint, multimap_reduce, multimap_reduce_backward, patch_mask,
    presence_from_logits, save_checkpoint, weighted_bce_loss, wildcat_backward, wildcat_pool,
)
from wstrack.nn import BackboneConfig, Conv2d, ResidualBlock
from wstrack.tensor import Parameter, ShapeError, grad_check, make_rng

TINY = BackboneConfig(stages=[(1, 4, 2), (1, 6, 1), (1, 6, 1)], stem_channels=4)


def tiny(variant, **kw):
    return ModelConfig(variant, backbone=TINY, multimap_m=2, **kw)


def test_seven_tool_classes():
    assert NUM_CLASSES == 7 and len(TOOL_NAMES) == 7
    assert set(BASELINES) | set(CL_VARIANTS) == set(VARIANTS)


def test_backbone_keeps_last_two_strides_at_one():
    with pytest.raises(ValueError):
        BackboneConfig(stages=[(1, 4, 2), (1, 4, 2), (1, 4, 1)])
    assert BackboneConfig().output_stride == 4


def test_baseline_maps_have_seven_channels():
    model = Model(tiny("R+C_M1"))
    maps, logits, state = model.forward(make_rng(0).standard_normal((1, 3, 16, 16)))
    assert maps.shape == (1, 7, 8, 8) and logits.shape == (1, 7) and state is None


def test_masked_variants_differ_only_in_augmentation():
    a, b = tiny("R+C_M4"), tiny("R+C_M4_mask")
    assert (a.m, a.cl_placement) == (b.m, b.cl_placement) and b.masked and not a.masked
    x = make_rng(1).standard_normal((2, 3, 16, 16))
    np.testing.assert_array_equal(Model(a, 3).forward(x)[1], Model(b, 3).forward(x)[1])


def test_state_on_baseline_rejected():
    model = Model(tiny("R+C_M1_mask"))
    with pytest.raises(ValueError, match="no ConvLSTM"):
        model.forward(np.zeros((1, 3, 16, 16)), ConvLSTMState.zeros(1, 7, 8, 8))


def test_map_kinds():
    assert tiny("R+C+CL").map_kind == tiny("R+CL").map_kind == "spatio-temporal"
    assert tiny("R+CL+C").map_kind == tiny("R+C_M4").map_kind == "spatial"


def test_cl_variant_shapes_agree():
    x = make_rng(2).standard_normal((5, 3, 16, 20))
    shapes = set()
    for v in ("R+CL+C", "R+C+CL", "R+CL"):
        maps, logits, state = Model(tiny(v)).forward(x)
        shapes.add((maps.shape, logits.shape))
        assert state is not None
    assert shapes == {((5, 7, 8, 10), (5, 7))}
    assert Model(tiny("R+CL+C")).map_size(16, 20) == (8, 10)


def test_zero_convlstm_weights_add_a_half_scaled_tanh_map():
    model = Model(tiny("R+C+CL"))
    for p in model.cl.parameters():
        p.value[...] = 0
    x = make_rng(3).standard_normal((2, 3, 16, 16))
    c0 = make_rng(4).standard_normal((1, 7, 8, 8))
    maps, _, _ = model.forward(x, ConvLSTMState(np.zeros_like(c0), c0))
    head = multimap_reduce(model.head.forward(model.backbone.forward(x)), 1)
    np.testing.assert_allclose(maps[0], head[0] + 0.5 * np.tanh(0.5 * c0[0]), rtol=0, atol=1e-15)
    np.testing.assert_allclose(maps[1], head[1] + 0.5 * np.tanh(0.25 * c0[0]), rtol=0, atol=1e-15)


def test_wildcat_examples():
    ch = np.array([[0.0, 5.0, 1.0], [2.0, -3.0, 0.5], [1.0, 1.0, 1.0]])[None, None]
    assert wildcat_pool(ch, WildcatConfig(1, 1, 0.0))[0][0, 0] == 5.0
    assert wildcat_pool(ch, WildcatConfig(1, 1, 0.6))[0][0, 0] == pytest.approx(3.2, abs=1e-15)
    const = np.full((1, 1, 3, 3), 1.25)
    assert wildcat_pool(const, WildcatConfig(2, 3, 0.6))[0][0, 0] == pytest.approx(1.25 * 1.6, abs=1e-15)
    with pytest.raises(ValueError):
        wildcat_pool(np.zeros((1, 1, 2, 2)), WildcatConfig(3, 2, 0.5))


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.floats(0, 1), st.floats(0, 5))
def test_wildcat_is_monotone(seed, kp, km, alpha, bump):
    rng = make_rng(seed)
    maps = rng.standard_normal((1, 2, 3, 3))
    cfg = WildcatConfig(kp, km, alpha)
    before = wildcat_pool(maps, cfg)[0]
    raised = maps.copy()
    raised[0, 1, rng.integers(3), rng.integers(3)] += bump
    after = wildcat_pool(raised, cfg)[0]
    assert after[0, 1] >= before[0, 1] and after[0, 0] == before[0, 0]


def test_multimap_examples_and_loop_oracle():
    x = make_rng(5).standard_normal((2, 12, 3, 4))
    assert multimap_reduce(x, 1) is x
    g = np.zeros((1, 4, 1, 1))
    g[0, :, 0, 0] = [1, 2, 3, 4]
    assert multimap_reduce(g, 4)[0, 0, 0, 0] == 2.5
    out = multimap_reduce(x, 4)
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(4):
                    assert out[n, c, i, j] == pytest.approx(sum(x[n, c * 4 + k, i, j] for k in range(4)) / 4, abs=1e-15)
    with pytest.raises(ShapeError):
        multimap_reduce(x, 5)


def test_presence_from_logits():
    probs, present = presence_from_logits(np.array([0.0, -4.0]))
    assert probs[0] == 0.5 and present[0]
    assert probs[1] == pytest.approx(0.018, abs=1e-3) and not present[1]
    assert presence_from_logits(np.full(7, 10.0))[1].all()


@given(st.lists(st.floats(-50, 50), min_size=7, max_size=7))
def test_presence_depends_only_on_sign(z):
    z = np.array(z)
    assert np.array_equal(presence_from_logits(z)[1], presence_from_logits(np.sign(z) * 3.0)[1] | (z == 0))


def test_bce_examples():
    one = np.ones(1)
    assert weighted_bce_loss(np.array([[0.0]]), np.array([[1]]), one)[0] == pytest.approx(math.log(2), abs=1e-15)
    tiny_loss = weighted_bce_loss(np.array([[-50.0]]), np.array([[0]]), one)[0]
    assert 0 <= tiny_loss < 1e-20
    assert weighted_bce_loss(np.array([[0.0]]), np.array([[1]]), 2 * one)[0] == pytest.approx(1.386294, abs=1e-6)
    assert np.isfinite(weighted_bce_loss(np.array([[800.0, -800.0]]), np.array([[0, 1]]), np.ones(2))[0])
    with pytest.raises(ValueError):
        weighted_bce_loss(np.zeros((1, 2)), np.array([[0, 2]]), np.ones(2))


def test_zero_weights_on_positive_only_data_give_zero_loss():
    # the weight scales only the positive term, so W = 0 silences positive labels
    z = make_rng(6).standard_normal((4, 7)) * 5
    loss, d = weighted_bce_loss(z, np.ones((4, 7), int), np.zeros(7))
    assert loss == 0.0 and not d.any()


def test_bce_gradient():
    rng = make_rng(7)
    z = Parameter(rng.standard_normal((5, 7)) * 3, "z")
    y = rng.random((5, 7)) < 0.4
    w = rng.random(7) * 3

    def loss():
        val, d = weighted_bce_loss(z.value, y, w)
        z.grad[...] = d
        return val

    assert grad_check(loss, [z]) <= 1e-4


def test_class_weights():
    freqs = [10, 20, 40, 40, 40, 80, 160]
    labels = np.zeros((160, 7), int)
    for c, f in enumerate(freqs):
        labels[:f, c] = 1
    cw = compute_class_weights(labels)
    assert list(cw.w) == [4, 2, 1, 1, 1, 0.5, 0.25] and cw.median_freq == 40
    assert list(compute_class_weights(np.ones((5, 7))).w) == [1.0] * 7
    labels[:, 3] = 0
    with pytest.raises(ValueError, match="Scissors"):
        compute_class_weights(labels)


@given(st.lists(st.integers(1, 500), min_size=7, max_size=7))
def test_class_weight_law(freqs):
    labels = np.zeros((max(freqs), 7), int)
    for c, f in enumerate(freqs):
        labels[:f, c] = 1
    cw = compute_class_weights(labels)
    med = float(np.median(freqs))
    assert list(cw.w) == [med / f for f in freqs]
    rare, common = cw.w[int(np.argmin(freqs))], cw.w[int(np.argmax(freqs))]
    assert rare >= 1.0 >= common
    if min(freqs) < med:
        assert rare > 1.0
    if max(freqs) > med:
        assert common < 1.0


def test_patch_mask():
    rng = make_rng(8)
    x = rng.standard_normal((3, 32, 48))
    np.testing.assert_array_equal(patch_mask(x, rng, p=0.0), x)
    full = patch_mask(x, rng, p=1.0, fill=[1.0, 2.0, 3.0])
    assert np.all(full[0] == 1.0) and np.all(full[2] == 3.0)
    with pytest.raises(ValueError):
        patch_mask(x, rng, patch=64)


def test_patch_mask_rate_concentrates():
    x = np.ones((1, 1, 1600, 1600))  # 100 x 100 = 10,000 patches
    out = patch_mask(x, make_rng(9), patch=16, p=0.5, fill=0.0)
    frac = 1.0 - out.mean()
    assert abs(frac - 0.5) <= 0.02


def test_layer_gradients():
    rng = make_rng(10)
    for layer, shape in ((Conv2d(3, 4, 3, rng, stride=2), (2, 3, 7, 7)), (ResidualBlock(3, 5, 2, rng, "b"), (2, 3, 6, 6)),
                         (ResidualBlock(4, 4, 1, rng, "c"), (1, 4, 5, 5))):
        x = Parameter(rng.standard_normal(shape), "x")
        proj = rng.standard_normal(layer.forward(x.value).shape)

        def loss():
            for p in layer.parameters():
                p.zero_grad()
            out = layer.forward(x.value)
            x.grad[...] = layer.backward(proj)
            return float(np.sum(proj * out))

        assert grad_check(loss, layer.parameters() + [x]) <= 1e-4


def test_wildcat_and_multimap_gradients():
    rng = make_rng(11)
    maps = Parameter(rng.standard_normal((2, 8, 3, 4)), "maps")
    cfg = WildcatConfig(2, 3, 0.6)
    proj = rng.standard_normal((2, 4))

    def loss():
        red = multimap_reduce(maps.value, 2)
        s, cache = wildcat_pool(red, cfg)
        maps.grad[...] = multimap_reduce_backward(wildcat_backward(proj, cache), 2)
        return float(np.sum(proj * s))

    assert grad_check(loss, [maps]) <= 1e-4


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_full_variant_gradients(variant):
    model = Model(tiny(variant, pooling=WildcatConfig(2, 2, 0.6)), seed=12)
    rng = make_rng(13)
    x = rng.standard_normal((3, 3, 8, 8))
    y = rng.random((3, 7)) < 0.5
    w = rng.random(7) + 0.5
    init = None
    if model.cl is not None:
        init = ConvLSTMState(np.tanh(rng.standard_normal((1, model.cl.hidden_c, 4, 4))),
                             rng.standard_normal((1, model.cl.hidden_c, 4, 4)))

    pattern = [None]

    def loss():
        model.zero_grad()
        _, logits, _ = model.forward(x, init)
        pattern[0] = model.activation_pattern()
        val, d = weighted_bce_loss(logits, y, w)
        model.backward(d)
        return val

    stats = {}
    params = model.parameters()
    err = grad_check(loss, params, max_coords=24, rng=make_rng(17),
                     region=lambda: pattern[0], stats=stats)
    assert err <= 1e-4
    # stencils that cannot avoid a ReLU or top-k switch are skipped; every
    # tensor must still be covered and nearly all coordinates checked
    assert all(stats["per_param"].get(p.name, 0) >= 1 for p in params)
    assert stats["skipped"] <= 0.1 * (stats["checked"] + stats["skipped"])


def test_frozen_backbone_receives_no_update_path():
    model = Model(tiny("R+CL+C"))
    model.freeze_backbone()
    assert all(p.group != "backbone" for p in model.trainable_parameters())
    model.zero_grad()
    _, logits, _ = model.forward(make_rng(14).standard_normal((2, 3, 8, 8)))
    model.backward(np.ones_like(logits))
    assert all(not p.grad.any() for p in model.backbone.parameters())


def test_checkpoint_round_trip(tmp_path):
    model = Model(tiny("R+CL+C"), seed=15)
    save_checkpoint(model, tmp_path / "ck", seed=15, epoch=3, extra={"pixel_mean": [1.0, 2.0, 3.0]})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["variant"] == "R+CL+C" and manifest["epoch"] == 3
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.value.tobytes() == b.value.tobytes()
    x = make_rng(16).standard_normal((2, 3, 8, 8))
    np.testing.assert_array_equal(model.forward(x)[1], loaded.forward(x)[1])
