import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddistill import model_core as mc
from feddistill.errors import ConfigError, InputError

from oracles import ce_direct, kl_direct, straight_line_forward

ARCH = mc.classifier_architecture(20, 5)


def random_model(seed=0, arch=ARCH):
    return mc.init_model(arch, seed)


# forward


def test_zero_model_gives_zero_logits():
    model = mc.zero_model(ARCH)
    x = np.random.default_rng(0).normal(size=(7, 20))
    assert np.array_equal(mc.forward(model, x), np.zeros((7, 5)))


def test_single_layer_identity_case_returns_weight_column():
    arch = mc.Architecture((4, 3))
    W = np.arange(12.0).reshape(3, 4)
    model = mc.LayeredModel(mc.ParamSet({"layer0.weight": W, "layer0.bias": np.zeros(3)}), arch)
    e1 = np.array([[1.0, 0, 0, 0]])
    assert np.array_equal(mc.forward(model, e1)[0], W[:, 0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_straight_line_recomputation(seed):
    model = random_model(seed)
    x = np.random.default_rng(seed + 100).normal(size=(3, 20))
    expected = straight_line_forward(dict(model.params), ARCH.sizes, x)
    np.testing.assert_allclose(mc.forward(model, x), expected, rtol=1e-12, atol=1e-12)


def test_forward_rejects_wrong_dimension():
    with pytest.raises(ConfigError):
        mc.forward(random_model(), np.zeros((2, 19)))


def test_forward_preserves_batch_order():
    model = random_model(3)
    x = np.random.default_rng(3).normal(size=(6, 20))
    full = mc.forward(model, x)
    rows = np.vstack([mc.forward(model, x[i : i + 1]) for i in range(6)])
    np.testing.assert_allclose(full, rows, rtol=0, atol=1e-14)


def test_composition_is_exact():
    model = random_model(4)
    x = np.random.default_rng(4).normal(size=(9, 20))
    feats = mc.representation(model, x)
    assert np.array_equal(mc.forward(model, x), mc.head_forward(model, feats))


def test_head_replacement_never_changes_representation():
    a, b = random_model(5), random_model(6)
    x = np.random.default_rng(5).normal(size=(4, 20))
    swapped = a.with_params(a.params.with_updates(dict(b.head)))
    assert np.array_equal(mc.representation(a, x), mc.representation(swapped, x))
    rep_swapped = a.with_params(mc.replace_representation(a.params, b.params, a.partition))
    assert not np.array_equal(mc.representation(a, x), mc.representation(rep_swapped, x))


# losses


@pytest.mark.parametrize("C", [2, 5, 10])
def test_cross_entropy_uniform_logits_is_log_c(C):
    assert abs(mc.cross_entropy(np.zeros((3, C)), np.arange(3) % C) - math.log(C)) < 1e-9


def test_cross_entropy_uniform_ten_classes_value():
    assert mc.cross_entropy(np.zeros((1, 10)), [4]) == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_saturated_is_zero():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1e6
    assert mc.cross_entropy(logits, [1, 2]) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_two_class_case_matches_direct_formula():
    assert mc.cross_entropy(np.array([[1.0, 0.0]]), [0]) == pytest.approx(ce_direct([[1.0, 0.0]], [0]), rel=1e-14)
    # -log(e / (e + 1))
    assert mc.cross_entropy(np.array([[1.0, 0.0]]), [0]) == pytest.approx(0.31326168751822286, rel=1e-14)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(InputError):
        mc.cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(InputError):
        mc.cross_entropy(np.zeros((1, 3)), [-1])


def test_kl_identity_is_zero():
    z = np.random.default_rng(0).normal(size=(5, 4))
    assert mc.kl_divergence(z, z) < 1e-12


def test_kl_two_class_case_matches_direct_formula():
    p, q = np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]])
    assert mc.kl_divergence(p, q) == pytest.approx(kl_direct(p, q), rel=1e-12)
    # (2 p0 - 1) * log(p0 / p1) = (2 p0 - 1) * 2 with p0 = sigmoid(2)
    s = 1 / (1 + math.exp(-2))
    assert mc.kl_divergence(p, q) == pytest.approx((2 * s - 1) * 2, rel=1e-12)


def test_kl_rejects_shape_mismatch():
    with pytest.raises(InputError):
        mc.kl_divergence(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.floats(0.1, 20))
def test_kl_is_non_negative(seed, C, scale):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(scale=scale, size=(3, C)), rng.normal(scale=scale, size=(3, C))
    assert mc.kl_divergence(p, q) >= 0
    assert mc.kl_divergence(p, p) < 1e-9


# backward / sgd


def test_backward_returns_exactly_trainable_keys():
    model = random_model(1)
    x = np.random.default_rng(1).normal(size=(4, 20))
    _, grads = mc.backward(model, x, mc.ce_loss(np.array([0, 1, 2, 3])), model.partition.classification_keys)
    assert set(grads) == set(model.partition.classification_keys)


def test_backward_rejects_empty_trainable_set():
    with pytest.raises(InputError):
        mc.backward(random_model(), np.zeros((1, 20)), mc.ce_loss(np.array([0])), set())


def test_gradient_of_unused_parameter_is_zero():
    # zero head weights: the loss ignores every representation parameter
    model = random_model(2)
    model = model.with_params(model.params.with_updates({"layer2.weight": np.zeros((5, 32))}))
    x = np.random.default_rng(2).normal(size=(4, 20))
    _, grads = mc.backward(model, x, mc.ce_loss(np.array([0, 1, 2, 3])), model.partition.representation_keys)
    for g in grads.values():
        assert np.array_equal(g, np.zeros_like(g))


def test_sgd_step_arithmetic():
    p = mc.ParamSet({"w": np.array([2.0]), "v": np.array([7.0])})
    out = mc.sgd_step(p, {"w": np.array([0.5])}, 1.0)
    assert out["w"][0] == 1.5
    assert out["v"] is not p["v"] and np.array_equal(out["v"], p["v"])


def test_sgd_step_zero_gradient_is_identity():
    model = random_model(3)
    zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
    assert mc.sgd_step(model.params, zeros, 0.1).bit_equal(model.params)


def test_sgd_two_steps_equal_one_step_with_summed_gradient():
    model = random_model(4)
    rng = np.random.default_rng(4)
    g = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
    two = mc.sgd_step(mc.sgd_step(model.params, g, 0.05), g, 0.05)
    one = mc.sgd_step(model.params, {k: 2 * v for k, v in g.items()}, 0.05)
    for k in model.params:
        np.testing.assert_allclose(two[k], one[k], rtol=0, atol=1e-14)


@pytest.mark.parametrize("lr", [0.0, -0.1])
def test_sgd_step_rejects_non_positive_lr(lr):
    with pytest.raises(ConfigError):
        mc.sgd_step(random_model().params, {}, lr)


# representation replacement


def test_replace_representation_identity_and_involution():
    a, b = random_model(7), random_model(8)
    part = a.partition
    assert mc.replace_representation(a.params, a.params, part).bit_equal(a.params)
    swapped = mc.replace_representation(a.params, b.params, part)
    back = mc.replace_representation(swapped, a.params, part)
    assert back.bit_equal(a.params)


def test_replace_representation_provenance():
    a, b = random_model(9), random_model(10)
    out = mc.replace_representation(a.params, b.params, a.partition)
    for k in a.partition.representation_keys:
        assert np.array_equal(out[k], b.params[k])
    for k in a.partition.classification_keys:
        assert np.array_equal(out[k], a.params[k])


def test_replace_representation_rejects_mismatch():
    other = mc.init_model(mc.classifier_architecture(10, 5), 0)
    with pytest.raises(InputError):
        mc.replace_representation(random_model().params, other.params, random_model().partition)


def test_partition_is_disjoint_cover_with_head_as_last_layer():
    part = mc.LayerPartition.for_architecture(ARCH)
    assert part.representation_keys.isdisjoint(part.classification_keys)
    assert part.all_keys() == set(random_model().params)
    assert part.classification_keys == {"layer2.weight", "layer2.bias"}


# ParamSet algebra


def test_mean_of_identical_paramsets_is_bit_exact():
    p = random_model(11).params
    for k in range(1, 12):
        assert mc.mean_params([p] * k).bit_equal(p)


def test_linear_combination_matches_manual():
    a, b = random_model(12).params, random_model(13).params
    out = mc.linear_combination([a, b], [0.25, 0.75])
    for k in a:
        np.testing.assert_allclose(out[k], 0.25 * a[k] + 0.75 * b[k], rtol=0, atol=1e-15)


# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = random_model(14)
    path = tmp_path / "m.ckpt"
    mc.save_checkpoint(model, path)
    loaded = mc.load_checkpoint(path)
    assert loaded.arch == model.arch
    assert loaded.params.bit_equal(model.params)
    assert list(loaded.params) == list(model.params)


def test_checkpoint_payload_is_little_endian_float64(tmp_path):
    import io
    import zipfile

    model = random_model(15)
    path = tmp_path / "m.ckpt"
    mc.save_checkpoint(model, path)
    with zipfile.ZipFile(path) as zf:
        arr = np.lib.format.read_array(io.BytesIO(zf.read("layer0.weight.npy")))
        assert arr.dtype == np.dtype("<f8")
        assert "__architecture__.json" in zf.namelist()
