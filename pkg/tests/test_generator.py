import math

import numpy as np
import pytest

from feddistill import generator as gen
from feddistill import model_core as mc
from feddistill.errors import ConfigError, InputError

from oracles import central_differences, relative_error, straight_line_forward

D_ARCH = mc.classifier_architecture(20, 5)


def trained_classifier(seed=0):
    """Small classifier fitted to five Gaussian blobs so its outputs are not uniform."""
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=3.0, size=(5, 20))
    y = np.repeat(np.arange(5), 40)
    X = means[y] + rng.normal(size=(200, 20))
    model = mc.init_model(D_ARCH, rng)
    model, _ = mc.train_epochs(model, X, y, model.partition.all_keys(), 5, mc.SGDConfig(0.05, 10), rng)
    return model, X


def test_zero_generator_outputs_zeros():
    G = mc.zero_model(mc.generator_architecture(16, 20))
    assert np.array_equal(gen.generate(G, gen.sample_noise(4, 16, 0)), np.zeros((4, 20)))


def test_generator_forward_matches_oracle():
    arch = mc.generator_architecture(16, 20)
    G = mc.init_model(arch, 1)
    R = gen.sample_noise(3, 16, 1)
    np.testing.assert_allclose(gen.generate(G, R), straight_line_forward(dict(G.params), arch.sizes, R.vectors), atol=1e-12)


def test_generate_rejects_wrong_noise_dimension():
    G = mc.init_model(mc.generator_architecture(16, 20), 0)
    with pytest.raises(InputError):
        gen.generate(G, np.zeros((3, 15)))


def test_pseudo_label_ties_go_to_lowest_index():
    D = mc.zero_model(D_ARCH)
    assert np.array_equal(gen.pseudo_labels(D, np.ones((3, 20))), [0, 0, 0])


def test_loss_oh_is_log_c_for_uniform_classifier():
    D = mc.zero_model(D_ARCH)
    assert gen.loss_oh(D, np.ones((4, 20))) == pytest.approx(math.log(5), abs=1e-12)


def test_loss_ms_closed_forms():
    ra, rb = np.zeros(4), np.array([3.0, 4.0, 0.0, 0.0])
    const = mc.zero_model(mc.Architecture((4, 4)))
    assert gen.loss_ms(const, ra, rb) == 0.0
    ident = mc.LayeredModel(mc.ParamSet({"layer0.weight": np.eye(4), "layer0.bias": np.zeros(4)}), mc.Architecture((4, 4)))
    assert gen.loss_ms(ident, ra, rb) == pytest.approx(-1.0, abs=1e-15)
    double = ident.with_params(ident.params.with_updates({"layer0.weight": 2 * np.eye(4)}))
    assert gen.loss_ms(double, ra, rb) == pytest.approx(-2.0, abs=1e-15)
    with pytest.raises(InputError):
        gen.loss_ms(ident, rb, rb)


def test_objective_terms_add_up():
    D, _ = trained_classifier()
    G = mc.init_model(mc.generator_architecture(16, 20), 2)
    R = gen.sample_noise(8, 16, 2).vectors
    total, parts, _ = gen.generator_objective(G, D, R, 0.7, with_grad=False)
    assert parts["loss_ms"] <= 0
    assert total == pytest.approx(parts["loss_oh"] + 0.7 * parts["loss_ms"], abs=1e-14)
    pairs = [gen.loss_ms(G, R[2 * k], R[2 * k + 1]) for k in range(4)]
    assert parts["loss_ms"] == pytest.approx(np.mean(pairs), abs=1e-13)


@pytest.mark.parametrize("start_layer", [0, 1])
def test_objective_gradient_matches_finite_differences(start_layer):
    D, _ = trained_classifier(3)
    out = D.arch.sizes[start_layer]
    G = mc.init_model(mc.generator_architecture(16, out, (8, 8)), 3)
    R = gen.sample_noise(6, 16, 3).vectors

    def f(params):
        return gen.generator_objective(G.with_params(mc.ParamSet(params)), D, R, 1.0, start_layer, with_grad=False)[0]

    _, _, grads = gen.generator_objective(G, D, R, 1.0, start_layer)
    numeric = central_differences(f, dict(G.params), list(G.params))
    for k in G.params:
        assert relative_error(grads[k], numeric[k]) < 1e-4, k


def test_training_is_deterministic():
    D, _ = trained_classifier()
    cfg = gen.GenTrainConfig(n=64, epochs=2)
    G1, b1, h1 = gen.train_generator(D, cfg, 7)
    G2, b2, h2 = gen.train_generator(D, cfg, 7)
    assert G1.params.bit_equal(G2.params)
    assert np.array_equal(b1.inputs, b2.inputs) and h1 == h2


def test_training_leaves_classifier_untouched():
    D, _ = trained_classifier()
    snapshot = D.params.digest()
    G, batch, _ = gen.train_generator(D, gen.GenTrainConfig(n=64, epochs=2), 0, client_id=3)
    assert D.params.digest() == snapshot
    assert batch.source_client_id == 3 and len(batch) == 64
    assert np.array_equal(batch.pseudo_labels, gen.pseudo_labels(D, batch.inputs))


def test_generator_objective_falls_during_training():
    D, _ = trained_classifier()
    cfg = gen.GenTrainConfig()
    held_out = gen.sample_noise(256, cfg.noise_dim, 12345)
    before = gen.evaluate_objective(gen.init_generator(D, cfg, gen._child(0, 0)), D, held_out, cfg.lam)
    G, _, info = gen.train_generator(D, cfg, 0)
    after = gen.evaluate_objective(G, D, held_out, cfg.lam)
    assert after < before
    assert info["epoch_loss"][-1] < info["epoch_loss"][0]


def test_synthetic_outputs_are_more_confident_than_noise():
    D, _ = trained_classifier()
    _, batch, _ = gen.train_generator(D, gen.GenTrainConfig(), 0)
    noise = gen.random_batch(D, 1000, 0)
    assert gen.mean_max_confidence(D, batch.inputs) > gen.mean_max_confidence(D, noise.inputs)


def test_mode_seeking_term_increases_diversity():
    D, _ = trained_classifier()
    wins = 0
    for seed in range(3):
        _, with_ms, _ = gen.train_generator(D, gen.GenTrainConfig(n=200, lam=1.0), seed)
        _, without, _ = gen.train_generator(D, gen.GenTrainConfig(n=200, lam=0.0), seed)
        wins += gen.mean_pairwise_distance(with_ms.inputs) > gen.mean_pairwise_distance(without.inputs)
    assert wins == 3


def test_feature_space_injection():
    D, _ = trained_classifier()
    cfg = gen.GenTrainConfig(n=64, epochs=1, inject_layer=1)
    G, batch, _ = gen.train_generator(D, cfg, 0)
    assert G.arch.output_dim == D.arch.sizes[1]
    assert batch.layer == 1 and batch.inputs.shape == (64, 64)
    with pytest.raises(ConfigError):
        gen.train_generator(D, gen.GenTrainConfig(n=64, inject_layer=3), 0)


def test_mean_pairwise_distance_oracle():
    X = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 4.0]])
    assert gen.mean_pairwise_distance(X) == pytest.approx((5 + 4 + 3) / 3)


@pytest.mark.parametrize(
    "kwargs", [{"n": 1}, {"epochs": 0}, {"lam": -1}, {"learning_rate": 0}, {"batch_size": 1}, {"distance": "cosine"}]
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        gen.GenTrainConfig(**kwargs)
