import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diresa import nn
from diresa.errors import ConfigError, DimensionError
from diresa.models import (ModelParams, ModelSpec, build_model, count_params, decode, distance_layer, encode,
                           forward, lorenz_spec, spec_from_method)

from oracles.gradcheck import VARIANT_SPECS, model_gradient_error


def test_lorenz_ae_parameter_count():
    expected = (3 * 40 + 40) + (40 * 20 + 20) + (20 * 2 + 2) + (2 * 20 + 20) + (20 * 40 + 40) + (40 * 3 + 3)
    assert expected == 2045
    assert count_params(lorenz_spec("AE")) == expected
    assert build_model(lorenz_spec("AE")).n_params == expected
    assert count_params(lorenz_spec("DIRESA", "mse")) == expected  # the twin adds no weights
    # BNAE adds gamma/beta; VAE adds a second latent head
    assert count_params(lorenz_spec("BNAE")) == expected + 4
    assert count_params(lorenz_spec("VAE")) == expected + 42


def test_build_is_deterministic():
    a = build_model(lorenz_spec("DIRESA", "mse"), seed=9)
    b = build_model(lorenz_spec("DIRESA", "mse"), seed=9)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert build_model(lorenz_spec("AE"), 1).theta.tobytes() != build_model(lorenz_spec("AE"), 2).theta.tobytes()


def test_topology_activations():
    p = build_model(lorenz_spec("AE"))
    assert [(l.n_in, l.n_out, l.activation) for l in p.encoder] == [(3, 40, "relu"), (40, 20, "relu"),
                                                                     (20, 2, "linear")]
    assert [(l.n_in, l.n_out, l.activation) for l in p.decoder] == [(2, 20, "relu"), (20, 40, "relu"),
                                                                     (40, 3, "linear")]
    bn = build_model(lorenz_spec("BNAE"))
    assert isinstance(bn.encoder[-1], nn.BatchNormLayer)


def test_weights_are_views_into_theta():
    p = build_model(lorenz_spec("DIRESA", "mse"))
    assert p.twin_encoder is p.encoder
    for layer in p.trainable_layers():
        for arr in layer.params():
            assert np.shares_memory(arr, p.theta)
    p.theta[:] = 0.25
    assert (p.twin_encoder[0].weights == 0.25).all()


@pytest.mark.parametrize("kw", [dict(variant="XX"), dict(variant="AE", latent_dim=3),
                                dict(variant="AE", hidden_widths=()), dict(variant="DIRESA"),
                                dict(variant="AE", distance_loss="mse"),
                                dict(variant="DIRESA", distance_loss="l1")])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        ModelSpec(**kw)


def test_spec_from_method_names():
    assert spec_from_method("DIRESA_MSE").distance_loss == "mse"
    assert spec_from_method("DIRESA_LogCorr").name == "DIRESA_LogCorr"
    assert spec_from_method("bnae").variant == "BNAE"
    s = lorenz_spec("DIRESA", "corr")
    assert ModelSpec.from_dict(s.to_dict()) == s


def test_identity_chain_forward():
    spec = ModelSpec("AE", input_dim=2, hidden_widths=(1,), latent_dim=1)
    p = build_model(spec)
    p.theta[...] = 0.0
    # encoder 2->1 (relu) ->1 (linear); decoder 1->1 (relu) ->2 (linear)
    p.encoder[0].weights[...] = [[1.0, 0.0]]
    p.encoder[1].weights[...] = [[1.0]]
    p.decoder[0].weights[...] = [[1.0]]
    p.decoder[1].weights[...] = [[1.0], [0.0]]
    out = forward(p, np.array([[0.3, 0.0]]), mode="infer")
    assert np.array_equal(out.reconstruction, [[0.3, 0.0]])


def test_vae_infer_uses_mean_and_is_deterministic():
    p = build_model(lorenz_spec("VAE"), 3)
    x = np.random.default_rng(0).uniform(size=(7, 3))
    b = forward(p, x, mode="infer")
    assert np.array_equal(b.vae_sample, b.vae_mean)
    assert np.array_equal(encode(p, x), encode(p, x))
    assert np.array_equal(encode(p, x), b.vae_mean)
    with pytest.raises(ValueError):
        forward(p, x, mode="train")


def test_vae_sampling_statistics():
    p = build_model(lorenz_spec("VAE"), 4)
    x = np.tile(np.array([[0.2, 0.5, 0.7]]), (100_000, 1))
    b = forward(p, x, rng=np.random.default_rng(0), mode="train")
    mean, std = b.vae_mean[0], np.exp(0.5 * b.vae_logvar[0])
    np.testing.assert_allclose(b.vae_sample.mean(axis=0), mean, atol=0.02 * std.max())
    np.testing.assert_allclose(b.vae_sample.std(axis=0), std, rtol=0.02)


def test_diresa_forward_matches_two_encoder_passes():
    p = build_model(lorenz_spec("DIRESA", "mse"), 5)
    rng = np.random.default_rng(1)
    x, t = rng.uniform(size=(9, 3)), rng.uniform(size=(9, 3))
    b = forward(p, x, t, mode="infer")
    assert np.array_equal(b.latent, encode(p, x))
    assert np.array_equal(b.twin_latent, encode(p, t))
    assert (b.d_x >= 0).all() and (b.d_z >= 0).all()
    with pytest.raises(ValueError):
        forward(p, x, None)


def test_encode_batch_consistency_and_shapes():
    p = build_model(lorenz_spec("AE"), 2)
    x = np.random.default_rng(2).uniform(size=(5, 3))
    np.testing.assert_allclose(encode(p, x[2:3]), encode(p, x)[2:3], rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        encode(p, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        decode(p, np.zeros((2, 3)))


def test_distance_layer_examples():
    assert distance_layer(np.ones((2, 3)), np.ones((2, 3))).tolist() == [0.0, 0.0]
    assert distance_layer(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))[0] == 5.0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    d = distance_layer(a, b)
    for i in range(4):
        assert abs(d[i] - math.sqrt(sum((a[i, k] - b[i, k]) ** 2 for k in range(5)))) < 1e-12
    with pytest.raises(DimensionError):
        distance_layer(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2 ** 31))
@settings(max_examples=50)
def test_distance_layer_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(6, 3)) for _ in range(3))
    ab, ba = distance_layer(a, b), distance_layer(b, a)
    assert np.array_equal(ab, ba) and (ab >= 0).all()
    assert (distance_layer(a, c) <= ab + distance_layer(b, c) + 1e-12).all()


def test_copy_is_independent():
    p = build_model(lorenz_spec("BNAE"), 1)
    q = p.copy()
    assert isinstance(q, ModelParams) and q.theta.tobytes() == p.theta.tobytes()
    q.theta[0] += 1
    assert q.theta[0] != p.theta[0]


@pytest.mark.parametrize("spec", VARIANT_SPECS, ids=lambda s: s.name)
def test_end_to_end_gradients(spec):
    for draw in range(5):
        assert model_gradient_error(spec, draw) < 1e-4
