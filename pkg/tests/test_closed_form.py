import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv.closed_form import EPS_DIV, DegenerateGradientError, demix_cnn_single, recon_single_mlp
from gradinv.models import CnnConfig, GradientBundle, MlpConfig, batch_gradient, cnn_forward, init_params


def test_zero_input_reconstructs_zero():
    cfg = MlpConfig((20, 3, 4))
    v = batch_gradient(cfg, init_params(cfg, seed=0), np.zeros(20), [1])
    np.testing.assert_array_equal(recon_single_mlp(v), np.zeros(20))


def test_image_through_single_unit_mlp(rng):
    x = rng.uniform(size=(3, 32, 32))
    cfg = MlpConfig((3072, 1, 10))
    v = batch_gradient(cfg, init_params(cfg, seed=1), x.reshape(-1), [4])
    x_hat = recon_single_mlp(v, shape=x.shape)
    assert np.mean(np.abs(x_hat - x)) < 1e-8


def test_deep_mlp_uses_first_layer_only(rng):
    cfg = MlpConfig((50, 8, 6, 5, 3))
    x = rng.uniform(size=50)
    v = batch_gradient(cfg, init_params(cfg, seed=2), x, [0])
    np.testing.assert_allclose(recon_single_mlp(v), x, atol=1e-8)
    # deeper tensors are irrelevant
    v.tensors[2:] = [np.full_like(t, np.nan) for t in v.tensors[2:]]
    np.testing.assert_allclose(recon_single_mlp(v), x, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_round_trip_bound(seed, n1):
    rng = np.random.default_rng(seed)
    cfg = MlpConfig((15, n1, 4))
    x = rng.standard_normal(15)
    v = batch_gradient(cfg, init_params(cfg, seed=seed % 1000), x, [int(rng.integers(4))])
    if np.max(np.abs(v[1])) <= EPS_DIV:
        return
    err = np.max(np.abs(recon_single_mlp(v) - x))
    assert err <= 1e-8 * np.max(np.abs(x)) + 1e-10


def test_scaling_output_layer_leaves_result_unchanged(rng):
    cfg = MlpConfig((30, 4, 5))
    w = init_params(cfg, seed=3)
    x = rng.uniform(size=30)
    base = recon_single_mlp(batch_gradient(cfg, w, x, [2]))
    for c in (-2.0, 0.1, 7.5):
        ws = w.copy()
        ws.layers[1] = (c * ws.layers[1][0], c * ws.layers[1][1])
        np.testing.assert_allclose(recon_single_mlp(batch_gradient(cfg, ws, x, [2])), base, rtol=1e-9, atol=1e-12)


def test_fallback_to_strongest_unit(rng):
    x = rng.uniform(size=6)
    g_b = np.array([0.0, 1e-3, -0.5])
    v = GradientBundle([np.outer(g_b, x), g_b])
    np.testing.assert_allclose(recon_single_mlp(v, unit=0), x, atol=1e-15)


def test_degenerate_gradient_raises():
    v = GradientBundle([np.ones((3, 4)), np.full(3, 1e-310)])
    with pytest.raises(DegenerateGradientError):
        recon_single_mlp(v)


def test_batch_input_is_rejected():
    with pytest.raises(ValueError, match="single-instance"):
        recon_single_mlp(GradientBundle([np.ones((2, 3)), np.ones(2)], batch_size=2))


def test_no_iterations_happen(monkeypatch, rng):
    # only one division per coordinate; optimizer code is never touched
    from gradinv import recon

    monkeypatch.setattr(recon, "adam_step", lambda *a, **k: pytest.fail("optimizer called"))
    cfg = MlpConfig((25, 2, 3))
    x = rng.uniform(size=25)
    np.testing.assert_allclose(recon_single_mlp(batch_gradient(cfg, init_params(cfg), x, [0])), x, atol=1e-10)


def test_demix_recovers_conv_output(rng):
    cfg = CnnConfig(3, 8, 3, 1, 2, 4, 6, 10)
    for seed in range(5):
        w = init_params(cfg, seed=seed)
        x = rng.uniform(size=cfg.input_shape)
        _, hidden = cnn_forward(cfg, w, x, return_hidden=True)
        res = demix_cnn_single(batch_gradient(cfg, w, x, [seed]), cfg)
        assert res.H.shape == (cfg.n0,)
        np.testing.assert_allclose(res.H, hidden, atol=1e-8)
        assert res.exact.all()


def test_demix_zero_conv_gives_zero():
    cfg = CnnConfig(1, 6, 3, 0, 1, 2, 3, 4)
    w = init_params(cfg, seed=0)
    w.layers[0] = (np.zeros_like(w.layers[0][0]), np.zeros(2))
    v = batch_gradient(cfg, w, np.ones(cfg.input_shape), [1])
    np.testing.assert_allclose(demix_cnn_single(v, cfg).H, 0.0, atol=1e-15)


def test_demix_requires_dense_layer():
    cfg = CnnConfig(1, 6, 3, 0, 1, 2, 0, 4)
    v = batch_gradient(cfg, init_params(cfg), np.ones(cfg.input_shape), [1])
    with pytest.raises(ValueError, match="dense"):
        demix_cnn_single(v, cfg)
