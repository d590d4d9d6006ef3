from dataclasses import replace

import numpy as np
import pytest

from flowgeom import denoiser as dn
from flowgeom.denoiser import (
    Denoiser,
    DenoiserConfig,
    NonFiniteActivation,
    ema_update,
    forward,
    global_norm,
    gradient_check,
    init_params,
    param_shapes,
    relative_error,
    timestep_features,
)

TINY = DenoiserConfig(hidden=16, layers=2, heads=2, channels=4, height=2, width=3, n_classes=5)


def numgrad(f, x, h=1e-6):
    """Central differences of scalar ``f`` over every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def _inputs(cfg, B=3, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((B, cfg.channels, cfg.height, cfg.width)),
            rng.standard_normal((B, cfg.channels)),
            rng.uniform(0.05, 0.95, B),
            rng.integers(0, cfg.n_classes + 1, B))


# ---- primitive gradients


def test_linear_grad():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    r = rng.standard_normal((2, 3, 5))
    f = lambda: np.sum(dn.linear_fwd(x, w, b)[0] * r)
    dx, dw, db = dn.linear_bwd(r, x, w)
    np.testing.assert_allclose(dx, numgrad(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, numgrad(f, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, numgrad(f, b), rtol=1e-6, atol=1e-8)


def test_silu_grad():
    x = np.random.default_rng(1).standard_normal((4, 6)) * 3
    r = np.random.default_rng(2).standard_normal((4, 6))
    f = lambda: np.sum(dn.silu_fwd(x)[0] * r)
    _, cache = dn.silu_fwd(x)
    np.testing.assert_allclose(dn.silu_bwd(r, cache), numgrad(f, x), rtol=1e-6, atol=1e-8)


def test_sigmoid_matches_scipy():
    from scipy.special import expit
    x = np.linspace(-30, 30, 101)
    np.testing.assert_allclose(dn.sigmoid(x), expit(x), rtol=1e-12, atol=1e-15)


def test_rmsnorm_grad():
    rng = np.random.default_rng(3)
    x, g, r = rng.standard_normal((2, 3, 8)), 1 + 0.1 * rng.standard_normal(8), rng.standard_normal((2, 3, 8))
    f = lambda: np.sum(dn.rmsnorm_fwd(x, g)[0] * r)
    _, cache = dn.rmsnorm_fwd(x, g)
    dx, dg = dn.rmsnorm_bwd(r, cache)
    np.testing.assert_allclose(dx, numgrad(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dg, numgrad(f, g), rtol=1e-6, atol=1e-8)


def test_rmsnorm_unit_rms():
    x = np.random.default_rng(4).standard_normal((5, 16)) * 7
    n, _ = dn.rmsnorm_fwd(x)
    np.testing.assert_allclose(np.sqrt(np.mean(n**2, axis=-1)), 1.0, rtol=1e-6)


def test_modulate_grad():
    rng = np.random.default_rng(5)
    n, sh, sc = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    r = rng.standard_normal((2, 3, 4))
    f = lambda: np.sum(dn.modulate_fwd(n, sh, sc)[0] * r)
    _, cache = dn.modulate_fwd(n, sh, sc)
    dn_, dsh, dsc = dn.modulate_bwd(r, cache)
    np.testing.assert_allclose(dn_, numgrad(f, n), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dsh, numgrad(f, sh), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dsc, numgrad(f, sc), rtol=1e-6, atol=1e-8)


def test_softmax_rows_and_shift_invariance():
    x = np.random.default_rng(6).standard_normal((3, 5)) * 10
    s = dn.softmax(x.copy())
    np.testing.assert_allclose(s.sum(-1), 1.0)
    np.testing.assert_allclose(dn.softmax(x + 100.0), s, rtol=1e-12)


@pytest.mark.parametrize("qk_norm", [True, False])
def test_attention_grad(qk_norm):
    cfg = DenoiserConfig(hidden=8, layers=1, heads=2, qk_norm=qk_norm)
    rng = np.random.default_rng(7)
    p = init_params(cfg, rng, dtype=np.float64, zero_heads=False)
    h = rng.standard_normal((2, 3, 8))
    r = rng.standard_normal((2, 3, 8))
    pre = "blocks.0."
    f = lambda: np.sum(dn.attention_fwd(h, p, pre, 2, qk_norm)[0] * r)
    _, cache = dn.attention_fwd(h, p, pre, 2, qk_norm)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dh = dn.attention_bwd(r, cache, p, g, pre, 2)
    np.testing.assert_allclose(dh, numgrad(f, h), rtol=1e-5, atol=1e-8)
    for name in ("qkv.w", "proj.w", "proj.b") + (("q_norm", "k_norm") if qk_norm else ()):
        np.testing.assert_allclose(g[pre + name], numgrad(f, p[pre + name]), rtol=1e-5, atol=1e-8)


def test_swiglu_grad():
    rng = np.random.default_rng(8)
    h = rng.standard_normal((2, 3, 4))
    w1, w3, w2 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), rng.standard_normal((6, 4))
    r = rng.standard_normal((2, 3, 4))
    f = lambda: np.sum(dn.swiglu_fwd(h, w1, w3, w2)[0] * r)
    _, cache = dn.swiglu_fwd(h, w1, w3, w2)
    dh, dw1, dw3, dw2 = dn.swiglu_bwd(r, cache, w1, w3, w2)
    for got, arr in ((dh, h), (dw1, w1), (dw3, w3), (dw2, w2)):
        np.testing.assert_allclose(got, numgrad(f, arr), rtol=1e-6, atol=1e-8)


# ---- full model


@pytest.mark.parametrize("cfg", [
    TINY,
    DenoiserConfig(hidden=8, layers=1, heads=2, channels=3, height=2, width=2, n_classes=3, qk_norm=False),
    DenoiserConfig(hidden=8, layers=2, heads=1, channels=3, height=1, width=2, n_classes=2, cls_token=False),
])
def test_full_gradient_check(cfg):
    res = gradient_check(cfg, n_probes=120, seed=1)
    assert res.max_rel_error < 1e-4, res.worst


def test_backward_rejects_foreign_cache():
    p = init_params(TINY, np.random.default_rng(0), dtype=np.float64)
    z, zc, t, y = _inputs(TINY)
    a, b, cache = forward(p, TINY, z, zc, t, y)
    other = dn.copy_params(p)
    with pytest.raises(ValueError):
        dn.backward(other, TINY, cache, np.ones_like(a), np.ones_like(b))


def test_zero_init_output_is_zero():
    p = init_params(TINY, np.random.default_rng(0))
    z, zc, t, y = _inputs(TINY)
    a, b, _ = forward(p, TINY, z, zc, t, y)
    assert not a.any() and not b.any()


def test_zero_init_still_gets_head_gradient():
    p = init_params(TINY, np.random.default_rng(0), dtype=np.float64)
    z, zc, t, y = _inputs(TINY)
    a, b, cache = forward(p, TINY, z, zc, t, y)
    g = dn.backward(p, TINY, cache, np.ones_like(a), np.ones_like(b))
    assert np.abs(g["out.b"]).sum() > 0 and np.abs(g["final.ada.w"]).sum() == 0


def test_forward_deterministic():
    p = init_params(TINY, np.random.default_rng(0), zero_heads=False)
    z, zc, t, y = _inputs(TINY)
    a1, b1, _ = forward(p, TINY, z, zc, t, y)
    a2, b2, _ = forward(p, TINY, z, zc, t, y)
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_batch_equivariance():
    p = init_params(TINY, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    z, zc, t, y = _inputs(TINY, B=5)
    perm = np.array([3, 0, 4, 1, 2])
    a, b, _ = forward(p, TINY, z, zc, t, y)
    ap, bp, _ = forward(p, TINY, z[perm], zc[perm], t[perm], y[perm])
    np.testing.assert_allclose(ap, a[perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(bp, b[perm], rtol=1e-12, atol=1e-12)


def test_cls_token_couples_to_patches():
    p = init_params(TINY, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    z, zc, t, y = _inputs(TINY)
    a, _, _ = forward(p, TINY, z, zc, t, y)
    a2, _, _ = forward(p, TINY, z, zc + 1.0, t, y)
    assert np.abs(a - a2).max() > 1e-6


def test_no_cls_ignores_cls_input():
    cfg = DenoiserConfig(hidden=8, layers=1, heads=2, channels=4, height=2, width=3, n_classes=5, cls_token=False)
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    z, zc, t, y = _inputs(cfg)
    a, b, _ = forward(p, cfg, z, zc, t, y)
    a2, _, _ = forward(p, cfg, z, zc + 5.0, t, y)
    np.testing.assert_array_equal(a, a2)
    assert not b.any()


def test_label_and_time_conditioning_matter():
    p = init_params(TINY, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    z, zc, t, y = _inputs(TINY)
    a, _, _ = forward(p, TINY, z, zc, t, y)
    assert np.abs(a - forward(p, TINY, z, zc, t, (y + 1) % 6)[0]).max() > 1e-6
    assert np.abs(a - forward(p, TINY, z, zc, t * 0.5, y)[0]).max() > 1e-6


def test_float32_tracks_float64():
    p64 = init_params(TINY, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    p32 = dn.astype_params(p64, np.float32)
    z, zc, t, y = _inputs(TINY)
    a64, _, _ = forward(p64, TINY, z, zc, t, y)
    a32, _, _ = forward(p32, TINY, z, zc, t, y)
    assert a32.dtype == np.float32
    np.testing.assert_allclose(a32, a64, rtol=1e-3, atol=1e-4)


def test_dropout_only_with_rng():
    cfg = DenoiserConfig(hidden=8, layers=1, heads=2, channels=4, height=2, width=3, n_classes=5, dropout=0.5)
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64, zero_heads=False)
    z, zc, t, y = _inputs(cfg)
    a, _, _ = forward(p, cfg, z, zc, t, y)
    a2, _, _ = forward(p, cfg, z, zc, t, y)
    a3, _, _ = forward(p, cfg, z, zc, t, y, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a, a2)
    assert np.abs(a - a3).max() > 0


def test_input_validation():
    p = init_params(TINY, np.random.default_rng(0))
    z, zc, t, y = _inputs(TINY)
    with pytest.raises(ValueError):
        forward(p, TINY, z[:, :2], zc, t, y)
    with pytest.raises(ValueError):
        forward(p, TINY, z, zc, t[:2], y)
    with pytest.raises(ValueError):
        forward(p, TINY, z, zc, t, y + 10)
    with pytest.raises(ValueError):
        forward(p, TINY, z, zc, t, y.astype(float))


def test_non_finite_activation_detected():
    p = init_params(TINY, np.random.default_rng(0))
    z, zc, t, y = _inputs(TINY)
    z[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteActivation):
        forward(p, TINY, z, zc, t, y)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(hidden=10, heads=3)
    with pytest.raises(ValueError):
        DenoiserConfig(dropout=1.0)
    assert DenoiserConfig().null_label == 10
    assert DenoiserConfig().n_tokens == 17


def test_param_shapes_ffn_ratio():
    shapes = param_shapes(DenoiserConfig(hidden=32, layers=1, heads=4))
    assert shapes["blocks.0.ffn.w1"] == (32, 128)
    assert shapes["blocks.0.q_norm"] == (8,)


def test_timestep_features():
    f = timestep_features(np.array([0.0, 0.3]))
    assert f.shape == (2, 64)
    np.testing.assert_array_equal(f[0, :32], 1.0)
    np.testing.assert_array_equal(f[0, 32:], 0.0)
    assert f[1, 0] == pytest.approx(np.cos(0.3 * 30.0), abs=1e-6)
    g = timestep_features(np.array([0.3]), scale=1000.0)
    assert g[0, 0] == pytest.approx(np.cos(300.0), abs=1e-6)


def test_time_scale_in_config():
    with pytest.raises(ValueError):
        DenoiserConfig(time_scale=0.0)
    cfg = DenoiserConfig(hidden=8, layers=1, heads=2, height=2, width=2, time_scale=5.0)
    assert DenoiserConfig(**cfg.to_dict()) == cfg
    p = init_params(cfg, np.random.default_rng(0), zero_heads=False)
    z = np.random.default_rng(1).standard_normal((2, 8, 2, 2))
    zc = np.zeros((2, 8))
    a = forward(p, cfg, z, zc, np.array([0.2, 0.2]), np.array([0, 1]), need_cache=False)[0]
    b = forward(p, replace(cfg, time_scale=50.0), z, zc, np.array([0.2, 0.2]), np.array([0, 1]),
                need_cache=False)[0]
    assert not np.allclose(a, b)


def test_ema_update():
    s = {"a": np.zeros(3)}
    p = {"a": np.ones(3)}
    np.testing.assert_allclose(ema_update(s, p, 0.9)["a"], 0.1)
    np.testing.assert_allclose(ema_update(s, p, 0.0)["a"], 1.0)
    with pytest.raises(ValueError):
        ema_update(s, p, 1.0)
    with pytest.raises(ValueError):
        ema_update(s, {"b": np.ones(3)}, 0.5)


def test_ema_converges_geometrically():
    s = {"a": np.zeros(1)}
    p = {"a": np.ones(1)}
    for _ in range(50):
        s = ema_update(s, p, 0.9)
    assert s["a"][0] == pytest.approx(1 - 0.9**50, rel=1e-12)


def test_global_norm_and_relative_error():
    assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) < 1e-3


def test_denoiser_wrapper():
    m = Denoiser(TINY, seed=0)
    assert m.n_params == sum(int(np.prod(s)) for s in param_shapes(TINY).values())
    z, zc, t, y = _inputs(TINY)
    a, b = m(z, zc, t, y)
    assert a.shape == z.shape and b.shape == zc.shape
    with pytest.raises(ValueError):
        Denoiser(TINY, params={"pos": np.zeros(1)})
