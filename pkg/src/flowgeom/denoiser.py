"""Tiny DiT-style denoiser in numpy with an exact hand-written backward pass.

Block layout (pre-norm, adaLN):

    c   = MLP(sinusoid(t)) + E[y]            conditioning, y == n_classes is null
    x   = [cls_in(z_cls); patch_in(z)] + pos
    per layer, with (sh1, sc1, g1, sh2, sc2, g2) = SiLU(c) @ W_ada + b_ada:
        x = x + g1 * Attn(RMSNorm(x) * (1 + sc1) + sh1)     optional QK RMSNorm
        x = x + g2 * SwiGLU(RMSNorm(x) * (1 + sc2) + sh2)
    h   = RMSNorm(x) * (1 + sc_f) + sh_f
    z0_hat = h[patches] @ W_out,  zcls0_hat = h[cls] @ W_cls

Everything runs in the dtype of the parameter arrays, so a float64 copy of the
parameters gives the gradient-check mirror of the float32 training model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

NORM_EPS = 1e-6
TIME_FEATURES = 64
# Largest angular frequency of the time features.  The usual 1000 (from
# discrete 1000-step diffusion) oscillates faster than any K <= 125 grid can
# resolve, which makes the learned field rough in t.
TIME_SCALE = 30.0


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    channels: int = 8
    height: int = 4
    width: int = 4
    n_classes: int = 10
    qk_norm: bool = True
    cls_token: bool = True
    ffn_ratio: int = 4
    dropout: float = 0.0
    time_scale: float = TIME_SCALE

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.ffn_ratio < 1:
            raise ValueError("ffn_ratio must be >= 1")
        if min(self.layers, self.channels, self.height, self.width, self.n_classes) < 1:
            raise ValueError("layers, dims and n_classes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    @property
    def null_label(self) -> int:
        return self.n_classes

    @property
    def n_tokens(self) -> int:
        return self.height * self.width + int(self.cls_token)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    D, C, F = cfg.hidden, cfg.channels, cfg.ffn_ratio * cfg.hidden
    dh = D // cfg.heads
    shapes = {
        "patch_in.w": (C, D), "patch_in.b": (D,),
        "cls_in.w": (C, D), "cls_in.b": (D,),
        "pos": (cfg.n_tokens, D),
        "t_mlp.w1": (TIME_FEATURES, D), "t_mlp.b1": (D,),
        "t_mlp.w2": (D, D), "t_mlp.b2": (D,),
        "y_emb": (cfg.n_classes + 1, D),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1": (D,), p + "qkv.w": (D, 3 * D), p + "qkv.b": (3 * D,),
            p + "proj.w": (D, D), p + "proj.b": (D,),
            p + "norm2": (D,), p + "ffn.w1": (D, F), p + "ffn.w3": (D, F), p + "ffn.w2": (F, D),
            p + "ada.w": (D, 6 * D), p + "ada.b": (6 * D,),
        })
        if cfg.qk_norm:
            shapes.update({p + "q_norm": (dh,), p + "k_norm": (dh,)})
    shapes.update({
        "final.ada.w": (D, 2 * D), "final.ada.b": (2 * D,),
        "out.w": (D, C), "out.b": (C,),
        "cls_out.w": (D, C), "cls_out.b": (C,),
    })
    return shapes


def _zero_init(name: str) -> bool:
    return ".ada." in name or name.startswith(("out.", "cls_out.", "final.ada"))


def init_params(cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32,
                zero_heads: bool = True) -> dict[str, np.ndarray]:
    """Scaled-Gaussian weights, zero biases, unit norm gains.

    With ``zero_heads`` the adaLN projections and output heads start at zero;
    switching it off gives a generic point for gradient checks.
    """
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("norm1", "norm2", "q_norm", "k_norm")):
            arr = np.ones(shape)
        elif zero_heads and _zero_init(name):
            arr = np.zeros(shape)
        elif name == "pos" or name == "y_emb":
            arr = 0.02 * rng.standard_normal(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape) if zero_heads else 0.1 * rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        out[name] = arr.astype(dtype)
    if not zero_heads:
        for name in out:
            if name.endswith(("norm1", "norm2", "q_norm", "k_norm")):
                out[name] = (1.0 + 0.1 * rng.standard_normal(out[name].shape)).astype(dtype)
    return out


def astype_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """``decay * shadow + (1 - decay) * params`` per element; returns a new dict."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if shadow.keys() != params.keys():
        raise ValueError("shadow and params hold different keys")
    out = {}
    for k, s in shadow.items():
        p = params[k]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {s.shape} vs {p.shape}")
        d = s.dtype.type(decay)
        out[k] = d * s + (1 - d) * p
    return out


# --------------------------------------------------------------------------
# primitives: each forward returns (out, cache); each backward consumes cache


def sigmoid(x):
    # in-place variants below avoid large temporaries, which dominate at toy scale
    s = np.multiply(x, 0.5)
    np.tanh(s, out=s)
    s += 1
    s *= 0.5
    return s


def silu_fwd(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_bwd(dy, cache):
    x, s = cache
    r = np.subtract(1, s)
    r *= x
    r += 1
    r *= s
    r *= dy
    return r


def _mm(x, w):
    # flatten leading axes: one GEMM instead of numpy's stacked matmul loop
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def linear_fwd(x, w, b=None):
    y = _mm(x, w)
    if b is not None:
        y = y + b
    return y, x


def linear_bwd(dy, x, w, has_bias=True):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(0) if has_bias else None
    return _mm(dy, w.T), dw, db


def rmsnorm_fwd(x, g=None):
    ms = np.einsum("...i,...i->...", x, x)[..., None]
    ms /= x.shape[-1]
    ms += x.dtype.type(NORM_EPS)
    r = np.sqrt(ms, out=ms)
    np.reciprocal(r, out=r)
    n = x * r
    return (n * g if g is not None else n), (x, r, n, g)


def rmsnorm_bwd(dy, cache):
    x, r, n, g = cache
    dg = None
    if g is not None:
        k = n.shape[-1]
        dg = np.einsum("ji,ji->i", dy.reshape(-1, k), n.reshape(-1, k))
        dy = dy * g
    proj = np.einsum("...i,...i->...", dy, n)[..., None]
    proj /= n.shape[-1]
    dx = n * proj
    np.subtract(dy, dx, out=dx)
    dx *= r
    return dx, dg


def modulate_fwd(n, shift, scale):
    # n: [B, N, D], shift/scale: [B, D]
    h = n * (1 + scale[:, None])
    h += shift[:, None]
    return h, (n, scale)


def modulate_bwd(dy, cache):
    n, scale = cache
    return dy * (1 + scale[:, None]), dy.sum(1), np.einsum("bnd,bnd->bd", dy, n)


def softmax(x):
    e = x - x.max(-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(-1, keepdims=True)
    return e


def attention_fwd(h, p, prefix, heads, qk_norm):
    B, N, D = h.shape
    dh = D // heads
    qkv, c_qkv = linear_fwd(h, p[prefix + "qkv.w"], p[prefix + "qkv.b"])
    qkv = qkv.reshape(B, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    c_q = c_k = None
    if qk_norm:
        q, c_q = rmsnorm_fwd(q, p[prefix + "q_norm"])
        k, c_k = rmsnorm_fwd(k, p[prefix + "k_norm"])
    scale = h.dtype.type(1.0 / math.sqrt(dh))
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    out, c_proj = linear_fwd(o, p[prefix + "proj.w"], p[prefix + "proj.b"])
    return out, (c_qkv, q, k, v, c_q, c_k, att, c_proj, scale)


def attention_bwd(dout, cache, p, g, prefix, heads):
    c_qkv, q, k, v, c_q, c_k, att, c_proj, scale = cache
    B, N, D = dout.shape
    dh = D // heads
    do, dw, db = linear_bwd(dout, c_proj, p[prefix + "proj.w"])
    g[prefix + "proj.w"] += dw
    g[prefix + "proj.b"] += db
    do = do.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    if c_q is not None:
        dq, dgq = rmsnorm_bwd(dq, c_q)
        dk, dgk = rmsnorm_bwd(dk, c_k)
        g[prefix + "q_norm"] += dgq
        g[prefix + "k_norm"] += dgk
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * D)
    dh_, dw, db = linear_bwd(dqkv, c_qkv, p[prefix + "qkv.w"])
    g[prefix + "qkv.w"] += dw
    g[prefix + "qkv.b"] += db
    return dh_


def swiglu_fwd(h, w1, w3, w2):
    a = _mm(h, w1)
    s, c_s = silu_fwd(a)
    b = _mm(h, w3)
    m = s * b
    return _mm(m, w2), (h, c_s, s, b, m)


def swiglu_bwd(dy, cache, w1, w3, w2):
    h, c_s, s, b, m = cache
    D = h.shape[-1]
    F = m.shape[-1]
    dm = _mm(dy, w2.T)
    dw2 = m.reshape(-1, F).T @ dy.reshape(-1, dy.shape[-1])
    db_ = dm * s
    dm *= b
    da = silu_bwd(dm, c_s)
    h2 = h.reshape(-1, D)
    dw1 = h2.T @ da.reshape(-1, F)
    dw3 = h2.T @ db_.reshape(-1, F)
    dh = _mm(da, w1.T) + _mm(db_, w3.T)
    return dh, dw1, dw3, dw2


def timestep_features(t, dim: int = TIME_FEATURES, dtype=np.float32, scale: float = TIME_SCALE):
    """Sinusoidal features of ``scale * t``, frequencies geometric in ``[1e-4, 1]``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = scale * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype)


# --------------------------------------------------------------------------
# model


class NonFiniteActivation(FloatingPointError):
    pass


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activations in {where}")


def forward(params: dict, cfg: DenoiserConfig, z_t, z_cls_t, t, labels,
            rng: np.random.Generator | None = None, need_cache: bool = True):
    """Returns ``(z0_hat [B,C,H,W], zcls0_hat [B,C], cache)``.

    Dropout (if configured) is applied only when ``rng`` is given.
    """
    p = params
    dt = p["pos"].dtype
    z_t = np.asarray(z_t, dtype=dt)
    z_cls_t = np.asarray(z_cls_t, dtype=dt)
    labels = np.asarray(labels)
    B = z_t.shape[0]
    C, H, W = cfg.channels, cfg.height, cfg.width
    if z_t.shape != (B, C, H, W):
        raise ValueError(f"z_t must be [B, {C}, {H}, {W}], got {z_t.shape}")
    if z_cls_t.shape != (B, C):
        raise ValueError(f"z_cls_t must be [B, {C}], got {z_cls_t.shape}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape != (B,):
        raise ValueError("t must have one entry per sample")
    if labels.shape != (B,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be an integer vector with one entry per sample")
    if np.any(labels < 0) or np.any(labels > cfg.n_classes):
        raise ValueError(f"labels must lie in [0, {cfg.n_classes}]")

    cache = {"B": B, "params_id": id(params), "dtype": dt}
    # conditioning
    tf = timestep_features(t, dtype=dt, scale=cfg.time_scale)
    a1, c_l1 = linear_fwd(tf, p["t_mlp.w1"], p["t_mlp.b1"])
    s1, c_s1 = silu_fwd(a1)
    temb, c_l2 = linear_fwd(s1, p["t_mlp.w2"], p["t_mlp.b2"])
    c = temb + p["y_emb"][labels]
    sc, c_sc = silu_fwd(c)
    cache.update(c_l1=c_l1, c_s1=c_s1, c_l2=c_l2, labels=labels, c_sc=c_sc, sc=sc)

    # tokens
    patches = z_t.reshape(B, C, H * W).transpose(0, 2, 1)
    xp, c_pin = linear_fwd(patches, p["patch_in.w"], p["patch_in.b"])
    cache["c_pin"] = c_pin
    if cfg.cls_token:
        xc, c_cin = linear_fwd(z_cls_t, p["cls_in.w"], p["cls_in.b"])
        cache["c_cin"] = c_cin
        x = np.concatenate([xc[:, None], xp], axis=1)
    else:
        x = xp
    x = x + p["pos"]

    blocks = []
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        mod, c_ada = linear_fwd(sc, p[pre + "ada.w"], p[pre + "ada.b"])
        sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6, axis=1)
        n1, c_n1 = rmsnorm_fwd(x, p[pre + "norm1"])
        h1, c_m1 = modulate_fwd(n1, sh1, sc1)
        o, c_att = attention_fwd(h1, p, pre, cfg.heads, cfg.qk_norm)
        m_att = _dropout_mask(rng, cfg.dropout, o.shape, dt)
        if m_att is not None:
            o = o * m_att
        x = x + g1[:, None] * o
        n2, c_n2 = rmsnorm_fwd(x, p[pre + "norm2"])
        h2, c_m2 = modulate_fwd(n2, sh2, sc2)
        f, c_ffn = swiglu_fwd(h2, p[pre + "ffn.w1"], p[pre + "ffn.w3"], p[pre + "ffn.w2"])
        m_ffn = _dropout_mask(rng, cfg.dropout, f.shape, dt)
        if m_ffn is not None:
            f = f * m_ffn
        x = x + g2[:, None] * f
        _check_finite(x, f"block {i}")
        if need_cache:
            blocks.append(dict(c_ada=c_ada, g1=g1, g2=g2, o=o, f=f, c_n1=c_n1, c_m1=c_m1,
                               c_att=c_att, c_n2=c_n2, c_m2=c_m2, c_ffn=c_ffn,
                               m_att=m_att, m_ffn=m_ffn))
    cache["blocks"] = blocks

    modf, c_fada = linear_fwd(sc, p["final.ada.w"], p["final.ada.b"])
    shf, scf = np.split(modf, 2, axis=1)
    nf, c_nf = rmsnorm_fwd(x)
    hf, c_mf = modulate_fwd(nf, shf, scf)
    cache.update(c_fada=c_fada, c_nf=c_nf, c_mf=c_mf)
    off = int(cfg.cls_token)
    out_p, c_out = linear_fwd(hf[:, off:], p["out.w"], p["out.b"])
    z0_hat = out_p.transpose(0, 2, 1).reshape(B, C, H, W)
    if cfg.cls_token:
        zc_hat, c_cout = linear_fwd(hf[:, 0], p["cls_out.w"], p["cls_out.b"])
        cache["c_cout"] = c_cout
    else:
        zc_hat = np.zeros((B, C), dtype=dt)
    cache["c_out"] = c_out
    _check_finite(z0_hat, "output head")
    return z0_hat, zc_hat, (cache if need_cache else None)


def _dropout_mask(rng, rate, shape, dtype):
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def backward(params: dict, cfg: DenoiserConfig, cache: dict, grad_z0, grad_zcls=None) -> dict:
    """Gradients of ``sum(grad_z0 * z0_hat) + sum(grad_zcls * zcls0_hat)``."""
    p = params
    if cache is None or cache.get("params_id") != id(params):
        raise ValueError("cache does not belong to these parameters")
    B = cache["B"]
    dt = cache["dtype"]
    C, H, W, D = cfg.channels, cfg.height, cfg.width, cfg.hidden
    grad_z0 = np.asarray(grad_z0, dtype=dt)
    if grad_z0.shape != (B, C, H, W):
        raise ValueError("upstream gradient shape does not match the cached forward")
    if grad_zcls is None:
        grad_zcls = np.zeros((B, C), dtype=dt)
    grad_zcls = np.asarray(grad_zcls, dtype=dt)
    if grad_zcls.shape != (B, C):
        raise ValueError("upstream CLS gradient shape does not match the cached forward")
    g = {k: np.zeros_like(v) for k, v in p.items()}

    off = int(cfg.cls_token)
    dhf = np.zeros((B, cfg.n_tokens, D), dtype=dt)
    dout = grad_z0.reshape(B, C, H * W).transpose(0, 2, 1)
    dhf[:, off:], g["out.w"], g["out.b"] = linear_bwd(dout, cache["c_out"], p["out.w"])
    if cfg.cls_token:
        dhf[:, 0], g["cls_out.w"], g["cls_out.b"] = linear_bwd(grad_zcls, cache["c_cout"], p["cls_out.w"])
    dnf, dshf, dscf = modulate_bwd(dhf, cache["c_mf"])
    dx, _ = rmsnorm_bwd(dnf, cache["c_nf"])
    dmodf = np.concatenate([dshf, dscf], axis=1)
    dsc, g["final.ada.w"], g["final.ada.b"] = linear_bwd(dmodf, cache["c_fada"], p["final.ada.w"])

    for i in reversed(range(cfg.layers)):
        pre = f"blocks.{i}."
        b = cache["blocks"][i]
        # ffn branch
        dg2 = np.sum(dx * b["f"], axis=1)
        df = dx * b["g2"][:, None]
        if b["m_ffn"] is not None:
            df = df * b["m_ffn"]
        dh2, dw1, dw3, dw2 = swiglu_bwd(df, b["c_ffn"], p[pre + "ffn.w1"], p[pre + "ffn.w3"], p[pre + "ffn.w2"])
        g[pre + "ffn.w1"] += dw1
        g[pre + "ffn.w3"] += dw3
        g[pre + "ffn.w2"] += dw2
        dn2, dsh2, dsc2 = modulate_bwd(dh2, b["c_m2"])
        dxn, dgn = rmsnorm_bwd(dn2, b["c_n2"])
        g[pre + "norm2"] += dgn
        dx = dx + dxn
        # attention branch
        dg1 = np.sum(dx * b["o"], axis=1)
        do = dx * b["g1"][:, None]
        if b["m_att"] is not None:
            do = do * b["m_att"]
        dh1 = attention_bwd(do, b["c_att"], p, g, pre, cfg.heads)
        dn1, dsh1, dsc1 = modulate_bwd(dh1, b["c_m1"])
        dxn, dgn = rmsnorm_bwd(dn1, b["c_n1"])
        g[pre + "norm1"] += dgn
        dx = dx + dxn
        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
        dsc_i, dw, db = linear_bwd(dmod, b["c_ada"], p[pre + "ada.w"])
        g[pre + "ada.w"] += dw
        g[pre + "ada.b"] += db
        dsc = dsc + dsc_i

    g["pos"] = dx.sum(0)
    if cfg.cls_token:
        _, g["cls_in.w"], g["cls_in.b"] = linear_bwd(dx[:, 0], cache["c_cin"], p["cls_in.w"])
    _, g["patch_in.w"], g["patch_in.b"] = linear_bwd(dx[:, off:], cache["c_pin"], p["patch_in.w"])

    dc = silu_bwd(dsc, cache["c_sc"])
    np.add.at(g["y_emb"], cache["labels"], dc)
    ds1, g["t_mlp.w2"], g["t_mlp.b2"] = linear_bwd(dc, cache["c_l2"], p["t_mlp.w2"])
    da1 = silu_bwd(ds1, cache["c_s1"])
    _, g["t_mlp.w1"], g["t_mlp.b1"] = linear_bwd(da1, cache["c_l1"], p["t_mlp.w1"])
    return g


def global_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in grads.values())))


class Denoiser:
    """Thin object wrapper binding a config to a parameter dict."""

    def __init__(self, config: DenoiserConfig, params: dict | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        if params is None:
            params = init_params(config, np.random.default_rng(seed), dtype=dtype)
        missing = set(param_shapes(config)) ^ set(params)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:5]}")
        self.params = params

    def __call__(self, z_t, z_cls_t, t, labels):
        z0, zc, _ = forward(self.params, self.config, z_t, z_cls_t, t, labels, need_cache=False)
        return z0, zc

    def forward(self, z_t, z_cls_t, t, labels, rng=None):
        return forward(self.params, self.config, z_t, z_cls_t, t, labels, rng=rng)

    def backward(self, cache, grad_z0, grad_zcls=None):
        return backward(self.params, self.config, cache, grad_z0, grad_zcls)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_probes: int
    worst: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(a, b, floor: float = 1e-5) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def gradient_check(cfg: DenoiserConfig, n_probes: int = 200, step: float = 1e-5, seed: int = 0,
                   batch: int = 3) -> GradCheckResult:
    """Central differences in float64 against :func:`backward` at a random point.

    Heads and modulation weights are random (not zero) so every path carries
    gradient.  Probes are drawn uniformly over parameter tensors, then over
    entries within the tensor.
    """
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng, dtype=np.float64, zero_heads=False)
    z = rng.standard_normal((batch, cfg.channels, cfg.height, cfg.width))
    zc = rng.standard_normal((batch, cfg.channels))
    t = rng.uniform(0.05, 0.95, batch)
    y = rng.integers(0, cfg.n_classes + 1, batch)
    r0 = rng.standard_normal(z.shape)
    r1 = rng.standard_normal(zc.shape)

    def objective(params):
        a, b, _ = forward(params, cfg, z, zc, t, y, need_cache=False)
        return float(np.sum(a * r0) + np.sum(b * r1))

    _, _, cache = forward(p, cfg, z, zc, t, y)
    grads = backward(p, cfg, cache, r0, r1)
    names = sorted(p)
    worst, worst_at = 0.0, None
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in p[name].shape)
        orig = p[name][idx]
        p[name][idx] = orig + step
        fp = objective(p)
        p[name][idx] = orig - step
        fm = objective(p)
        p[name][idx] = orig
        num = (fp - fm) / (2 * step)
        err = float(relative_error(grads[name][idx], num))
        if err > worst:
            worst, worst_at = err, (name, idx, float(grads[name][idx]), num)
    return GradCheckResult(worst, n_probes, worst_at)
