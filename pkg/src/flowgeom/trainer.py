"""Training loop: time sampling, x- or v-prediction loss, Adam with warmup, EMA."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import denoiser as dn
from .flowcore import (
    EPS_T,
    StandardizationStats,
    TimeSampler,
    compute_shift,
    destandardize,
    fit_standardization,
    make_flow_sample,
    sample_time,
    standardize,
    velocity_divisor,
)
from .io import emit_jsonl, load_checkpoint, save_checkpoint
from .synthdata import FeatureBatch, stream

logger = logging.getLogger(__name__)

STREAMS = ("init", "data", "time", "noise", "dropout")
SPIKE_WINDOW = 100


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "x"
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    label_dropout: float = 0.1
    lam_cls: float = 0.2
    cls_noise_mode: str = "independent"
    ema_decays: tuple = (0.9999, 0.9996)
    eps_t: float = EPS_T
    shift: float | None = None
    standardize: bool = True
    spike_factor: float = 1e3
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("x", "v"):
            raise ValueError("mode must be 'x' or 'v'")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("weight_decay >= 0, clip_norm > 0 and adam_eps > 0 required")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError("label_dropout must lie in [0, 1)")
        if self.lam_cls < 0:
            raise ValueError("lam_cls must be >= 0")
        if self.cls_noise_mode not in ("independent", "coupled"):
            raise ValueError("cls_noise_mode must be 'independent' or 'coupled'")
        if not self.ema_decays or any(not 0.0 <= d < 1.0 for d in self.ema_decays):
            raise ValueError("ema decays must lie in [0, 1)")
        if not 0 < self.eps_t < 1:
            raise ValueError("eps_t must lie in (0, 1)")
        if self.shift is not None and self.shift < 1:
            raise ValueError("shift must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        object.__setattr__(self, "ema_decays", tuple(float(d) for d in self.ema_decays))

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.steps)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ema_decays"] = list(self.ema_decays)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: (tuple(v) if k == "ema_decays" else v) for k, v in d.items() if k in names})


def resolve_shift(cfg: TrainConfig, shape) -> float:
    """Configured shift, else the resolution rule floored at 1 (toy grids give s < 1)."""
    if cfg.shift is not None:
        return float(cfg.shift)
    C, H, W = shape
    return max(1.0, compute_shift(H, W, C))


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    ema: dict  # decay -> params
    step: int = 0
    n_rejected: int = 0
    n_dropped: int = 0
    n_labels: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=SPIKE_WINDOW))
    rngs: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, dcfg: dn.DenoiserConfig, tcfg: TrainConfig) -> "TrainState":
        rngs = {name: stream(tcfg.seed, "train/" + name) for name in STREAMS}
        params = dn.init_params(dcfg, rngs["init"])
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(
            params=params,
            m=zeros,
            v={k: z.copy() for k, z in zeros.items()},
            ema={d: dn.copy_params(params) for d in tcfg.ema_decays},
            rngs=rngs,
        )


def adam_update(params, grads, m, v, step, lr, cfg: TrainConfig):
    """One AdamW step (``step`` counts from 1); updates the dicts in place."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k, g in grads.items():
        p = params[k]
        dt = p.dtype.type
        m[k] = dt(b1) * m[k] + dt(1 - b1) * g
        v[k] = dt(b2) * v[k] + dt(1 - b2) * g * g
        upd = (m[k] / dt(c1)) / (np.sqrt(v[k] / dt(c2)) + dt(cfg.adam_eps))
        if cfg.weight_decay:
            upd = upd + dt(cfg.weight_decay) * p
        params[k] = p - dt(lr) * upd


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = dn.global_norm(grads)
    scale = min(1.0, max_norm / (norm + 1e-6))
    if scale < 1.0:
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` then constant; ``step`` counts from 1."""
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def ema_decay_at(decay: float, step: int) -> float:
    return min(decay, (1.0 + step) / (10.0 + step))


def flow_loss(dcfg, tcfg, params, fs, labels, rng_dropout=None, need_grad=True):
    """Loss, per-sample terms and output gradients for one flow sample."""
    z0_hat, zc_hat, cache = dn.forward(params, dcfg, fs.z_t, fs.z_cls_t, fs.t, labels,
                                       rng=rng_dropout, need_cache=need_grad)
    if tcfg.mode == "x":
        div = velocity_divisor(fs.t, fs.z_t, tcfg.eps_t)
        divc = velocity_divisor(fs.t, fs.z_cls_t, tcfg.eps_t)
        v_hat = (z0_hat - fs.z_t) / div
        v_tgt = (fs.z0 - fs.z_t) / div
        vc_hat = (zc_hat - fs.z_cls_t) / divc
        vc_tgt = (fs.z_cls0 - fs.z_cls_t) / divc
    else:
        v_hat, v_tgt, vc_hat, vc_tgt = z0_hat, fs.v, zc_hat, fs.v_cls
    r = v_hat - v_tgt
    rc = vc_hat - vc_tgt
    per_sample = np.mean(r * r, axis=(1, 2, 3), dtype=np.float64)
    per_sample_cls = np.mean(rc * rc, axis=1, dtype=np.float64)
    lam = tcfg.lam_cls if dcfg.cls_token else 0.0
    loss_fm = float(per_sample.mean())
    loss_cls = float(per_sample_cls.mean())
    out = dict(loss=loss_fm + lam * loss_cls, loss_fm=loss_fm, loss_cls=loss_cls,
               per_sample=per_sample, per_sample_cls=per_sample_cls, z0_hat=z0_hat, zc_hat=zc_hat)
    if need_grad:
        dt = r.dtype.type
        gr = r * dt(2.0 / r.size)
        grc = rc * dt(2.0 * lam / rc.size)
        if tcfg.mode == "x":
            gr = gr / div
            grc = grc / divc
        out["grads"] = dn.backward(params, dcfg, cache, gr, grc)
    return out


def train_step(state: TrainState, batch: FeatureBatch, dcfg: dn.DenoiserConfig, tcfg: TrainConfig,
               sampler: TimeSampler, detail: bool = False) -> tuple[TrainState, dict]:
    """One optimizer step on an already standardized minibatch."""
    rngs = state.rngs
    B = len(batch)
    t = sample_time(sampler, B, rngs["time"])
    drop = rngs["dropout"].random(B) < tcfg.label_dropout
    labels = np.where(drop, dcfg.null_label, batch.labels)
    fs = make_flow_sample(batch.patches, batch.cls, t, rngs["noise"], tcfg.cls_noise_mode)
    res = flow_loss(dcfg, tcfg, state.params, fs, labels,
                    rng_dropout=rngs["dropout"] if dcfg.dropout else None)
    loss = res["loss"]
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss at step {state.step + 1} (t range {t.min():.4f}..{t.max():.4f})"
        )
    grads, gnorm = clip_grads(res["grads"], tcfg.clip_norm)
    step = state.step + 1
    lr = lr_at(step, tcfg)
    rejected = bool(state.history) and loss > tcfg.spike_factor * float(np.median(state.history))
    if rejected:
        state.n_rejected += 1
        logger.warning("step %d rejected: loss %.4g above spike threshold", step, loss)
    else:
        adam_update(state.params, grads, state.m, state.v, step - state.n_rejected, lr, tcfg)
        for d in list(state.ema):
            state.ema[d] = dn.ema_update(state.ema[d], state.params, ema_decay_at(d, step))
        state.history.append(loss)
    state.step = step
    state.n_dropped += int(drop.sum())
    state.n_labels += B
    metrics = {
        "step": step,
        "loss": loss,
        "loss_cls": res["loss_cls"],
        "grad_norm": gnorm,
        "lr": lr,
        "t_mean": float(t.mean()),
        "loss_fm": res["loss_fm"],
        "rejected": rejected,
        "t_bin": np.histogram(t, bins=10, range=(0.0, 1.0))[0].tolist(),
    }
    if detail:
        metrics["detail"] = dict(t=t, labels=labels, flow=fs, **{k: res[k] for k in
                                 ("per_sample", "per_sample_cls", "z0_hat", "zc_hat")})
    return state, metrics


# --------------------------------------------------------------------------
# checkpoints


def state_arrays(state: TrainState, stats: StandardizationStats) -> dict:
    arrays = {}
    for k, v in state.params.items():
        arrays["params/" + k] = v
        arrays["m/" + k] = state.m[k]
        arrays["v/" + k] = state.v[k]
    for d, shadow in state.ema.items():
        for k, v in shadow.items():
            arrays[f"ema/{d!r}/{k}"] = v
    for k, v in stats.arrays().items():
        arrays["stats/" + k] = v
    arrays["history"] = np.asarray(list(state.history), dtype=np.float64)
    return arrays


def save_training(path, state, stats, dcfg, tcfg, extra_meta=None) -> None:
    meta = {
        "step": state.step,
        "n_rejected": state.n_rejected,
        "n_dropped": state.n_dropped,
        "n_labels": state.n_labels,
        "denoiser": dcfg.to_dict(),
        "trainer": tcfg.to_dict(),
        "ema_decays": [repr(d) for d in state.ema],
        "rng": {k: r.bit_generator.state for k, r in state.rngs.items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, state_arrays(state, stats), meta)


def load_training(path):
    """Returns ``(state, stats, denoiser_config, train_config, meta)``."""
    arrays, meta = load_checkpoint(path)
    dcfg = dn.DenoiserConfig(**meta["denoiser"])
    tcfg = TrainConfig.from_dict(meta["trainer"])
    names = dn.param_shapes(dcfg)
    params = {k: arrays["params/" + k] for k in names}
    ema = {float(d): {k: arrays[f"ema/{d}/{k}"] for k in names} for d in meta["ema_decays"]}
    rngs = {}
    for k, st in meta["rng"].items():
        g = np.random.Generator(getattr(np.random, st["bit_generator"])())
        g.bit_generator.state = st
        rngs[k] = g
    state = TrainState(
        params=params,
        m={k: arrays["m/" + k] for k in names},
        v={k: arrays["v/" + k] for k in names},
        ema=ema,
        step=int(meta["step"]),
        n_rejected=int(meta["n_rejected"]),
        n_dropped=int(meta["n_dropped"]),
        n_labels=int(meta["n_labels"]),
        history=deque(arrays["history"].tolist(), maxlen=SPIKE_WINDOW),
        rngs=rngs,
    )
    stats = StandardizationStats.from_arrays({k: arrays["stats/" + k] for k in
                                              ("mean", "std", "cls_mean", "cls_std")})
    return state, stats, dcfg, tcfg, meta


# --------------------------------------------------------------------------
# driver


@dataclass
class TrainResult:
    state: TrainState
    stats: StandardizationStats
    denoiser: dn.DenoiserConfig
    config: TrainConfig
    metrics: list

    def model(self, ema: float | None = None) -> "FlowModel":
        return FlowModel.from_result(self, ema=ema)


def prepare_data(data: FeatureBatch, tcfg: TrainConfig) -> tuple[FeatureBatch, StandardizationStats]:
    data.check_finite()
    if tcfg.standardize:
        stats = fit_standardization(data)
    else:
        stats = StandardizationStats.identity(data.shape)
    return standardize(data.astype(np.float64), stats).astype(np.float32), stats


def train(dcfg: dn.DenoiserConfig, tcfg: TrainConfig, data: FeatureBatch, out_dir=None,
          steps: int | None = None, resume: TrainState | None = None,
          stats: StandardizationStats | None = None, extra_meta=None) -> TrainResult:
    """Run ``steps`` (default ``tcfg.steps``) optimizer steps.

    Writes ``metrics.jsonl`` and periodic ``ckpt_<step>.npz`` files under
    ``out_dir`` if given, plus ``final.npz`` at the end.
    """
    if data.shape != (dcfg.channels, dcfg.height, dcfg.width):
        raise ValueError(f"data shape {data.shape} does not match the denoiser grid")
    if np.any(data.labels >= dcfg.n_classes) or np.any(data.labels < 0):
        raise ValueError("data labels exceed the denoiser's class count")
    if stats is None:
        train_data, stats = prepare_data(data, tcfg)
    else:
        train_data = standardize(data.astype(np.float64), stats).astype(np.float32)
    sampler = TimeSampler(shift=resolve_shift(tcfg, data.shape))
    state = resume if resume is not None else TrainState.initialize(dcfg, tcfg)
    n_steps = tcfg.steps - state.step if steps is None else steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        if resume is None:
            log_path.write_text("")
    N = len(train_data)
    B = min(tcfg.batch_size, N)
    log = []
    for _ in range(n_steps):
        idx = state.rngs["data"].choice(N, B, replace=False)
        state, metrics = train_step(state, train_data.take(idx), dcfg, tcfg, sampler)
        log.append(metrics)
        if out is not None:
            emit_jsonl([metrics], log_path, append=True)
            if tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                save_training(out / f"ckpt_{state.step:06d}.npz", state, stats, dcfg, tcfg, extra_meta)
    if out is not None:
        save_training(out / "final.npz", state, stats, dcfg, tcfg, extra_meta)
    return TrainResult(state, stats, dcfg, tcfg, log)


# --------------------------------------------------------------------------
# inference wrapper


class FlowModel:
    """Velocity field of a trained denoiser, in standardized coordinates.

    This is the object the sampler integrates.  The constructors take weights
    from an EMA track: ``ema`` names the decay and defaults to the first
    configured one.  ``raw=True`` takes the live optimizer weights instead.
    """

    def __init__(self, params, dcfg: dn.DenoiserConfig, stats: StandardizationStats,
                 mode: str = "x", eps_t: float = EPS_T):
        self.params = params
        self.config = dcfg
        self.stats = stats
        self.mode = mode
        self.eps_t = eps_t

    @classmethod
    def from_result(cls, res: TrainResult, ema: float | None = None, raw: bool = False):
        params = res.state.params if raw else res.state.ema[
            ema if ema is not None else res.config.ema_decays[0]]
        return cls(params, res.denoiser, res.stats, res.config.mode, res.config.eps_t)

    @classmethod
    def load(cls, path, ema: float | None = None, raw: bool = False):
        state, stats, dcfg, tcfg, _ = load_training(path)
        return cls.from_result(TrainResult(state, stats, dcfg, tcfg, []), ema=ema, raw=raw)

    @property
    def null_label(self) -> int:
        return self.config.null_label

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.config.channels, self.config.height, self.config.width)

    def velocity(self, z, z_cls, t, labels):
        """``(v, v_cls)`` at states ``z [B,C,H,W]``, ``z_cls [B,C]`` and scalar or per-sample ``t``."""
        B = z.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        out, out_c, _ = dn.forward(self.params, self.config, z, z_cls, tt, labels, need_cache=False)
        if self.mode == "v":
            return out, out_c
        div = velocity_divisor(tt, out, self.eps_t)
        divc = velocity_divisor(tt, out_c, self.eps_t)
        return (out - z) / div, (out_c - z_cls) / divc

    def decode(self, batch: FeatureBatch) -> FeatureBatch:
        return destandardize(batch, self.stats)


class FlowMatchingEstimator(BaseEstimator):
    """Estimator facade: ``fit`` trains on a FeatureBatch, ``sample`` generates.

    Hyperparameters mirror :class:`TrainConfig` and
    :class:`~flowgeom.denoiser.DenoiserConfig`.
    """

    def __init__(self, mode="x", steps=2000, batch_size=128, lr=1e-3, hidden=64, layers=4, heads=4,
                 lam_cls=0.2, label_dropout=0.1, cls_noise_mode="independent", standardize=True,
                 qk_norm=True, cls_token=True, random_state=0):
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.lam_cls = lam_cls
        self.label_dropout = label_dropout
        self.cls_noise_mode = cls_noise_mode
        self.standardize = standardize
        self.qk_norm = qk_norm
        self.cls_token = cls_token
        self.random_state = random_state

    def _configs(self, data: FeatureBatch):
        C, H, W = data.shape
        dcfg = dn.DenoiserConfig(hidden=self.hidden, layers=self.layers, heads=self.heads, channels=C,
                                 height=H, width=W, n_classes=int(data.labels.max()) + 1,
                                 qk_norm=self.qk_norm, cls_token=self.cls_token)
        tcfg = TrainConfig(mode=self.mode, steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           lam_cls=self.lam_cls, label_dropout=self.label_dropout,
                           cls_noise_mode=self.cls_noise_mode, standardize=self.standardize,
                           seed=self.random_state)
        return dcfg, tcfg

    def fit(self, X: FeatureBatch, y=None):
        if not isinstance(X, FeatureBatch):
            raise TypeError("fit expects a FeatureBatch")
        dcfg, tcfg = self._configs(X)
        self.result_ = train(dcfg, tcfg, X)
        self.model_ = self.result_.model()
        self.n_features_in_ = int(np.prod(X.shape))
        return self

    def sample(self, n, labels=None, **kwargs) -> FeatureBatch:
        from .sampler import sample_model

        if not hasattr(self, "model_"):
            raise AttributeError("estimator is not fitted")
        return sample_model(self.model_, n, labels=labels, **kwargs)

    def score_history(self) -> np.ndarray:
        return np.array([m["loss"] for m in self.result_.metrics])


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
