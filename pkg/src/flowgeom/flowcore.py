"""Flow-matching math: standardization, time sampling, forward process, losses.

Convention: ``t = 0`` is pure noise and ``t = 1`` is data, so
``z_t = t * z0 + (1 - t) * eps`` and the path velocity is ``v = z0 - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .synthdata import FeatureBatch

VAR_FLOOR = 1e-6
EPS_T = 0.05
T_LO, T_HI = 0.001, 0.999


# --------------------------------------------------------------------------
# standardization


@dataclass
class StandardizationStats:
    mean: np.ndarray  # [C, H, W]
    std: np.ndarray  # [C, H, W]
    cls_mean: np.ndarray  # [C]
    cls_std: np.ndarray  # [C]
    eps: float = VAR_FLOOR

    @property
    def divisor(self) -> np.ndarray:
        return np.sqrt(self.std**2 + self.eps)

    @property
    def cls_divisor(self) -> np.ndarray:
        return np.sqrt(self.cls_std**2 + self.eps)

    @classmethod
    def identity(cls, shape) -> "StandardizationStats":
        """Stats that leave data unchanged up to the variance floor (raw runs)."""
        C = shape[0]
        return cls(np.zeros(shape), np.sqrt(np.full(shape, 1.0 - VAR_FLOOR)),
                   np.zeros(C), np.sqrt(np.full(C, 1.0 - VAR_FLOOR)))

    def arrays(self) -> dict:
        return {"mean": self.mean, "std": self.std, "cls_mean": self.cls_mean, "cls_std": self.cls_std}

    @classmethod
    def from_arrays(cls, d: dict) -> "StandardizationStats":
        return cls(d["mean"], d["std"], d["cls_mean"], d["cls_std"])


def fit_standardization(batch: FeatureBatch) -> StandardizationStats:
    """Per-element population mean and std over the batch axis."""
    if len(batch) < 2:
        raise ValueError("standardization needs at least 2 samples")
    batch.check_finite()
    p = batch.patches.astype(np.float64)
    c = batch.cls.astype(np.float64)
    return StandardizationStats(p.mean(0), p.std(0), c.mean(0), c.std(0))


def _check_shapes(batch: FeatureBatch, stats: StandardizationStats) -> None:
    if batch.patches.shape[1:] != stats.mean.shape or batch.cls.shape[1:] != stats.cls_mean.shape:
        raise ValueError(
            f"batch shape {batch.patches.shape[1:]} does not match stats shape {stats.mean.shape}"
        )


def standardize(batch: FeatureBatch, stats: StandardizationStats) -> FeatureBatch:
    _check_shapes(batch, stats)
    dt = batch.patches.dtype
    p = (batch.patches - stats.mean) / stats.divisor
    c = (batch.cls - stats.cls_mean) / stats.cls_divisor
    return FeatureBatch(p.astype(dt), c.astype(dt), batch.labels)


def destandardize(batch: FeatureBatch, stats: StandardizationStats) -> FeatureBatch:
    _check_shapes(batch, stats)
    dt = batch.patches.dtype
    p = batch.patches * stats.divisor + stats.mean
    c = batch.cls * stats.cls_divisor + stats.cls_mean
    return FeatureBatch(p.astype(dt), c.astype(dt), batch.labels)


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Per-element standardizer over flattened features ``[N, D]``."""

    def __init__(self, eps=VAR_FLOOR):
        self.eps = eps

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ValueError("FeatureStandardizer expects a 2-D array with at least 2 rows")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        self.mean_ = X.mean(0)
        self.scale_ = np.sqrt(X.var(0) + self.eps)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_


# --------------------------------------------------------------------------
# time sampling


def compute_shift(h: int, w: int, d: int) -> float:
    if min(h, w, d) < 1:
        raise ValueError("h, w, d must be >= 1")
    return float(np.sqrt(h * w * d / 4096.0))


def time_shift(X, s: float):
    X = np.asarray(X, dtype=np.float64)
    return X * s / (1.0 + (s - 1.0) * X)


def inverse_time_shift(Xp, s: float):
    Xp = np.asarray(Xp, dtype=np.float64)
    return Xp / (s - (s - 1.0) * Xp)


def snr(t):
    """Signal-to-noise ratio ``t^2 / (1 - t)^2`` of the linear path."""
    t = np.asarray(t, dtype=np.float64)
    return t**2 / (1.0 - t) ** 2


@dataclass(frozen=True)
class TimeSampler:
    shift: float = 1.0
    t_lo: float = T_LO
    t_hi: float = T_HI
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.shift < 1:
            raise ValueError("shift must be >= 1")
        if not 0 < self.t_lo < self.t_hi < 1:
            raise ValueError("need 0 < t_lo < t_hi < 1")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_time(self, n, rng)

    def cdf(self, t):
        """Analytic CDF of the (unclamped) pushforward, for goodness-of-fit tests."""
        # t <= a  <=>  X' >= 1 - a  <=>  X >= inverse_shift(1 - a)
        x = inverse_time_shift(1.0 - np.asarray(t, dtype=np.float64), self.shift)
        with np.errstate(divide="ignore"):
            g = logit(np.clip(x, 0.0, 1.0))
        return norm.sf(g, loc=self.mu, scale=self.sigma)

    def median(self) -> float:
        return float(1.0 - time_shift(expit(self.mu), self.shift))


def sample_time(sampler: TimeSampler, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    X = expit(sampler.mu + sampler.sigma * rng.standard_normal(n))
    t = 1.0 - time_shift(X, sampler.shift)
    return np.clip(t, sampler.t_lo, sampler.t_hi)


# --------------------------------------------------------------------------
# forward process


@dataclass
class FlowSample:
    z_t: np.ndarray
    z_cls_t: np.ndarray
    t: np.ndarray
    v: np.ndarray
    v_cls: np.ndarray
    z0: np.ndarray
    z_cls0: np.ndarray
    eps: np.ndarray
    eps_cls: np.ndarray


def cls_noise(eps: np.ndarray, rng: np.random.Generator, mode: str = "independent") -> np.ndarray:
    if mode == "independent":
        return rng.standard_normal(eps.shape[:2]).astype(eps.dtype)
    if mode == "coupled":
        return eps.mean(axis=(2, 3))
    raise ValueError(f"unknown cls noise mode {mode!r}")


def make_flow_sample(z0, z_cls0, t, rng: np.random.Generator, cls_noise_mode: str = "independent") -> FlowSample:
    z0 = np.asarray(z0)
    z_cls0 = np.asarray(z_cls0)
    t = np.asarray(t, dtype=z0.dtype).reshape(-1)
    if z0.ndim != 4 or z_cls0.shape != z0.shape[:2] or t.shape != (z0.shape[0],):
        raise ValueError("inconsistent shapes for z0, z_cls0 and t")
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("t must lie in the open interval (0, 1)")
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    eps_cls = cls_noise(eps, rng, cls_noise_mode)
    tb = t[:, None, None, None]
    tc = t[:, None]
    return FlowSample(
        z_t=tb * z0 + (1 - tb) * eps,
        z_cls_t=tc * z_cls0 + (1 - tc) * eps_cls,
        t=t,
        v=z0 - eps,
        v_cls=z_cls0 - eps_cls,
        z0=z0,
        z_cls0=z_cls0,
        eps=eps,
        eps_cls=eps_cls,
    )


def _bcast(t, like):
    t = np.asarray(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def velocity_divisor(t, like, eps_t: float = EPS_T):
    return np.maximum(1.0 - _bcast(t, like), np.asarray(eps_t, dtype=like.dtype))


def xpred_to_velocity(z0_hat, z_t, t, eps_t: float = EPS_T):
    """``(z0_hat - z_t) / max(1 - t, eps_t)``; ``t`` broadcasts from the batch axis."""
    z0_hat = np.asarray(z0_hat)
    return (z0_hat - z_t) / velocity_divisor(t, z0_hat, eps_t)


def velocity_to_xpred(v, z_t, t, eps_t: float = EPS_T):
    v = np.asarray(v)
    return z_t + v * velocity_divisor(t, v, eps_t)


def loss_fm(v_hat, v) -> float:
    v_hat, v = np.asarray(v_hat), np.asarray(v)
    if v_hat.shape != v.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v.shape}")
    return float(np.mean((v_hat - v) ** 2))


def loss_total(v_hat, v, v_cls_hat, v_cls, lam: float = 0.2) -> float:
    return loss_fm(v_hat, v) + lam * loss_fm(v_cls_hat, v_cls)


def loss_equivalence_check(z0_hat, z0, z_t, t, eps_t: float = EPS_T) -> tuple[float, float]:
    """Velocity-space MSE versus the ``(1 - t)^-2``-weighted clean-space MSE.

    ``t`` is a scalar or one value per sample; the two returned numbers agree
    whenever no sample has ``1 - t < eps_t``.
    """
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(1.0 - t < eps_t):
        raise ValueError("clamp active: need t <= 1 - eps_t")
    v = (z0 - z_t) / (1.0 - _bcast(t, z0))
    v_hat = xpred_to_velocity(z0_hat, z_t, t, eps_t)
    lhs = float(np.mean((v_hat - v) ** 2))
    w = (1.0 - _bcast(t, z0)) ** -2
    rhs = float(np.mean(w * (z0_hat - z0) ** 2))
    return lhs, rhs
