"""Manifold-geometry diagnostics for flattened feature sets.

Four axes are measured: covariance spectrum / effective rank, TwoNN intrinsic
dimension, per-coordinate excess kurtosis and the conditioning of the
flow-matching regression covariance ``(1 - t)^2 I + t^2 H``.  A fifth score
measures how far straight chords between samples leave the data manifold.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class Spectrum:
    """Descending eigenvalues of a sample covariance."""

    eigenvalues: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        if total <= 0:
            raise ValueError("spectrum has no positive eigenvalue")
        return self.eigenvalues / total

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass
class KurtosisSummary:
    mean_abs: float
    median_abs: float
    frac_below_half: float
    frac_below_one: float
    n_constant: int = 0


@dataclass
class GeometryReport:
    effective_rank: float
    intrinsic_dim_mean: float
    intrinsic_dim_std: float
    kurtosis: KurtosisSummary
    conditioning_curve: list[tuple[float, float]]
    interpolation_mse: float | None
    sample_count: int
    eigenvalues: list[float] = field(default_factory=list)
    interpolation_curve: list[tuple[float, float]] | None = None
    kurtosis_estimator: str = "population"

    def kappa_at(self, t: float) -> float:
        for tt, k in self.conditioning_curve:
            if abs(tt - t) < 1e-12:
                return k
        raise KeyError(f"t={t} not on the conditioning curve")

    @property
    def interpolation_mid(self) -> float | None:
        """Score at the frame closest to the chord midpoint."""
        if not self.interpolation_curve:
            return None
        return min(self.interpolation_curve, key=lambda p: abs(p[0] - 0.5))[1]

    def to_record(self) -> dict:
        """Flat scalar summary plus the curves, ready for JSONL."""
        rec = asdict(self)
        rec.pop("eigenvalues")
        for k, v in rec.pop("kurtosis").items():
            rec["kurtosis_" + k] = v
        try:
            rec["kappa_0.9"] = self.kappa_at(0.9)
        except KeyError:
            pass
        rec["interpolation_mid"] = self.interpolation_mid
        return rec


def _as_matrix(data, name="data") -> np.ndarray:
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def pca_spectrum(data, k: int | None = None) -> Spectrum:
    """Top-``k`` eigenvalues of the centered sample covariance (N - 1 divisor).

    Uses the N x N Gram matrix when there are fewer samples than features.
    """
    X = _as_matrix(data)
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_spectrum needs at least 2 samples")
    limit = min(n, d)
    k = limit if k is None else k
    if not 1 <= k <= limit:
        raise ValueError(f"k must lie in [1, {limit}], got {k}")
    Xc = X - X.mean(axis=0)
    if n < d:
        gram = Xc @ Xc.T
    else:
        gram = Xc.T @ Xc
    evals = np.linalg.eigvalsh(gram / (n - 1))[::-1]
    evals = np.clip(evals[:k], 0.0, None)
    return Spectrum(evals)


def effective_rank(spec: Spectrum | Sequence[float]) -> float:
    """exp of the Shannon entropy of the normalized eigenvalues."""
    lam = spec.eigenvalues if isinstance(spec, Spectrum) else np.asarray(spec, float)
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if total <= 0:
        raise ValueError("effective rank undefined for an all-zero spectrum")
    p = lam[lam > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def nearest_two(X: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """First and second nearest-neighbour distances, computed in row chunks."""
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    r1 = np.empty(n)
    r2 = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.partition(d2, 1, axis=1)[:, :2]
        r1[start:stop] = np.sqrt(part[:, 0])
        r2[start:stop] = np.sqrt(part[:, 1])
    return r1, r2


def twonn_estimate(X: np.ndarray) -> float:
    """Single TwoNN maximum-likelihood estimate on a set of distinct points."""
    if X.shape[0] < 3:
        raise ValueError("TwoNN needs at least 3 distinct points")
    r1, r2 = nearest_two(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = r2 / r1
    mu = mu[np.isfinite(mu) & (mu > 1.0)]
    if mu.size == 0:
        raise ValueError("no valid neighbour ratio (all mu <= 1)")
    return float(mu.size / np.sum(np.log(mu)))


def _drop_duplicates(X: np.ndarray, warn: bool = True) -> np.ndarray:
    uniq, idx = np.unique(X, axis=0, return_index=True)
    if uniq.shape[0] < X.shape[0]:
        if warn:
            logger.warning("dropped %d duplicate points", X.shape[0] - uniq.shape[0])
        X = X[np.sort(idx)]
    return X


def twonn(data, subsample: int = 5000, bootstraps: int = 10, seed: int = 0) -> tuple[float, float]:
    """Bootstrapped TwoNN intrinsic dimension, returned as ``(mean, std)``.

    When the data has more than ``subsample`` points each bootstrap draws a
    subsample without replacement; otherwise it resamples all points with
    replacement.  Duplicate points are dropped before estimation.
    """
    if subsample < 3:
        raise ValueError("subsample must be >= 3")
    if bootstraps < 1:
        raise ValueError("bootstraps must be >= 1")
    X = _drop_duplicates(_as_matrix(data))
    n = X.shape[0]
    if n < 3:
        raise ValueError("TwoNN needs at least 3 distinct points")
    rng = np.random.default_rng(seed)
    estimates = []
    for b in range(bootstraps):
        if bootstraps == 1 and n <= subsample:
            sub = X
        elif n > subsample:
            sub = X[np.sort(rng.choice(n, subsample, replace=False))]
        else:
            sub = _drop_duplicates(X[rng.integers(0, n, n)], warn=False)
        estimates.append(twonn_estimate(sub))
    est = np.asarray(estimates)
    return float(est.mean()), float(est.std())


def excess_kurtosis(data, return_constant_mask: bool = False):
    """Per-dimension excess kurtosis from population moments.

    Constant dimensions are reported as 0; pass ``return_constant_mask`` to get
    the flag vector as well.
    """
    X = _as_matrix(data)
    if X.shape[0] < 4:
        raise ValueError("excess_kurtosis needs at least 4 samples")
    Xc = X - X.mean(axis=0)
    m2 = np.mean(Xc**2, axis=0)
    m4 = np.mean(Xc**4, axis=0)
    const = m2 <= 1e-300
    kappa = np.zeros(X.shape[1])
    kappa[~const] = m4[~const] / m2[~const] ** 2 - 3.0
    if return_constant_mask:
        return kappa, const
    return kappa


def summarize_kurtosis(kappa: np.ndarray, constant_mask: np.ndarray | None = None) -> KurtosisSummary:
    a = np.abs(np.asarray(kappa, dtype=np.float64))
    n_const = 0
    if constant_mask is not None:
        n_const = int(constant_mask.sum())
        a = a[~constant_mask]
    if a.size == 0:
        raise ValueError("no non-constant dimension to summarize")
    return KurtosisSummary(
        mean_abs=float(a.mean()),
        median_abs=float(np.median(a)),
        frac_below_half=float(np.mean(a < 0.5)),
        frac_below_one=float(np.mean(a < 1.0)),
        n_constant=n_const,
    )


def conditioning_curve(spec: Spectrum | Sequence[float], t_points) -> list[tuple[float, float]]:
    """Condition number of ``(1-t)^2 I + t^2 H`` along ``t``.

    ``lambda_min`` is the smallest retained eigenvalue floored at 1e-12.  At
    ``t = 1`` with a singular spectrum the value is ``inf``.
    """
    lam = spec.eigenvalues if isinstance(spec, Spectrum) else np.sort(np.asarray(spec, float))[::-1]
    lmax = float(lam[0])
    raw_min = float(lam[-1])
    lmin = max(raw_min, EIGEN_FLOOR)
    out = []
    for t in np.asarray(t_points, dtype=np.float64):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        a = (1.0 - t) ** 2
        if t == 1.0 and raw_min <= EIGEN_FLOOR:
            out.append((1.0, float("inf")))
            continue
        out.append((float(t), float((a + t * t * lmax) / (a + t * t * lmin))))
    return out


def interpolation_score(
    pairs,
    steps: int,
    manifold_distance: Callable[[np.ndarray], np.ndarray],
    tolerance: float | None = None,
) -> np.ndarray:
    """Mean squared off-manifold distance of chord frames, one value per frame.

    ``pairs`` is an array ``[P, 2, D]``; ``manifold_distance`` maps an
    ``[M, D]`` array to ``M`` distances.  Frames are ``(1 - t) z_a + t z_b`` for
    ``t = linspace(0, 1, steps)``.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    P = np.asarray(pairs, dtype=np.float64)
    if P.ndim != 3 or P.shape[1] != 2:
        raise ValueError("pairs must have shape [P, 2, D]")
    za, zb = P[:, 0], P[:, 1]
    if tolerance is not None:
        ends = manifold_distance(np.concatenate([za, zb]))
        if np.max(ends) > tolerance:
            raise ValueError(f"endpoint off-manifold by {np.max(ends):.4g} > tolerance {tolerance:.4g}")
    ts = np.linspace(0.0, 1.0, steps)
    scores = np.empty(steps)
    for i, t in enumerate(ts):
        frame = (1.0 - t) * za + t * zb
        d = np.asarray(manifold_distance(frame), dtype=np.float64)
        scores[i] = np.mean(d**2)
    return scores


class TwoNN(BaseEstimator):
    """Bootstrapped TwoNN intrinsic-dimension estimator.

    Attributes after ``fit``: ``dimension_`` and ``dimension_std_``.
    """

    def __init__(self, subsample=5000, bootstraps=10, random_state=0):
        self.subsample = subsample
        self.bootstraps = bootstraps
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=3)
        self.dimension_, self.dimension_std_ = twonn(
            X, self.subsample, self.bootstraps, self.random_state
        )
        self.n_features_in_ = X.shape[1]
        return self


class GeometryAnalyzer(BaseEstimator):
    """Runs every diagnostic on a flattened ``[N, D]`` feature set.

    ``fit`` stores a :class:`GeometryReport` in ``report_``.  The optional
    ``manifold_distance`` callable and ``pairs`` enable the interpolation score.
    """

    def __init__(
        self,
        n_components=512,
        subsample=5000,
        bootstraps=10,
        t_points=tuple(np.round(np.linspace(0.0, 0.99, 100), 10)) + (0.9,),
        interpolation_steps=11,
        random_state=0,
    ):
        self.n_components = n_components
        self.subsample = subsample
        self.bootstraps = bootstraps
        self.t_points = t_points
        self.interpolation_steps = interpolation_steps
        self.random_state = random_state

    def fit(self, X, y=None, pairs=None, manifold_distance=None):
        X = check_array(X, ensure_min_samples=4, dtype=np.float64)
        n, d = X.shape
        spec = pca_spectrum(X, min(self.n_components, n, d))
        if spec.eigenvalues.sum() <= 0:
            raise ValueError("constant dataset: covariance is zero")
        kappa, const = excess_kurtosis(X, return_constant_mask=True)
        dim_mean, dim_std = twonn(X, self.subsample, self.bootstraps, self.random_state)
        ts = sorted(set(float(t) for t in self.t_points))
        curve = conditioning_curve(spec, ts)
        interp = None
        interp_curve = None
        if pairs is not None and manifold_distance is not None:
            scores = interpolation_score(pairs, self.interpolation_steps, manifold_distance)
            ts_i = np.linspace(0.0, 1.0, self.interpolation_steps)
            interp_curve = [(float(a), float(b)) for a, b in zip(ts_i, scores)]
            interp = float(np.mean(scores))
        self.spectrum_ = spec
        self.kurtosis_ = kappa
        self.report_ = GeometryReport(
            effective_rank=effective_rank(spec),
            intrinsic_dim_mean=dim_mean,
            intrinsic_dim_std=dim_std,
            kurtosis=summarize_kurtosis(kappa, const),
            conditioning_curve=curve,
            interpolation_mse=interp,
            sample_count=n,
            eigenvalues=spec.eigenvalues.tolist(),
            interpolation_curve=interp_curve,
        )
        self.n_features_in_ = d
        return self

    def get_report(self) -> GeometryReport:
        check_is_fitted(self, "report_")
        return self.report_


def geometry_report(data, cls_data=None, pairs=None, manifold_distance=None, **params) -> GeometryReport:
    """Functional wrapper around :class:`GeometryAnalyzer`.

    ``cls_data`` (global vectors) is appended column-wise so both streams share
    one centering.
    """
    X = _as_matrix(data)
    if cls_data is not None:
        X = np.concatenate([X, _as_matrix(cls_data, "cls_data")], axis=1)
    return GeometryAnalyzer(**params).fit(X, pairs=pairs, manifold_distance=manifold_distance).report_
