"""ODE sampling: time grids, Euler/Heun integration, CFG, truncation study, metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import expit, logit

from .flowcore import cls_noise
from .synthdata import FeatureBatch, stream

logger = logging.getLogger(__name__)

SCHEDULES = ("uniform", "cosine", "logsnr", "edm", "power2", "timeshift")


@dataclass(frozen=True)
class TimeGrid:
    kind: str
    K: int
    knots: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.diff(self.knots)
        if self.knots.shape != (self.K + 1,) or np.any(d <= 0):
            raise ValueError(f"{self.kind} grid is not strictly increasing with K+1 knots")

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)


def make_grid(kind: str, K: int, *, eps: float = 1e-3, sigma_min: float = 0.002, sigma_max: float = 80.0,
              rho: float = 7.0, shift: float = 4.9) -> TimeGrid:
    """Knots ``t_0 < ... < t_K`` running from noise (t=0) to data (t=1)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    u = np.arange(K + 1, dtype=np.float64) / K
    if kind == "uniform":
        t = u
        params = {}
    elif kind == "cosine":
        t = 0.5 * (1.0 - np.cos(np.pi * u))
        params = {}
    elif kind == "logsnr":
        if not 0 < eps < 0.5:
            raise ValueError("logsnr eps must lie in (0, 0.5)")
        lo, hi = logit(eps), logit(1.0 - eps)
        t = expit(lo + u * (hi - lo))
        params = {"eps": eps}
    elif kind == "edm":
        if not 0 < sigma_min < sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if rho <= 0:
            raise ValueError("rho must be positive")
        sig = (sigma_max ** (1 / rho) + u * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
        t = 1.0 / (1.0 + sig)
        params = {"sigma_min": sigma_min, "sigma_max": sigma_max, "rho": rho}
    elif kind == "power2":
        t = u**2
        params = {}
    elif kind == "timeshift":
        if shift < 1:
            raise ValueError("shift must be >= 1")
        t = np.sort(1.0 - u * shift / (1.0 + (shift - 1.0) * u))
        params = {"shift": shift}
    else:
        raise ValueError(f"unknown schedule {kind!r}; choose from {SCHEDULES}")
    t = np.clip(t, 0.0, 1.0)
    return TimeGrid(kind, K, t, params)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.7
    scale_cls: float = 3.7
    interval: tuple = (0.1, 0.98)
    enabled: bool = True

    def __post_init__(self):
        lo, hi = self.interval
        if self.scale < 0 or self.scale_cls < 0:
            raise ValueError("guidance scales must be >= 0")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("guidance interval must lie in [0, 1]")
        object.__setattr__(self, "interval", (float(lo), float(hi)))

    def active(self, t: float) -> bool:
        lo, hi = self.interval
        return self.enabled and lo <= t <= hi

    @classmethod
    def off(cls) -> "GuidanceConfig":
        return cls(enabled=False)


def velocity_eval(model, z, z_cls, t: float, labels, guidance: GuidanceConfig | None = None):
    """Guided velocity ``v_u + w (v_c - v_u)`` inside the interval, conditional otherwise."""
    v_c, vc_c = model.velocity(z, z_cls, t, labels)
    if guidance is None or not guidance.active(t):
        return v_c, vc_c
    if guidance.scale == 1.0 and guidance.scale_cls == 1.0:
        return v_c, vc_c
    null = np.full_like(labels, model.null_label)
    v_u, vc_u = model.velocity(z, z_cls, t, null)
    dt = v_c.dtype.type
    return v_u + dt(guidance.scale) * (v_c - v_u), vc_u + dt(guidance.scale_cls) * (vc_c - vc_u)


@dataclass
class Trajectory:
    patches: np.ndarray
    cls: np.ndarray
    labels: np.ndarray
    init_patches: np.ndarray
    init_cls: np.ndarray
    nfe: int

    def batch(self) -> FeatureBatch:
        return FeatureBatch(self.patches, self.cls, self.labels)


def initial_noise(shape, n: int, rng: np.random.Generator, cls_init: str = "independent",
                  sigma: float = 1.0, dtype=np.float32):
    """Patch noise first, then CLS noise, so the patch stream is shared across CLS modes."""
    eps = (sigma * rng.standard_normal((n, *shape))).astype(dtype)
    eps_cls = cls_noise(eps, rng, cls_init)
    if cls_init == "independent":
        eps_cls = (sigma * eps_cls).astype(dtype)
    return eps, eps_cls


def integrate(model, grid: TimeGrid, n: int, labels, rng: np.random.Generator, solver: str = "heun",
              cls_init: str = "independent", guidance: GuidanceConfig | None = None,
              noise=None) -> Trajectory:
    """Integrate from noise at ``grid.knots[0]`` to ``grid.knots[-1]`` in model coordinates.

    ``noise`` optionally supplies ``(eps, eps_cls)`` directly; otherwise it is
    drawn from ``rng``.
    """
    if solver not in ("euler", "heun"):
        raise ValueError(f"unknown solver {solver!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("labels must have one entry per sample")
    if noise is None:
        noise = initial_noise(model.shape, n, rng, cls_init)
    z, zc = (np.array(a, copy=True) for a in noise)
    z0, zc0 = z.copy(), zc.copy()
    nfe = 0
    knots = grid.knots
    for i in range(grid.K):
        t, t_next = float(knots[i]), float(knots[i + 1])
        h = z.dtype.type(t_next - t)
        v, vc = velocity_eval(model, z, zc, t, labels, guidance)
        nfe += 1
        if solver == "euler":
            z = z + h * v
            zc = zc + h * vc
        else:
            zp = z + h * v
            zcp = zc + h * vc
            v2, vc2 = velocity_eval(model, zp, zcp, t_next, labels, guidance)
            nfe += 1
            half = z.dtype.type(0.5) * h
            z = z + half * (v + v2)
            zc = zc + half * (vc + vc2)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(zc))):
            raise FloatingPointError(f"non-finite sampler state at step {i}")
    return Trajectory(z, zc, labels, z0, zc0, nfe)


def balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def sample_model(model, n: int, labels=None, schedule: str = "timeshift", K: int = 50, solver: str = "heun",
                 guidance: GuidanceConfig | None = None, cls_init: str = "independent", seed: int = 0,
                 decode: bool = True, **grid_kw) -> FeatureBatch:
    """Draw ``n`` samples; returns destandardized features unless ``decode`` is False."""
    if labels is None:
        labels = balanced_labels(n, model.null_label)
    grid = make_grid(schedule, K, **grid_kw)
    traj = integrate(model, grid, n, labels, stream(seed, "sample/noise"), solver=solver,
                     cls_init=cls_init, guidance=guidance)
    batch = traj.batch()
    return model.decode(batch) if decode else batch


# --------------------------------------------------------------------------
# truncation study


@dataclass
class TruncationRow:
    K: int
    mean: float
    std: float


def truncation_study(model, K_list=(2, 5, 10, 25, 50), K_ref: int = 125, n: int = 128, seed: int = 0,
                     schedule: str = "uniform", solver: str = "heun", guidance: GuidanceConfig | None = None,
                     cls_init: str = "independent") -> list[TruncationRow]:
    """Per-sample Frobenius distance between K-step and ``K_ref``-step endpoints.

    Every K reuses the same noise and labels; distances are measured in
    destandardized feature space.
    """
    rng = stream(seed, "truncation")
    labels = rng.integers(0, model.null_label, n)
    noise = initial_noise(model.shape, n, rng, cls_init)

    def endpoint(K):
        traj = integrate(model, make_grid(schedule, K), n, labels, rng, solver=solver,
                         cls_init=cls_init, guidance=guidance, noise=noise)
        return model.decode(traj.batch()).patches.astype(np.float64)

    ref = endpoint(K_ref)
    rows = []
    for K in K_list:
        x = ref if K == K_ref else endpoint(K)
        d = np.linalg.norm((x - ref).reshape(n, -1), axis=1)
        rows.append(TruncationRow(int(K), float(d.mean()), float(d.std())))
    return rows


def decay_ratio(rows: list[TruncationRow], k_lo: int = 2, k_hi: int = 50) -> float:
    by = {r.K: r.mean for r in rows}
    return by[k_lo] / by[k_hi]


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# --------------------------------------------------------------------------
# metrics


def _flat(x) -> np.ndarray:
    if isinstance(x, FeatureBatch):
        x = x.flat()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def median_bandwidth(reference) -> float:
    Y = _flat(reference)
    d = pdist(Y)
    bw = float(np.median(d))
    if not bw > 0:
        raise ValueError("reference set has zero median pairwise distance")
    return bw


def mmd_metric(generated, reference, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel ``exp(-d^2 / (2 h^2))``.

    The bandwidth ``h`` defaults to the median pairwise distance of the reference.
    """
    X, Y = _flat(generated), _flat(reference)
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("MMD needs at least 2 samples per set")
    h = median_bandwidth(Y) if bandwidth is None else bandwidth
    g = -0.5 / h**2
    Kxx = np.exp(g * cdist(X, X, "sqeuclidean"))
    Kyy = np.exp(g * cdist(Y, Y, "sqeuclidean"))
    Kxy = np.exp(g * cdist(X, Y, "sqeuclidean"))
    m, n = X.shape[0], Y.shape[0]
    xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


def mmd_null(a, b, n_perm: int = 200, seed: int = 0, bandwidth: float | None = None) -> np.ndarray:
    """Permutation null of the unbiased MMD between the pooled sets' random splits."""
    X, Y = _flat(a), _flat(b)
    h = median_bandwidth(Y) if bandwidth is None else bandwidth
    Z = np.concatenate([X, Y])
    m = X.shape[0]
    K = np.exp(-0.5 / h**2 * cdist(Z, Z, "sqeuclidean"))
    np.fill_diagonal(K, 0.0)
    rng = stream(seed, "mmd-null")
    N = Z.shape[0]
    n = N - m
    out = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(N)
        ix, iy = p[:m], p[m:]
        out[i] = (K[np.ix_(ix, ix)].sum() / (m * (m - 1)) + K[np.ix_(iy, iy)].sum() / (n * (n - 1))
                  - 2.0 * K[np.ix_(ix, iy)].mean())
    return out


def prototype_accuracy(generated, labels, prototypes) -> float:
    """Fraction of samples whose nearest class prototype matches their label."""
    X = _flat(generated)
    P = _flat(prototypes)
    labels = np.asarray(labels)
    if X.shape[0] == 0:
        raise ValueError("no samples")
    pred = np.argmin(cdist(X, P, "sqeuclidean"), axis=1)
    return float(np.mean(pred == labels))


def class_prototypes(batch: FeatureBatch, n_classes: int) -> np.ndarray:
    X = batch.flat()
    return np.stack([X[batch.labels == c].mean(0) for c in range(n_classes)])


@dataclass(frozen=True)
class SamplerConfig:
    solver: str = "heun"
    schedule: str = "timeshift"
    K: int = 50
    n: int = 512
    guidance_scale: float = 3.7
    guidance_scale_cls: float = 3.7
    guidance_interval: tuple = (0.1, 0.98)
    guidance: bool = True
    cls_init: str = "independent"
    shift: float = 4.9
    ema: float = 0.9999

    def __post_init__(self):
        if self.solver not in ("euler", "heun"):
            raise ValueError("solver must be euler or heun")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.K < 1 or self.n < 1:
            raise ValueError("K and n must be >= 1")
        if self.cls_init not in ("independent", "coupled"):
            raise ValueError("cls_init must be independent or coupled")
        object.__setattr__(self, "guidance_interval", tuple(float(x) for x in self.guidance_interval))
        self.guidance_config()

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(self.guidance_scale, self.guidance_scale_cls, self.guidance_interval,
                              self.guidance)

    def grid_kwargs(self) -> dict:
        return {"shift": self.shift} if self.schedule == "timeshift" else {}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance_interval"] = list(self.guidance_interval)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
