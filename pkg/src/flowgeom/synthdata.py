"""Class-conditional synthetic feature distributions with known manifolds.

Three regimes share one construction and differ in a handful of knobs:

* ``shell``: Gaussian latents, isotropic embedding, smooth curvature and
  per-token norm pinning (``||z[:, h, w]||^2 = C``), mimicking LayerNorm'd
  representation features.
* ``spiky``: Student-t latents, strongly conditioned embedding, kinked (ReLU)
  curvature and per-channel gains spanning two decades of variance.
* ``mid``: in between.

``gmm2d`` is an 8-component ring mixture in 2-D used for sanity runs.

Non-pinned kinds are rescaled to unit mean per-element second moment, the
same energy a pinned token carries, before the channel gains are applied.
Gains are at least 1, so high-gain channels stand above the unit noise scale
the way outlier channels do in real features.
"""

from __future__ import annotations

import functools
import logging
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

KINDS = ("shell", "mid", "spiky", "gmm2d")

PRESETS = {
    "shell": dict(condition=1.0, tail_dof=float("inf"), norm_pinning=True, curvature=1.0,
                  lift="smooth", offset=2.0, channel_gain_span=1.0),
    "mid": dict(condition=10.0, tail_dof=4.0, norm_pinning=False, curvature=0.35,
                lift="kinked", offset=0.0, channel_gain_span=3.0),
    "spiky": dict(condition=300.0, tail_dof=3.0, norm_pinning=False, curvature=0.3,
                  lift="kinked", offset=0.0, channel_gain_span=15.0),
    "gmm2d": dict(condition=1.0, tail_dof=float("inf"), norm_pinning=False, curvature=0.0,
                  lift="smooth", offset=0.0, channel_gain_span=1.0),
}

N_LIFT = 64
CLASS_MEAN_NORM = 3.0
RING_RADIUS = 4.0
RING_STD = 0.5


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, seed-derived random stream; names map to stable integer keys."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "shell"
    channels: int = 8
    height: int = 4
    width: int = 4
    intrinsic_dim: int = 8
    n_classes: int = 10
    condition: float | None = None
    tail_dof: float | None = None
    norm_pinning: bool | None = None
    curvature: float | None = None
    lift: str | None = None
    offset: float | None = None
    channel_gain_span: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "gmm2d":
            return
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("ambient dims must be positive")
        if not 1 <= self.intrinsic_dim <= self.channels * self.height * self.width:
            raise ValueError("intrinsic_dim must lie in [1, C*H*W]")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        cond = self.condition
        if cond is not None and cond < 1:
            raise ValueError("condition target must be >= 1")

    def resolved(self) -> "GeneratorSpec":
        """Copy with every ``None`` knob filled from the kind's preset."""
        if self.kind == "gmm2d":
            base = replace(self, channels=2, height=1, width=1, intrinsic_dim=2, n_classes=8)
        else:
            base = self
        preset = PRESETS[self.kind]
        filled = {k: v for k, v in preset.items() if getattr(base, k) is None}
        out = replace(base, **filled)
        if out.kind != "gmm2d" and out.intrinsic_dim == 1 and out.condition > 1:
            raise ValueError("infeasible condition-number shaping: intrinsic_dim 1 with condition > 1")
        return out

    @property
    def dim(self) -> int:
        return self.channels * self.height * self.width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class FeatureBatch:
    """Patch grids ``[B, C, H, W]``, global vectors ``[B, C]`` and labels ``[B]``."""

    patches: np.ndarray
    cls: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.ndim != 4:
            raise ValueError(f"patches must be [B, C, H, W], got {self.patches.shape}")
        B, C = self.patches.shape[:2]
        if self.cls.shape != (B, C):
            raise ValueError(f"cls must be [{B}, {C}], got {self.cls.shape}")
        if self.labels.shape != (B,):
            raise ValueError(f"labels must be [{B}], got {self.labels.shape}")

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[1:])

    def take(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.patches[idx], self.cls[idx], self.labels[idx])

    def flat(self) -> np.ndarray:
        return self.patches.reshape(len(self), -1)

    def astype(self, dtype) -> "FeatureBatch":
        return FeatureBatch(self.patches.astype(dtype), self.cls.astype(dtype), self.labels)

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.patches)) and np.all(np.isfinite(self.cls))):
            raise ValueError("FeatureBatch contains non-finite values")


class SyntheticManifold:
    """Structural parameters of one generator, drawn once from ``spec.seed``."""

    def __init__(self, spec: GeneratorSpec):
        spec = spec.resolved()
        self.spec = spec
        C, H, W, d = spec.channels, spec.height, spec.width, spec.intrinsic_dim
        D = C * H * W
        rng = stream(spec.seed, "structure")
        if spec.kind == "gmm2d":
            ang = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
            self.means = RING_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            means = rng.standard_normal((spec.n_classes, d))
            norms = np.linalg.norm(means, axis=1, keepdims=True)
            self.means = CLASS_MEAN_NORM * means / np.maximum(norms, 1e-12)
        # condition-number shaping: singular values geometric in [1, condition]
        U, _ = np.linalg.qr(rng.standard_normal((D, d)))
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        sv = np.geomspace(1.0, spec.condition, d) if d > 1 else np.ones(1)
        self.embed = (U * sv) @ V.T * np.sqrt(d / np.sum(sv**2))
        self.lift_w = rng.standard_normal((N_LIFT, d)) / np.sqrt(d)
        self.lift_b = rng.standard_normal(N_LIFT) * 0.5
        Q, _ = np.linalg.qr(rng.standard_normal((D, N_LIFT)))
        self.lift_out = Q
        self.offset = rng.standard_normal(D) * spec.offset
        self.gains = np.geomspace(1.0, spec.channel_gain_span, C)[rng.permutation(C)]
        self.cls_map = rng.standard_normal((C, d)) / np.sqrt(d)
        self.cls_offset = rng.standard_normal(C)
        self._lift_mean = np.zeros(N_LIFT)
        self._scale = 1.0
        calib, _ = self.sample_latent(stream(spec.seed, "calibration"), 4096)
        if spec.curvature:
            self._lift_mean = self._lift(calib).mean(axis=0)
        if not spec.norm_pinning and spec.kind != "gmm2d":
            self._scale = 1.0 / np.sqrt(np.mean(self._embed_unit(calib) ** 2))

    @property
    def is_affine(self) -> bool:
        s = self.spec
        return s.kind == "gmm2d" or (not s.norm_pinning and not s.curvature)

    def sample_latent(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.spec
        labels = rng.permutation(np.arange(n) % s.n_classes)
        d = s.intrinsic_dim
        if s.kind == "gmm2d":
            noise = RING_STD * rng.standard_normal((n, d))
        elif np.isinf(s.tail_dof):
            noise = rng.standard_normal((n, d))
        else:
            noise = rng.standard_t(s.tail_dof, (n, d))
            if s.tail_dof > 2:
                noise *= np.sqrt((s.tail_dof - 2) / s.tail_dof)
        return self.means[labels] + noise, labels

    def _lift(self, u: np.ndarray) -> np.ndarray:
        pre = u @ self.lift_w.T
        if self.spec.lift == "smooth":
            return np.sin(0.5 * pre + 3.0 * self.lift_b) - self._lift_mean
        return np.maximum(pre + self.lift_b, 0.0) - self._lift_mean

    def _embed_unit(self, u: np.ndarray) -> np.ndarray:
        # everything except the global scale and the channel gains
        s = self.spec
        z = u @ self.embed.T + self.offset
        if s.curvature:
            z = z + s.curvature * (self._lift(u) @ self.lift_out.T)
        z = z.reshape(-1, s.channels, s.height, s.width)
        if s.norm_pinning:
            z = z * (np.sqrt(s.channels) / np.linalg.norm(z, axis=1, keepdims=True))
        return z

    def embed_patches(self, u: np.ndarray) -> np.ndarray:
        """Latents ``[n, d]`` to flattened patch features ``[n, C*H*W]``."""
        u = np.atleast_2d(u)
        if self.spec.kind == "gmm2d":
            return u.copy()
        z = self._embed_unit(u) * (self._scale * self.gains[None, :, None, None])
        return z.reshape(u.shape[0], -1)

    def embed_cls(self, u: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(u) @ self.cls_map.T + self.cls_offset
        return np.sqrt(self.spec.channels) * c / np.linalg.norm(c, axis=1, keepdims=True)

    def sample(self, rng: np.random.Generator, n: int, return_latent: bool = False):
        u, labels = self.sample_latent(rng, n)
        s = self.spec
        patches = self.embed_patches(u).reshape(n, s.channels, s.height, s.width)
        batch = FeatureBatch(patches, self.embed_cls(u), labels)
        return (batch, u) if return_latent else batch

    def affine_parts(self) -> tuple[np.ndarray, np.ndarray]:
        """``(M, c)`` with ``z = M u + c`` for affine generators."""
        if not self.is_affine:
            raise ValueError("generator is not affine")
        D = self.spec.dim
        if self.spec.kind == "gmm2d":
            return np.eye(D), np.zeros(D)
        g = np.repeat(self.gains, self.spec.height * self.spec.width) * self._scale
        return g[:, None] * self.embed, g * self.offset


@functools.lru_cache(maxsize=16)
def manifold_for(spec: GeneratorSpec) -> SyntheticManifold:
    return SyntheticManifold(spec)


def generate(spec: GeneratorSpec, n: int) -> FeatureBatch:
    """``n`` samples from ``spec``; deterministic in ``(spec, n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return manifold_for(spec).sample(stream(spec.seed, f"samples/{n}"), n)


class ManifoldOracle:
    """Euclidean distance from feature vectors to a generator's manifold.

    Affine generators use the closed-form projection.  Otherwise the nearest
    point of a cached on-manifold reference sample is found and, with
    ``method="refine"``, polished by least squares over the latent.
    """

    def __init__(self, spec: GeneratorSpec, reference_size: int = 50_000, method: str = "refine"):
        if method not in ("refine", "nn"):
            raise ValueError(f"unknown oracle method {method!r}")
        self.manifold = manifold_for(spec)
        self.spec = self.manifold.spec
        self.method = method
        self.reference_size = reference_size
        self._ref = None
        if self.manifold.is_affine:
            M, c = self.manifold.affine_parts()
            self._q, _ = np.linalg.qr(M)
            self._c = c

    @property
    def closed_form(self) -> bool:
        return self.manifold.is_affine

    def build_reference(self) -> None:
        if self._ref is not None or self.closed_form:
            return
        if self.reference_size < 50_000:
            logger.warning("reference sample of %d points is below 50000", self.reference_size)
        u, _ = self.manifold.sample_latent(stream(self.spec.seed, "reference"), self.reference_size)
        z = self.manifold.embed_patches(u)
        self._ref = (z, u, np.einsum("ij,ij->i", z, z))

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64)).reshape(-1, self.spec.dim)
        if self.closed_form:
            R = Z - self._c
            return np.linalg.norm(R - (R @ self._q) @ self._q.T, axis=1)
        if self._ref is None:
            if self.reference_size <= 0:
                raise RuntimeError("missing reference cache for a non-affine manifold")
            self.build_reference()
        ref_z, ref_u, ref_sq = self._ref
        out = np.empty(Z.shape[0])
        for i, z in enumerate(Z):
            d2 = ref_sq - 2.0 * ref_z @ z + z @ z
            j = int(np.argmin(d2))
            best = float(np.sqrt(max(d2[j], 0.0)))
            if self.method == "refine" and best > 0.0:
                fit = least_squares(lambda u: self.manifold.embed_patches(u)[0] - z, ref_u[j])
                best = min(best, float(np.linalg.norm(fit.fun)))
            out[i] = best
        return out

    def resolution(self, n: int = 64) -> float:
        """Mean distance reported for fresh on-manifold samples."""
        batch = self.manifold.sample(stream(self.spec.seed, "calibrate-oracle"), n)
        return float(np.mean(self(batch.flat())))


def manifold_distance(spec: GeneratorSpec, z, reference: ManifoldOracle | None = None) -> np.ndarray:
    oracle = reference if reference is not None else ManifoldOracle(spec)
    return oracle(z)


def same_class_pairs(batch: FeatureBatch, n_pairs: int, seed: int = 0) -> np.ndarray:
    """``[P, 2, D]`` array of random same-class pairs."""
    rng = stream(seed, "pairs")
    flat = batch.flat()
    classes = [c for c in np.unique(batch.labels) if np.sum(batch.labels == c) >= 2]
    if not classes:
        raise ValueError("no class has two samples")
    out = np.empty((n_pairs, 2, flat.shape[1]))
    for p in range(n_pairs):
        c = classes[rng.integers(len(classes))]
        a, b = rng.choice(np.flatnonzero(batch.labels == c), 2, replace=False)
        out[p] = flat[a], flat[b]
    return out


def train_eval_split(batch: FeatureBatch, fraction: float, seed: int = 0) -> tuple[FeatureBatch, FeatureBatch]:
    """Label-stratified split; each class contributes ``round(fraction * n_c)`` to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = stream(seed, "split")
    train_idx, eval_idx = [], []
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(idx)
        k = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:k])
        eval_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    return batch.take(tr), batch.take(ev)
