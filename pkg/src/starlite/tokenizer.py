"""Multi-scale residual vector quantization.

An image is pooled into a latent feature map by a fixed seeded linear featurizer,
then encoded coarse-to-fine: at each scale the running residual is area-downsampled,
snapped to the nearest codebook vector per cell, bilinearly upsampled back and
subtracted. Decoding sums the upsampled dequantized maps; pixels come back through
the featurizer's pseudo-inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .nn.rng import make_rng

DEFAULT_SIDES = (1, 2, 3, 4, 6, 8, 12, 16, 24, 32)


@dataclass(frozen=True)
class ScaleSchedule:
    """Coarse-to-fine token map sides; starts at 1x1 and ends at the latent grid."""

    sides: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.sides:
            raise ValueError("schedule must have at least one scale")
        if self.sides[0] != (1, 1):
            raise ValueError("schedule must begin with a 1x1 map")
        prev = (0, 0)
        for h, w in self.sides:
            if h < 1 or w < 1:
                raise ValueError("scale sides must be >= 1")
            if h < prev[0] or w < prev[1]:
                raise ValueError("scale sides must be nondecreasing")
            prev = (h, w)

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    @property
    def latent(self) -> tuple[int, int]:
        return self.sides[-1]

    @property
    def total_tokens(self) -> int:
        return sum(h * w for h, w in self.sides)

    def prefix(self, num_scales: int) -> "ScaleSchedule":
        return ScaleSchedule(self.sides[:num_scales])

    def extends(self, other: "ScaleSchedule") -> bool:
        return self.sides[: len(other.sides)] == other.sides

    @classmethod
    def geometric(cls, final_side: int) -> "ScaleSchedule":
        """VAR-style growth ending at a square final_side x final_side grid."""
        if final_side not in DEFAULT_SIDES:
            raise ValueError(f"no geometric schedule ending at side {final_side}")
        sides = tuple((s, s) for s in DEFAULT_SIDES[: DEFAULT_SIDES.index(final_side) + 1])
        return cls(sides)


@dataclass(frozen=True)
class TokenizerConfig:
    dim: int = 16
    vocab_size: int = 256
    patch: int = 4
    pool: int = 2
    feature_seed: int = 7


@dataclass
class Codebook:
    """Shared quantization table: vectors is (V, dim)."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("codebook must be a non-empty (V, dim) table")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TokenPyramid:
    """Per-scale integer token maps, shapes matching a ScaleSchedule."""

    maps: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.maps = tuple(np.ascontiguousarray(m, dtype=np.int32) for m in self.maps)

    def validate(self, schedule: ScaleSchedule, vocab_size: int) -> None:
        if len(self.maps) != schedule.num_scales:
            raise ValueError("pyramid scale count does not match schedule")
        for m, (h, w) in zip(self.maps, schedule.sides):
            if m.shape != (h, w):
                raise ValueError(f"token map shape {m.shape} does not match scale ({h}, {w})")
            if m.size and (m.min() < 0 or m.max() >= vocab_size):
                raise ValueError(f"token index out of range [0, {vocab_size})")

    def flat_tokens(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self.maps])

    def prefix(self, num_scales: int) -> "TokenPyramid":
        return TokenPyramid(self.maps[:num_scales])


@lru_cache(maxsize=256)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Box-overlap averaging weights (n_out, n_in); rows sum to 1."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        lo, hi = o * ratio, (o + 1) * ratio
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, i + 1.0) - max(lo, float(i))
            if overlap > 0:
                w[o, i] = overlap / ratio
    return w.astype(np.float32)


@lru_cache(maxsize=256)
def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-convention linear interpolation weights (n_out, n_in)."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        w[:, 0] = 1.0
        return w.astype(np.float32)
    for o in range(n_out):
        x = (o + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1.0)
        x0 = int(np.floor(x))
        x1 = min(x0 + 1, n_in - 1)
        frac = x - x0
        w[o, x0] += 1.0 - frac
        w[o, x1] += frac
    return w.astype(np.float32)


def _resize(grid: np.ndarray, out_hw: tuple[int, int], kind: str) -> np.ndarray:
    """Separable resize of an (h, w, d) grid to (out_h, out_w, d)."""
    h, w = grid.shape[:2]
    oh, ow = out_hw
    wh = _area_weights(h, oh) if kind == "area" else _bilinear_weights(h, oh)
    ww = _area_weights(w, ow) if kind == "area" else _bilinear_weights(w, ow)
    return np.einsum("ij,jkc,lk->ilc", wh, grid, ww, optimize=True).astype(np.float32)


def resize_area(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    return _resize(grid, out_hw, "area")


def resize_bilinear(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    return _resize(grid, out_hw, "bilinear")


class PatchFeaturizer:
    """Fixed seeded linear map from pooled image patches to latent feature cells."""

    def __init__(self, config: TokenizerConfig = TokenizerConfig()):
        self.config = config
        sub = config.patch // config.pool
        self.in_dim = sub * sub * 3
        rng = make_rng(config.feature_seed, "feature-proj")
        proj64 = rng.normal(0.0, 1.0 / np.sqrt(self.in_dim), size=(self.in_dim, config.dim))
        self.proj = proj64.astype(np.float32)
        self.proj_pinv = np.linalg.pinv(proj64).astype(np.float32)

    def latent_side(self, resolution: int) -> int:
        if resolution % self.config.patch:
            raise ValueError(f"resolution {resolution} not divisible by patch {self.config.patch}")
        return resolution // self.config.patch

    def extract(self, image: np.ndarray) -> np.ndarray:
        """(R, R, 3) image in [-1, 1] -> (R/patch, R/patch, dim) feature map."""
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != image.shape[1] or image.shape[2] != 3:
            raise ValueError(f"expected a square (R, R, 3) image, got {image.shape}")
        r = image.shape[0]
        side = self.latent_side(r)
        cfg = self.config
        pooled = resize_area(image, (r // cfg.pool, r // cfg.pool))
        sub = cfg.patch // cfg.pool
        cells = pooled.reshape(side, sub, side, sub, 3).transpose(0, 2, 1, 3, 4).reshape(side, side, self.in_dim)
        return (cells @ self.proj).astype(np.float32)

    def reconstruct(self, features: np.ndarray) -> np.ndarray:
        """Invert the projection (pseudo-inverse), unpool by replication, clip to [-1, 1]."""
        features = np.asarray(features, dtype=np.float32)
        side = features.shape[0]
        cfg = self.config
        sub = cfg.patch // cfg.pool
        cells = features @ self.proj_pinv
        pooled = cells.reshape(side, side, sub, sub, 3).transpose(0, 2, 1, 3, 4).reshape(side * sub, side * sub, 3)
        image = np.repeat(np.repeat(pooled, cfg.pool, axis=0), cfg.pool, axis=1)
        return np.clip(image, -1.0, 1.0).astype(np.float32)


def nearest_code(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the L2-nearest codebook vector per row; ties go to the lowest index."""
    if codebook.size < 1:
        raise ValueError("empty codebook")
    x = np.asarray(vectors, dtype=np.float32)
    d2 = (x * x).sum(axis=1, keepdims=True) - 2.0 * (x @ codebook.vectors.T) + (codebook.vectors * codebook.vectors).sum(axis=1)
    return d2.argmin(axis=1).astype(np.int32)


def encode(features: np.ndarray, codebook: Codebook, schedule: ScaleSchedule) -> tuple[TokenPyramid, np.ndarray]:
    """Residual-quantize a feature map; returns the pyramid and per-scale residual norms."""
    features = np.asarray(features, dtype=np.float32)
    latent = schedule.latent
    if features.shape[:2] != latent:
        raise ValueError(f"feature grid {features.shape[:2]} does not match schedule latent {latent}")
    residual = features.copy()
    maps = []
    norms = np.empty(schedule.num_scales, dtype=np.float32)
    for s, (h, w) in enumerate(schedule.sides):
        down = resize_area(residual, (h, w))
        idx = nearest_code(down.reshape(-1, down.shape[-1]), codebook).reshape(h, w)
        deq = codebook.vectors[idx]
        residual -= resize_bilinear(deq, latent)
        maps.append(idx)
        norms[s] = np.sqrt(np.float64(residual.astype(np.float64) ** 2).sum())
    return TokenPyramid(tuple(maps)), norms


def decode(pyramid: TokenPyramid, codebook: Codebook, schedule: ScaleSchedule) -> np.ndarray:
    """Sum of bilinearly upsampled dequantized maps at the latent grid."""
    pyramid.validate(schedule, codebook.size)
    latent = schedule.latent
    out = np.zeros(latent + (codebook.dim,), dtype=np.float32)
    for idx in pyramid.maps:
        out += resize_bilinear(codebook.vectors[idx], latent)
    return out


def next_scale_input(pyramid: TokenPyramid, codebook: Codebook, schedule: ScaleSchedule, s: int) -> np.ndarray:
    """Cumulative reconstruction from scales < s, resampled to scale s's grid.

    `s` is 1-based; scale 1 has no previous reconstruction (callers use a learned
    start-content vector there), so valid s is 2..num_scales.
    """
    if not 2 <= s <= schedule.num_scales:
        raise ValueError(f"scale index {s} out of range [2, {schedule.num_scales}]")
    prefix = pyramid.prefix(s - 1)
    # cumulative reconstruction lives on the full latent grid, then is resampled down
    latent = schedule.latent
    out = np.zeros(latent + (codebook.dim,), dtype=np.float32)
    for idx in prefix.maps:
        out += resize_bilinear(codebook.vectors[idx], latent)
    return resize_bilinear(out, schedule.sides[s - 1])


def collect_residual_samples(feature_maps: list[np.ndarray], schedule: ScaleSchedule) -> np.ndarray:
    """Scale-by-scale residual cell vectors of the unquantized pooling hierarchy.

    Each scale's cells are tiled so every scale contributes comparable sample mass;
    otherwise the finest scale dominates and coarse vectors get no centroids.
    """
    latent = schedule.latent
    per_scale: list[list[np.ndarray]] = [[] for _ in schedule.sides]
    for features in feature_maps:
        residual = np.asarray(features, dtype=np.float32).copy()
        for s, (h, w) in enumerate(schedule.sides):
            down = resize_area(residual, (h, w))
            per_scale[s].append(down.reshape(-1, down.shape[-1]))
            residual -= resize_bilinear(down, latent)
    finest = schedule.sides[-1][0] * schedule.sides[-1][1]
    balanced = []
    for (h, w), chunks in zip(schedule.sides, per_scale):
        block = np.concatenate(chunks, axis=0)
        balanced.append(np.tile(block, (max(1, finest // (h * w)), 1)))
    return np.concatenate(balanced, axis=0)


def _kmeans(samples: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Lloyd iterations with a fixed iteration count and seeded init.

    Centroid 0 is initialized at the zero vector (residual quantizers need a cheap
    "no-op" code nearby) and all centroids update freely afterwards.
    """
    uniq = np.unique(samples, axis=0)
    if uniq.shape[0] < k:
        raise ValueError(f"need at least {k} distinct samples, got {uniq.shape[0]}")
    centroids = uniq[rng.permutation(uniq.shape[0])[: k - 1]].astype(np.float32)
    centroids = np.concatenate([np.zeros((1, samples.shape[1]), dtype=np.float32), centroids], axis=0)
    x2 = (samples * samples).sum(axis=1, keepdims=True)
    for _ in range(iters):
        d2 = x2 - 2.0 * (samples @ centroids.T) + (centroids * centroids).sum(axis=1)
        assign = d2.argmin(axis=1)
        mindist = d2[np.arange(len(samples)), assign]
        empties = [c for c in range(k) if not np.any(assign == c)]
        if empties:
            order = np.argsort(-mindist, kind="stable")
            for c, i in zip(empties, order):
                assign[i] = c
        for c in range(k):
            members = samples[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    # duplicate centroids would make nearest-neighbor ties codebook-order dependent
    for c in range(k):
        dup = np.all(centroids[:c] == centroids[c], axis=1)
        if dup.any():
            d2 = x2[:, 0] - 2.0 * (samples @ centroids[c]) + (centroids[c] * centroids[c]).sum()
            centroids[c] = samples[np.argmax(d2)]
    return centroids


def fit_codebook(feature_maps: list[np.ndarray], vocab_size: int, seed: int, schedule: ScaleSchedule) -> Codebook:
    """k-means codebook over residual vectors pooled from every scale."""
    samples = collect_residual_samples(feature_maps, schedule)
    rng = make_rng(seed, "codebook-kmeans")
    return Codebook(_kmeans(samples, vocab_size, rng))
