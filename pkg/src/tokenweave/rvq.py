"""Synthetic residual vector quantizer producing correlated K-stream token grids.

Stage k of the cascade is a plain codebook fit by k-means on the residual
error left by stages 1..k-1, so streams are correlated and the first stage
carries most of the energy. Everything is deterministic given a seed:
nearest-neighbor ties break toward the lowest centroid index and empty
k-means clusters are reseeded from the farthest points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .patterns import TokenGrid


@dataclass(frozen=True)
class RVQConfig:
    """Quantizer cascade shape. Defaults are desk scale: 4 stages of 64 codes
    over 8-dim latents (production-scale systems run 4 x 2048 at 50 Hz)."""

    K: int = 4
    M: int = 64
    d_latent: int = 8
    frame_rate: float = 50.0

    def __post_init__(self) -> None:
        if self.K < 1 or self.M < 1 or self.d_latent < 1:
            raise ValidationError("RVQConfig requires K, M, d_latent >= 1")


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (M, d_latent)

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ValidationError("codebook centroids must be a 2-D array")
        if not np.isfinite(c).all():
            raise ValidationError("codebook centroids must be finite")
        object.__setattr__(self, "centroids", c)

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class LatentFrames:
    frames: np.ndarray  # (T, d_latent)

    def __post_init__(self) -> None:
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2:
            raise ValidationError("latent frames must be a 2-D array")
        if not np.isfinite(f).all():
            raise ValidationError("latent frames must be finite")
        object.__setattr__(self, "frames", f)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


def synth_latents(T: int, d_latent: int, seed: int, smoothing: float = 0.95) -> LatentFrames:
    """Stationary AR(1) walk: x_t = a x_{t-1} + sqrt(1-a^2) z_t, unit marginal
    variance, lag-1 autocorrelation ~= a."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not 0.0 <= smoothing < 1.0:
        raise ValidationError("smoothing must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T, d_latent))
    frames = np.empty_like(z)
    frames[0] = z[0]
    step_scale = np.sqrt(1.0 - smoothing**2)
    for t in range(1, T):
        frames[t] = smoothing * frames[t - 1] + step_scale * z[t]
    return LatentFrames(frames=frames)


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared distances via expansion; argmin breaks ties toward the lowest index
    d2 = (
        np.sum(points**2, axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)
    )
    return np.argmin(d2, axis=1)


def _kmeans(points: np.ndarray, M: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    T = points.shape[0]
    centroids = points[rng.choice(T, size=M, replace=False)].copy()
    for _ in range(iterations):
        labels = _nearest(points, centroids)
        for j in range(M):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        empty = [j for j in range(M) if not np.any(labels == j)]
        if empty:
            # hand each empty cluster the point currently worst served
            residual = np.linalg.norm(points - centroids[labels], axis=1)
            order = np.argsort(-residual, kind="stable")
            for j, idx in zip(empty, order):
                centroids[j] = points[idx]
    return centroids


def train_codebooks(
    frames: LatentFrames, config: RVQConfig, iterations: int = 25, seed: int = 0
) -> list[Codebook]:
    """Fit the K-stage cascade: stage k runs k-means on the residuals of 1..k-1."""
    if frames.T < config.M:
        raise ValidationError(
            f"insufficient data: {frames.T} frames < {config.M} centroids per stage"
        )
    if frames.d != config.d_latent:
        raise ValidationError(f"frames are {frames.d}-dim, config expects {config.d_latent}")
    rng = np.random.default_rng(seed)
    residual = frames.frames.copy()
    books: list[Codebook] = []
    for _ in range(config.K):
        centroids = _kmeans(residual, config.M, iterations, rng)
        books.append(Codebook(centroids=centroids))
        residual = residual - centroids[_nearest(residual, centroids)]
    return books


def _check_books(codebooks: list[Codebook]) -> tuple[int, int]:
    if not codebooks:
        raise ValidationError("need at least one codebook stage")
    M, d = codebooks[0].M, codebooks[0].d
    for b in codebooks:
        if b.M != M or b.d != d:
            raise ValidationError("all codebook stages must share M and d_latent")
    return M, d


def rvq_encode(frames: LatentFrames, codebooks: list[Codebook]) -> TokenGrid:
    """Greedy residual encoding; the grid holds 1-based token ids."""
    M, d = _check_books(codebooks)
    if frames.d != d:
        raise ValidationError(f"frames are {frames.d}-dim, codebooks are {d}-dim")
    residual = frames.frames.copy()
    tokens = np.empty((frames.T, len(codebooks)), dtype=np.int64)
    for k, book in enumerate(codebooks):
        idx = _nearest(residual, book.centroids)
        tokens[:, k] = idx + 1
        residual -= book.centroids[idx]
    return TokenGrid(tokens=tokens, M=M)


def rvq_decode(grid: TokenGrid, codebooks: list[Codebook]) -> LatentFrames:
    """Reconstruct frames as the sum of the selected centroids per stage."""
    M, d = _check_books(codebooks)
    if grid.K > len(codebooks):
        raise ValidationError(f"grid has {grid.K} streams but only {len(codebooks)} stages given")
    if grid.M > M:
        raise ValidationError(f"grid vocabulary {grid.M} exceeds codebook size {M}")
    out = np.zeros((grid.T, d))
    for k in range(grid.K):
        out += codebooks[k].centroids[grid.tokens[:, k] - 1]
    return LatentFrames(frames=out)


def residual_energy_profile(frames: LatentFrames, codebooks: list[Codebook]) -> np.ndarray:
    """Mean squared residual norm after 0..K stages (entry 0 = raw energy).

    Nonincreasing whenever frames come from the corpus the cascade was fit on;
    out-of-distribution frames get no hard guarantee.
    """
    _, d = _check_books(codebooks)
    if frames.d != d:
        raise ValidationError(f"frames are {frames.d}-dim, codebooks are {d}-dim")
    residual = frames.frames.copy()
    profile = [float(np.mean(np.sum(residual**2, axis=1)))]
    for book in codebooks:
        residual -= book.centroids[_nearest(residual, book.centroids)]
        profile.append(float(np.mean(np.sum(residual**2, axis=1))))
    return np.asarray(profile)


def codebooks_to_json(codebooks: list[Codebook]) -> str:
    import json

    _check_books(codebooks)
    return json.dumps({"stages": [b.centroids.tolist() for b in codebooks]})


def codebooks_from_json(text: str) -> list[Codebook]:
    import json

    try:
        doc = json.loads(text)
        books = [Codebook(centroids=np.asarray(stage, dtype=np.float64)) for stage in doc["stages"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed codebook document: {exc}") from exc
    _check_books(books)
    return books
