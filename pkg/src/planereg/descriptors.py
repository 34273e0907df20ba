"""Patch descriptors: distance, training losses, confidence, and providers.

The registration pipeline only needs a ``DescriptorProvider`` that can embed
a patch into a fixed-width vector.  Three providers live here:

* ``ColorHistogramDescriptor`` - a quantised RGB histogram baseline,
* ``OraclePlaneDescriptor`` - ground-truth plane parameters plus seeded noise,
  used by the synthetic harness,
* ``FileDescriptorProvider`` - embeddings precomputed elsewhere and loaded
  from a plain-text file.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .geometry import Frame, PlanePatch, RigidTransform, coplanarity_distance

__all__ = [
    "FocalLossParams",
    "Triplet",
    "DescriptorProvider",
    "ColorHistogramDescriptor",
    "OraclePlaneDescriptor",
    "FileDescriptorProvider",
    "feature_distance",
    "max_pairwise_distance",
    "triplet_focal_loss",
    "pair_confidence",
    "label_coplanar",
    "sample_triplets",
]

DEFAULT_TAU_M = 0.01
CONFIDENCE_SIGMA = 0.6


@dataclass(frozen=True)
class FocalLossParams:
    """Margin ``alpha`` and focusing exponent ``lam`` of the triplet loss."""

    alpha: float = 1.0
    lam: float = 3.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lam < 1:
            raise ValueError("lam must be >= 1")


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: PlanePatch
    positive: PlanePatch
    negative: PlanePatch


class DescriptorProvider(Protocol):
    """Anything that can embed a patch into a fixed-width float vector."""

    dim: int

    def describe(self, patch: PlanePatch) -> np.ndarray: ...


def feature_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two descriptor vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"descriptor dimensions differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def max_pairwise_distance(vectors: Sequence[np.ndarray]) -> float:
    """Largest Euclidean distance over all pairs of the given vectors."""
    if len(vectors) < 2:
        return 0.0
    m = np.asarray(vectors, dtype=float)
    d2 = np.sum((m[:, None, :] - m[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(np.max(d2)))


def triplet_focal_loss(d_pos: float, d_neg: float, params: FocalLossParams | None = None) -> float:
    """max(0, (alpha - (d_neg - d_pos)) / alpha) ** lam.

    Zero once the negative is at least ``alpha`` farther than the positive;
    the exponent concentrates gradient on hard triplets.
    """
    p = params or FocalLossParams()
    margin = d_neg - d_pos
    base = max(0.0, (p.alpha - margin) / p.alpha)
    return float(base**p.lam)


def pair_confidence(d_f: float, d_fm: float, sigma: float = CONFIDENCE_SIGMA) -> float:
    """exp(-d_f^2 / (sigma^2 * d_fm^2)) with d_fm the batch-max distance."""
    if d_fm <= 0.0:
        raise ValueError("d_fm must be positive")
    if d_f < 0.0:
        raise ValueError("d_f must be non-negative")
    return float(np.exp(-(d_f**2) / (sigma**2 * d_fm**2)))


def label_coplanar(
    p: PlanePatch,
    q: PlanePatch,
    pose_p: RigidTransform,
    pose_q: RigidTransform,
    tau: float = DEFAULT_TAU_M,
) -> bool:
    """True iff the posed coplanarity residual of (p, q) is below ``tau``."""
    return coplanarity_distance(pose_p, pose_q, (p, q)) < tau


class OraclePlaneDescriptor:
    """Descriptor = world-frame plane parameters (n, n.p) plus seeded noise.

    With ``noise_sigma`` 0 two patches get identical descriptors exactly when
    they lie on the same oriented world plane, which makes this the reference
    provider for the synthetic harness.
    """

    dim = 4

    def __init__(
        self,
        poses: Mapping[int, RigidTransform],
        noise_sigma: float = 0.0,
        seed: int = 0,
    ) -> None:
        self._poses = dict(poses)
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)

    def describe(self, patch: PlanePatch) -> np.ndarray:
        pose = self._poses[patch.frame_id]
        plane = patch.plane.transformed(pose)
        vec = np.concatenate([plane.normal, [float(plane.normal @ plane.point)]])
        if self.noise_sigma > 0.0:
            rng = np.random.default_rng((self.seed, patch.frame_id, patch.id))
            vec = vec + rng.normal(0.0, self.noise_sigma, size=4)
        return vec


class ColorHistogramDescriptor:
    """Quantised RGB histogram over the patch's pixel support (L1-normalised)."""

    def __init__(self, frames: Mapping[int, Frame], bins_per_channel: int = 4) -> None:
        self._frames = dict(frames)
        self.bins = int(bins_per_channel)
        self.dim = self.bins**3

    def describe(self, patch: PlanePatch) -> np.ndarray:
        if patch.pixels is None:
            raise ValueError("patch has no pixel support; cannot build a color histogram")
        frame = self._frames[patch.frame_id]
        if frame.color is None:
            raise ValueError(f"frame {patch.frame_id} has no color image")
        rows, cols = patch.pixels[:, 0], patch.pixels[:, 1]
        rgb = np.asarray(frame.color, dtype=float)[rows, cols]
        idx = np.clip((rgb * self.bins).astype(int), 0, self.bins - 1)
        flat = (idx[:, 0] * self.bins + idx[:, 1]) * self.bins + idx[:, 2]
        hist = np.bincount(flat, minlength=self.dim).astype(float)
        total = hist.sum()
        return hist / total if total > 0 else hist


class FileDescriptorProvider:
    """Embeddings loaded from a text file; see ``read_embeddings``."""

    def __init__(self, table: Mapping[tuple[int, int], np.ndarray], dim: int) -> None:
        self._table = dict(table)
        self.dim = int(dim)

    @classmethod
    def from_file(cls, path) -> "FileDescriptorProvider":
        from .fileio import read_embeddings

        table, dim = read_embeddings(path)
        return cls(table, dim)

    def describe(self, patch: PlanePatch) -> np.ndarray:
        try:
            return self._table[patch.key]
        except KeyError:
            raise ValueError(
                f"no embedding for frame {patch.frame_id} patch {patch.id}"
            ) from None


def sample_triplets(
    patches_by_frame: Sequence[Sequence[PlanePatch]],
    poses: Sequence[RigidTransform],
    count: int,
    rng_seed: int = 0,
    tau: float = DEFAULT_TAU_M,
) -> list[Triplet]:
    """Draw ``count`` (anchor, positive, negative) triplets from a posed sequence.

    Positives are cross-frame patches whose coplanarity residual under the
    given poses is below ``tau``; negatives are cross-frame patches above it.
    Anchors are drawn uniformly from patches having both kinds of partner, so
    every emitted anchor contributes one positive and one negative per draw.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(rng_seed)
    flat: list[PlanePatch] = [p for frame in patches_by_frame for p in frame]
    if len(flat) < 3:
        raise ValueError("insufficient positives: need at least 3 patches")

    delta_cache: dict[tuple[tuple[int, int], tuple[int, int]], bool] = {}

    def is_coplanar(a: PlanePatch, b: PlanePatch) -> bool:
        key = (a.key, b.key) if a.key <= b.key else (b.key, a.key)
        hit = delta_cache.get(key)
        if hit is None:
            hit = label_coplanar(a, b, poses[a.frame_id], poses[b.frame_id], tau)
            delta_cache[key] = hit
        return hit

    by_index = {i: p for i, p in enumerate(flat)}
    candidates = {
        i: [j for j, q in by_index.items() if q.frame_id != p.frame_id]
        for i, p in by_index.items()
    }

    triplets: list[Triplet] = []
    attempts = 0
    max_attempts = 50 * count + 100
    while len(triplets) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                "insufficient positives: could not balance anchors with both "
                "coplanar and non-coplanar partners"
            )
        a_idx = int(rng.integers(len(flat)))
        anchor = flat[a_idx]
        others = candidates[a_idx]
        if not others:
            continue
        order = rng.permutation(len(others))
        pos = next((flat[others[k]] for k in order if is_coplanar(anchor, flat[others[k]])), None)
        if pos is None:
            continue
        order = rng.permutation(len(others))
        neg = next(
            (flat[others[k]] for k in order if not is_coplanar(anchor, flat[others[k]])), None
        )
        if neg is None:
            continue
        triplets.append(Triplet(anchor, pos, neg))
    return triplets


def describe_all(
    provider: DescriptorProvider, patches: Iterable[PlanePatch]
) -> dict[tuple[int, int], np.ndarray]:
    """Embed every patch once, keyed by (frame_id, patch_id)."""
    return {p.key: np.asarray(provider.describe(p), dtype=float) for p in patches}
