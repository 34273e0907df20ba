"""Cross-frame correspondence: pair proposal and RANSAC verification.

Putative coplanar pairs come from descriptor distance; keypoint matches come
from an external matcher.  Both are pruned per fragment pair by a fixed-
iteration RANSAC that fits a rigid transform to feature triplets and keeps
either all supporting features or none.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .descriptors import DescriptorProvider, describe_all, pair_confidence
from .geometry import (
    Frame,
    PlanePatch,
    RigidTransform,
    rms_closest_distance,
)

__all__ = [
    "CoplanarPair",
    "KeypointMatch",
    "RansacParams",
    "RansacResult",
    "propose_pairs",
    "estimate_transform_from_triplet",
    "ransac_verify",
    "load_keypoint_matches",
]

DEFAULT_DISTANCE_THRESHOLD = 2.5


@dataclass(frozen=True, eq=False)
class CoplanarPair:
    """Putative coplanarity constraint between patches of two frames.

    ``weight`` is the descriptor confidence, fixed at proposal time;
    ``selection`` is the solver's line-process variable in [0, 1].
    """

    p: PlanePatch
    q: PlanePatch
    d_f: float = 0.0
    weight: float = 1.0
    selection: float = 1.0

    def __post_init__(self) -> None:
        if self.p.frame_id == self.q.frame_id:
            raise ValueError("coplanar pairs must span two distinct frames")
        if not (0.0 < self.weight <= 1.0):
            raise ValueError("weight must lie in (0, 1]")
        if not (0.0 <= self.selection <= 1.0):
            raise ValueError("selection must lie in [0, 1]")

    def with_selection(self, s: float) -> "CoplanarPair":
        return replace(self, selection=float(s))


@dataclass(frozen=True, eq=False)
class KeypointMatch:
    """3D keypoint correspondence: u in frame_i coords matches v in frame_j."""

    frame_i: int
    frame_j: int
    u: np.ndarray
    v: np.ndarray
    selection: float = 1.0

    def __post_init__(self) -> None:
        if self.frame_i == self.frame_j:
            raise ValueError("keypoint matches must span two distinct frames")
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.shape != (3,) or v.shape != (3,):
            raise ValueError("keypoints must be 3-vectors")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    def with_selection(self, s: float) -> "KeypointMatch":
        return replace(self, selection=float(s))


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 1024
    inlier_threshold_m: float = 0.01
    consensus_fraction: float = 0.25
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold_m <= 0:
            raise ValueError("inlier threshold must be positive")
        if not (0.0 < self.consensus_fraction < 1.0):
            raise ValueError("consensus fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class RansacResult:
    accepted: bool
    transform: RigidTransform | None = None
    pairs: tuple[CoplanarPair, ...] = ()
    keypoints: tuple[KeypointMatch, ...] = ()
    support_fraction: float = 0.0


def propose_pairs(
    patches_by_frame: Sequence[Sequence[PlanePatch]] | Mapping[int, Sequence[PlanePatch]],
    provider: DescriptorProvider,
    d_f_threshold: float = DEFAULT_DISTANCE_THRESHOLD,
) -> list[CoplanarPair]:
    """All cross-frame patch pairs with descriptor distance below threshold.

    Pairs are stored once in canonical (frame_p < frame_q) order.  Confidence
    weights are computed against the batch maximum distance of the proposed
    set; if every proposed distance is zero the weights are all 1.
    """
    if isinstance(patches_by_frame, Mapping):
        groups = [patches_by_frame[k] for k in sorted(patches_by_frame)]
    else:
        groups = list(patches_by_frame)
    flat = [p for g in groups for p in g]
    table = describe_all(provider, flat)

    raw: list[tuple[PlanePatch, PlanePatch, float]] = []
    for ai in range(len(flat)):
        a = flat[ai]
        for bi in range(ai + 1, len(flat)):
            b = flat[bi]
            if a.frame_id == b.frame_id:
                continue
            d = float(np.linalg.norm(table[a.key] - table[b.key]))
            if d < d_f_threshold:
                if (a.frame_id, a.id) <= (b.frame_id, b.id):
                    raw.append((a, b, d))
                else:
                    raw.append((b, a, d))

    if not raw:
        return []
    d_fm = max(d for _, _, d in raw)
    pairs = []
    for p, q, d in raw:
        w = 1.0 if d_fm <= 0.0 else pair_confidence(d, d_fm)
        pairs.append(CoplanarPair(p=p, q=q, d_f=d, weight=w, selection=1.0))
    return pairs


_RANK_TOL = 1e-8


def estimate_transform_from_triplet(
    features: Sequence[CoplanarPair | KeypointMatch],
) -> RigidTransform | None:
    """Rigid transform aligning three feature correspondences, or None.

    Plane pairs contribute a normal correspondence to the rotation and one
    offset equation to the translation; keypoint matches contribute centred
    point correspondences and three translation equations.  Returns None when
    the constraint system is rank deficient (e.g. three parallel planes or
    collinear keypoints).
    """
    if len(features) != 3:
        raise ValueError("exactly three features are required")

    src_normals, dst_normals = [], []
    src_pts, dst_pts = [], []
    for f in features:
        if isinstance(f, CoplanarPair):
            src_normals.append(f.p.plane.normal)
            dst_normals.append(f.q.plane.normal)
        else:
            src_pts.append(f.u)
            dst_pts.append(f.v)

    h = np.zeros((3, 3))
    directions = []
    for ns, nd in zip(src_normals, dst_normals):
        h += np.outer(ns, nd)
        directions.append(ns)
    if src_pts:
        sp = np.asarray(src_pts)
        dp = np.asarray(dst_pts)
        sc = sp - sp.mean(axis=0)
        dc = dp - dp.mean(axis=0)
        h += sc.T @ dc
        directions.extend(sc)

    dir_mat = np.asarray(directions)
    sv = np.linalg.svd(dir_mat, compute_uv=False)
    if sv.size < 2 or sv[1] <= _RANK_TOL * max(sv[0], 1.0):
        return None

    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T

    rows, rhs = [], []
    for f in features:
        if isinstance(f, CoplanarPair):
            nd = f.q.plane.normal
            rows.append(nd)
            rhs.append(float(nd @ f.q.plane.point) - float(nd @ (rot @ f.p.plane.point)))
        else:
            rows.extend(np.eye(3))
            rhs.extend(np.asarray(f.v) - rot @ np.asarray(f.u))
    a = np.asarray(rows)
    b = np.asarray(rhs)
    sv_t = np.linalg.svd(a, compute_uv=False)
    if sv_t.size < 3 or sv_t[2] <= _RANK_TOL * max(sv_t[0], 1.0):
        return None
    t, *_ = np.linalg.lstsq(a, b, rcond=None)
    return RigidTransform(rot, t)


def ransac_verify(
    pairs: Sequence[CoplanarPair],
    keypoints: Sequence[KeypointMatch] = (),
    params: RansacParams | None = None,
) -> RansacResult:
    """Verify candidate features between two nodes with fixed-count RANSAC.

    Feature geometry must already be expressed in the two nodes' reference
    frames.  Each iteration fits a transform to a random feature triplet and
    scores support: patch pairs by symmetrised RMS closest-sample distance,
    keypoints by Euclidean distance, both against the inlier threshold.  If
    the best support fraction exceeds the consensus fraction, every
    supporting feature is returned; otherwise everything is discarded.
    """
    prm = params or RansacParams()
    features: list[CoplanarPair | KeypointMatch] = list(pairs) + list(keypoints)
    n = len(features)
    if n < 3:
        return RansacResult(accepted=False)

    # Precompute geometry once; support checks run batched over all pairs
    # sharing a sample-count signature (one einsum per group per iteration).
    groups: dict[tuple[int, int], list[int]] = {}
    for k, p in enumerate(pairs):
        sig = (p.p.samples.shape[0], p.q.samples.shape[0])
        groups.setdefault(sig, []).append(k)
    batched = [
        (
            np.asarray(idxs),
            np.stack([pairs[k].p.samples for k in idxs]),
            np.stack([pairs[k].q.samples for k in idxs]),
        )
        for idxs in groups.values()
    ]
    kp_src = np.asarray([k.u for k in keypoints]).reshape(-1, 3)
    kp_dst = np.asarray([k.v for k in keypoints]).reshape(-1, 3)

    rng = np.random.default_rng(prm.rng_seed)
    best_count = -1
    best_mask: np.ndarray | None = None
    best_transform: RigidTransform | None = None

    thr2 = prm.inlier_threshold_m**2
    for _ in range(prm.iterations):
        idx = rng.choice(n, size=3, replace=False)
        t = estimate_transform_from_triplet([features[int(i)] for i in idx])
        if t is None:
            continue
        mask = np.zeros(n, dtype=bool)
        for idxs, src, dst in batched:
            a = src @ t.rotation.T + t.translation
            d2 = np.sum((a[:, :, None, :] - dst[:, None, :, :]) ** 2, axis=-1)
            ms = 0.5 * (d2.min(axis=2).mean(axis=1) + d2.min(axis=1).mean(axis=1))
            mask[idxs] = ms <= thr2
        if len(keypoints):
            kd2 = np.sum((t.apply(kp_src) - kp_dst) ** 2, axis=-1)
            mask[len(pairs):] = kd2 <= thr2
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_transform = t

    if best_mask is None:
        return RansacResult(accepted=False)
    frac = best_count / n
    if frac <= prm.consensus_fraction:
        return RansacResult(accepted=False, support_fraction=frac)
    kept_pairs = tuple(p for k, p in enumerate(pairs) if best_mask[k])
    kept_kps = tuple(m for k, m in enumerate(keypoints) if best_mask[len(pairs) + k])
    return RansacResult(
        accepted=True,
        transform=best_transform,
        pairs=kept_pairs,
        keypoints=kept_kps,
        support_fraction=frac,
    )


def load_keypoint_matches(path, frames: Mapping[int, Frame]) -> list[KeypointMatch]:
    """Parse ``frame_i u_px u_py frame_j v_px v_py`` rows into 3D matches.

    Pixel endpoints are back-projected through each frame's depth map and
    intrinsics; rows touching invalid depth are dropped.  Malformed rows
    raise with their line number.
    """
    matches: list[KeypointMatch] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                fi, fj = int(parts[0]), int(parts[3])
                ux, uy = float(parts[1]), float(parts[2])
                vx, vy = float(parts[4]), float(parts[5])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if fi not in frames or fj not in frames:
                raise ValueError(f"{path}:{lineno}: unknown frame id")
            u = _backproject_pixel(frames[fi], ux, uy)
            v = _backproject_pixel(frames[fj], vx, vy)
            if u is None or v is None:
                continue
            matches.append(KeypointMatch(frame_i=fi, frame_j=fj, u=u, v=v))
    return matches


def _backproject_pixel(frame: Frame, px: float, py: float) -> np.ndarray | None:
    r, c = int(round(py)), int(round(px))
    h, w = frame.depth.shape
    if not (0 <= r < h and 0 <= c < w):
        return None
    z = float(frame.depth[r, c])
    if z <= 0.0:
        return None
    intr = frame.intrinsics
    return np.array([(px - intr.cx) / intr.fx * z, (py - intr.cy) / intr.fy * z, z])
