"""Rigid transforms, planes, planar patches, and the distances between them.

Everything downstream (correspondence search, the robust solver, the
synthetic harness) is built on the three measurements defined here:

* signed point-to-plane distance of a transformed point,
* the symmetric coplanarity distance ``delta`` between two posed patches,
* the symmetrised RMS closest-point distance between two sample sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "RigidTransform",
    "Plane",
    "PlanePatch",
    "CameraIntrinsics",
    "Frame",
    "point_to_plane_distance",
    "coplanarity_distance",
    "rms_closest_distance",
    "rotation_from_axis_angle",
    "orthonormalize_rotation",
    "rotation_angle_deg",
    "quaternion_from_rotation",
    "rotation_from_quaternion",
    "skew",
    "farthest_point_sample",
    "backproject",
]

_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ x == np.cross(v, x)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Exponential map from an axis-angle 3-vector to a rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        # Second-order series keeps the result orthonormal to machine precision.
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = w / theta
    k = skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def orthonormalize_rotation(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (det forced to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) for a rotation matrix."""
    m = np.asarray(r, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        x = 0.25 * s
        w = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        y = 0.25 * s
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        z = 0.25 * s
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a quaternion (x, y, z, w); normalises first."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n <= 0.0:
        raise ValueError("zero quaternion")
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _frozen_array(a, shape=None, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element mapping local coordinates into a parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = _frozen_array(self.rotation, (3, 3))
        t = _frozen_array(self.translation, (3,))
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, w, t) -> "RigidTransform":
        return cls(rotation_from_axis_angle(np.asarray(w, dtype=float)), t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class Plane:
    """Infinite oriented plane through ``point`` with unit ``normal``."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self) -> None:
        p = _frozen_array(self.point, (3,))
        n = _frozen_array(self.normal, (3,))
        if abs(np.linalg.norm(n) - 1.0) > _ORTHO_TOL:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.point) @ self.normal

    def transformed(self, t: RigidTransform) -> "Plane":
        return Plane(t.apply(self.point), t.rotation @ self.normal)


@dataclass(frozen=True, eq=False)
class PlanePatch:
    """Planar segment of one frame, held in that frame's camera coordinates.

    ``samples`` is a fixed subsampling of the patch surface used for all
    geometric measurements; ``pixels`` (optional) is the (row, col) support
    in the source image for patches that came out of a depth map.
    """

    id: int
    frame_id: int
    plane: Plane
    samples: np.ndarray
    pixel_count: int
    area: float
    centroid: np.ndarray
    bbox_px: tuple[int, int, int, int] = (0, 0, 0, 0)
    pixels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] == 0:
            raise ValueError("samples must be a nonempty (N, 3) array")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "centroid", _frozen_array(self.centroid, (3,)))
        if self.area <= 0.0:
            raise ValueError("patch area must be positive")
        if self.pixels is not None:
            px = np.array(self.pixels, dtype=int)
            px.flags.writeable = False
            object.__setattr__(self, "pixels", px)

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame_id, self.id)

    def transformed(self, t: RigidTransform) -> "PlanePatch":
        """Re-express the patch geometry under ``t`` (ids untouched)."""
        return PlanePatch(
            id=self.id,
            frame_id=self.frame_id,
            plane=self.plane.transformed(t),
            samples=t.apply(self.samples),
            pixel_count=self.pixel_count,
            area=self.area,
            centroid=t.apply(self.centroid),
            bbox_px=self.bbox_px,
            pixels=self.pixels,
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.cx < 0 or self.cy < 0:
            raise ValueError("principal point must be non-negative")


@dataclass(eq=False)
class Frame:
    """One RGB-D frame: depth in meters (0 = invalid), optional color/normals."""

    index: int
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    normals: np.ndarray | None = None
    color: np.ndarray | None = None
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    timestamp: float | None = None

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2D array")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float)
            if self.normals.shape != self.depth.shape + (3,):
                raise ValueError("normals must match depth dimensions")
        if self.color is not None and self.color.shape[:2] != self.depth.shape:
            raise ValueError("color must match depth dimensions")


def backproject(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project a depth image to camera-space points (H, W, 3).

    Invalid pixels (depth <= 0) map to the origin; callers mask on depth.
    """
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    z = np.asarray(depth, dtype=float)
    x = (us - intr.cx) / intr.fx * z
    y = (vs - intr.cy) / intr.fy * z
    return np.stack([x, y, z], axis=-1)


def point_to_plane_distance(t: RigidTransform, v: np.ndarray, plane: Plane) -> np.ndarray:
    """Signed distance of the transformed point(s) ``t(v)`` to ``plane``.

    For a point v in a camera frame posed by t = (R, tr) and a plane with
    point p and unit normal n, this is (R v + tr - p) . n.
    """
    return plane.signed_distance(t.apply(v))


def coplanarity_distance(
    ti: RigidTransform,
    tj: RigidTransform,
    pair: tuple[PlanePatch, PlanePatch],
) -> float:
    """Symmetric residual ``delta`` between two posed patches.

    delta^2 is the mean squared distance of patch p's samples (posed by ti)
    to patch q's plane in the shared frame (posed by tj), plus the same with
    the roles reversed.  It is zero exactly when both patches lie on one
    common plane under the given poses.
    """
    p, q = pair
    if p.samples.shape[0] == 0 or q.samples.shape[0] == 0:
        raise ValueError("degenerate patch: empty sample set")
    plane_q = q.plane.transformed(tj)
    plane_p = p.plane.transformed(ti)
    dp = plane_q.signed_distance(ti.apply(p.samples))
    dq = plane_p.signed_distance(tj.apply(q.samples))
    d2 = float(np.mean(dp**2) + np.mean(dq**2))
    return float(np.sqrt(d2))


def rms_closest_distance(p: PlanePatch, q: PlanePatch, t_rel: RigidTransform) -> float:
    """Symmetrised RMS nearest-sample distance after mapping p by ``t_rel``.

    Forward: each transformed sample of p against its nearest sample of q;
    backward: each sample of q against the transformed set.  Both mean
    squares are averaged before the square root, so swapping (p, q) while
    inverting t_rel leaves the value unchanged.
    """
    a = t_rel.apply(p.samples)
    b = q.samples
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    ms_fwd = float(np.mean(np.min(d2, axis=1)))
    ms_bwd = float(np.mean(np.min(d2, axis=0)))
    return float(np.sqrt(0.5 * (ms_fwd + ms_bwd)))


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    """Indices of a greedy farthest-point subsample (deterministic, seed-free).

    Starts from the point closest to the centroid so the result does not
    depend on input ordering quirks beyond ties.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if count >= n:
        return np.arange(n)
    centroid = pts.mean(axis=0)
    first = int(np.argmin(np.sum((pts - centroid) ** 2, axis=1)))
    chosen = [first]
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return np.asarray(chosen, dtype=int)


def trajectory_positions(poses: Sequence[RigidTransform]) -> np.ndarray:
    """Camera centers of a trajectory as an (N, 3) array."""
    return np.array([p.translation for p in poses], dtype=float)
