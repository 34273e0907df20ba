"""Synthetic planar scenes with exact ground truth.

A scene is a set of bounded rectangular planes plus a camera trajectory.
Patches are analytic samples of the visible plane regions per frame, so
coplanarity labels, descriptors, and trajectories are all exactly known.
Scenes can also be rendered to depth (and flat-shaded color) images to
exercise the image-based extraction path end to end.

All randomness is drawn from a generator seeded by the scene spec, so a
given spec always produces an identical scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .descriptors import pair_confidence
from .geometry import (
    CameraIntrinsics,
    Frame,
    Plane,
    PlanePatch,
    RigidTransform,
    rotation_from_axis_angle,
)
from .matching import CoplanarPair, KeypointMatch
from .solver import RegistrationProblem, SolverOptions

__all__ = [
    "ScenePlane",
    "SceneSpec",
    "SyntheticScene",
    "generate_scene",
    "render_frame",
    "make_proposals",
    "make_keypoint_matches",
    "problem_from_scene",
    "box_room_planes",
    "corner_planes",
    "single_wall_planes",
]

_PLANE_COLORS = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.60, 0.85],
        [0.35, 0.75, 0.35],
        [0.85, 0.70, 0.25],
        [0.60, 0.40, 0.75],
        [0.45, 0.70, 0.70],
        [0.75, 0.45, 0.55],
        [0.55, 0.55, 0.35],
    ]
)


@dataclass(frozen=True, eq=False)
class ScenePlane:
    """Bounded rectangle: point +/- half_u * u_axis +/- half_v * v_axis."""

    point: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    name: str = ""

    def __post_init__(self) -> None:
        for attr in ("point", "normal", "u_axis", "v_axis"):
            a = np.array(getattr(self, attr), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, attr, a)
        if self.half_u <= 0 or self.half_v <= 0:
            raise ValueError("plane extents must be positive")

    def transformed(self, t: RigidTransform) -> "ScenePlane":
        return ScenePlane(
            point=t.apply(self.point),
            normal=t.rotation @ self.normal,
            u_axis=t.rotation @ self.u_axis,
            v_axis=t.rotation @ self.v_axis,
            half_u=self.half_u,
            half_v=self.half_v,
            name=self.name,
        )


def box_room_planes(w: float, h: float, l: float) -> list[ScenePlane]:
    """Six inward-facing walls of the box [0,w] x [0,h] x [0,l]."""
    cx, cy, cz = w / 2.0, h / 2.0, l / 2.0
    return [
        ScenePlane((cx, 0, cz), (0, 1, 0), (1, 0, 0), (0, 0, 1), cx, cz, "floor"),
        ScenePlane((cx, h, cz), (0, -1, 0), (1, 0, 0), (0, 0, 1), cx, cz, "ceiling"),
        ScenePlane((0, cy, cz), (1, 0, 0), (0, 1, 0), (0, 0, 1), cy, cz, "wall_x0"),
        ScenePlane((w, cy, cz), (-1, 0, 0), (0, 1, 0), (0, 0, 1), cy, cz, "wall_x1"),
        ScenePlane((cx, cy, 0), (0, 0, 1), (1, 0, 0), (0, 1, 0), cx, cy, "wall_z0"),
        ScenePlane((cx, cy, l), (0, 0, -1), (1, 0, 0), (0, 1, 0), cx, cy, "wall_z1"),
    ]


def corner_planes(extent: float = 2.4, depth: float = 3.0) -> list[ScenePlane]:
    """Three mutually orthogonal planes forming a room corner ahead of z=0."""
    e = extent / 2.0
    return [
        ScenePlane((0, e, depth / 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), e, depth / 2, "side"),
        ScenePlane((e, 0, depth / 2), (0, 1, 0), (1, 0, 0), (0, 0, 1), e, depth / 2, "floor"),
        ScenePlane((e, e, depth), (0, 0, -1), (1, 0, 0), (0, 1, 0), e, e, "front"),
    ]


def single_wall_planes(distance: float = 2.5, extent: float = 4.0) -> list[ScenePlane]:
    e = extent / 2.0
    return [
        ScenePlane((e * 0, 0, distance), (0, 0, -1), (1, 0, 0), (0, 1, 0), e, e, "wall")
    ]


@dataclass(frozen=True)
class SceneSpec:
    """Declarative description of a synthetic scene."""

    preset: str = "box"
    room: tuple[float, float, float] = (3.0, 2.4, 4.0)
    n_frames: int = 4
    trajectory: str = "line"  # "static" | "line" | "orbit"
    # None means "use the preset's default path" (resolved per preset so every
    # preset actually keeps its planes in view).
    traj_start: tuple[float, float, float] | None = None
    traj_end: tuple[float, float, float] | None = None
    look_at: tuple[float, float, float] | None = None
    wiggle_deg: float = 2.0
    tile_sizes: tuple[float, ...] = (0.5,)
    samples_per_patch: int = 64
    depth_sigma: float = 0.0
    seed: int = 0
    image_size: tuple[int, int] = (120, 160)  # (height, width)
    fx: float = 120.0
    fy: float = 120.0
    max_range: float = 6.0
    near: float = 0.05

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        return CameraIntrinsics(self.fx, self.fy, (w - 1) / 2.0, (h - 1) / 2.0)


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    planes: list[ScenePlane]
    trajectory: list[RigidTransform]
    patches_by_frame: list[list[PlanePatch]]
    patch_plane: dict[tuple[int, int], int]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def plane_of(self, patch: PlanePatch) -> int:
        return self.patch_plane[patch.key]

    def coplanar(self, a: PlanePatch, b: PlanePatch) -> bool:
        """Exact label: patches sampled from the same scene plane."""
        return self.patch_plane[a.key] == self.patch_plane[b.key]

    def poses_by_frame(self) -> dict[int, RigidTransform]:
        return {i: t for i, t in enumerate(self.trajectory)}

    def all_patches(self) -> list[PlanePatch]:
        return [p for frame in self.patches_by_frame for p in frame]


def _look_rotation(forward: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    u = np.asarray(up, dtype=float)
    x = np.cross(u, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight up/down; pick an arbitrary right vector
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _build_planes(spec: SceneSpec) -> list[ScenePlane]:
    if spec.preset == "box" or spec.preset == "corridor":
        w, h, l = spec.room
        return box_room_planes(w, h, l)
    if spec.preset == "corner":
        return corner_planes()
    if spec.preset == "single_wall":
        return single_wall_planes()
    raise ValueError(f"unknown scene preset: {spec.preset!r}")


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Instantiate planes, trajectory, and per-frame analytic patches.

    A frame from which no plane tile is visible is kept but recorded in
    ``warnings``.  Patch labels are exact: two patches are coplanar iff they
    were sampled from the same scene plane.  Everything is re-expressed in
    the frame-0 gauge (pose 0 = identity), matching the solver's convention.
    """
    if spec.n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(spec.seed)
    planes_world = _build_planes(spec)
    raw = _build_trajectory_raw(spec, np.random.default_rng((spec.seed, 1)))
    t0_inv = raw[0].inverse()
    trajectory = [t0_inv.compose(p) for p in raw]
    planes = [pl.transformed(t0_inv) for pl in planes_world]

    intr = spec.intrinsics()
    h, w = spec.image_size
    k_grid = max(2, int(round(np.sqrt(spec.samples_per_patch))))

    patches_by_frame: list[list[PlanePatch]] = []
    patch_plane: dict[tuple[int, int], int] = {}
    warnings: list[str] = []

    for f, pose in enumerate(trajectory):
        inv = pose.inverse()
        cam_pos = pose.translation
        frame_patches: list[PlanePatch] = []
        pid = 0
        for plane_idx, plane in enumerate(planes):
            for tile_size in spec.tile_sizes:
                nu = max(1, int(np.floor(2 * plane.half_u / tile_size)))
                nv = max(1, int(np.floor(2 * plane.half_v / tile_size)))
                for iu in range(nu):
                    for iv in range(nv):
                        cu = -plane.half_u + (iu + 0.5) * tile_size
                        cv = -plane.half_v + (iv + 0.5) * tile_size
                        if abs(cu) + tile_size / 2 > plane.half_u + 1e-9:
                            continue
                        if abs(cv) + tile_size / 2 > plane.half_v + 1e-9:
                            continue
                        center = plane.point + cu * plane.u_axis + cv * plane.v_axis
                        to_cam = center - cam_pos
                        dist = float(np.linalg.norm(to_cam))
                        if dist < spec.near or dist > spec.max_range:
                            continue
                        if float(plane.normal @ to_cam) > -1e-6:
                            continue  # back side or grazing
                        c_cam = inv.apply(center)
                        if c_cam[2] <= spec.near:
                            continue
                        u_px = intr.fx * c_cam[0] / c_cam[2] + intr.cx
                        v_px = intr.fy * c_cam[1] / c_cam[2] + intr.cy
                        if not (0 <= u_px < w and 0 <= v_px < h):
                            continue
                        patch = _tile_patch(
                            plane,
                            cu,
                            cv,
                            tile_size,
                            k_grid,
                            inv,
                            intr,
                            f,
                            pid,
                            spec,
                            rng,
                        )
                        frame_patches.append(patch)
                        patch_plane[(f, pid)] = plane_idx
                        pid += 1
        if not frame_patches:
            warnings.append(f"frame {f}: no visible plane")
        patches_by_frame.append(frame_patches)

    return SyntheticScene(
        spec=spec,
        planes=planes,
        trajectory=trajectory,
        patches_by_frame=patches_by_frame,
        patch_plane=patch_plane,
        warnings=warnings,
    )


def _trajectory_defaults(spec: SceneSpec):
    """Per-preset camera path defaults: (start, end, look_at-or-None)."""
    if spec.preset == "corner":
        # Walk toward the corner point so all three planes stay in view.
        return (1.7, 1.7, 0.35), (1.3, 1.3, 0.75), (0.0, 0.0, 3.0)
    if spec.preset == "single_wall":
        return (0.0, 0.0, 0.0), (0.3, 0.2, 0.4), None
    if spec.preset == "corridor":
        # Short dolly toward the far end: identity initialisation stays close
        # to every true pose while floor, walls, and end wall remain in view.
        return (1.0, 1.2, 0.4), (1.0, 1.2, 0.8), None
    # Box dolly ends early enough that side walls, floor, and ceiling stay in
    # the frustum of the last frame; a deeper stop leaves far frames seeing
    # only the end wall, whose single normal direction cannot pin their pose.
    return (1.5, 1.2, 0.6), (1.5, 1.2, 1.2), None


def _build_trajectory_raw(spec: SceneSpec, rng: np.random.Generator) -> list[RigidTransform]:
    n = spec.n_frames
    d_start, d_end, d_look = _trajectory_defaults(spec)
    start = np.asarray(spec.traj_start if spec.traj_start is not None else d_start, dtype=float)
    end = np.asarray(spec.traj_end if spec.traj_end is not None else d_end, dtype=float)
    look = spec.look_at if spec.look_at is not None else d_look
    poses: list[RigidTransform] = []
    for k in range(n):
        a = 0.0 if n == 1 else k / (n - 1)
        if spec.trajectory == "static":
            pos = start.copy()
            fwd = np.array([0.0, 0.0, 1.0])
        elif spec.trajectory == "line":
            pos = (1 - a) * start + a * end
            fwd = np.array([0.0, 0.0, 1.0])
        elif spec.trajectory == "orbit":
            w, h, l = spec.room
            center = np.array([w / 2, h / 2, l / 2])
            radius = float(np.linalg.norm(start[[0, 2]] - center[[0, 2]]))
            ang = 2.0 * np.pi * a
            pos = center + np.array([radius * np.cos(ang), 0.0, radius * np.sin(ang)])
            pos[1] = start[1]
            fwd = center - pos
            fwd[1] = 0.0
        else:
            raise ValueError(f"unknown trajectory kind: {spec.trajectory!r}")
        if look is not None and spec.trajectory in ("static", "line"):
            fwd = np.asarray(look, dtype=float) - pos
        if spec.wiggle_deg > 0.0:
            w_rad = np.radians(spec.wiggle_deg)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(-w_rad, w_rad)
            r = rotation_from_axis_angle(axis * angle) @ _look_rotation(fwd)
        else:
            r = _look_rotation(fwd)
        poses.append(RigidTransform(r, pos))
    return poses


def _tile_patch(
    plane: ScenePlane,
    cu: float,
    cv: float,
    tile_size: float,
    k_grid: int,
    inv: RigidTransform,
    intr: CameraIntrinsics,
    frame_id: int,
    pid: int,
    spec: SceneSpec,
    rng: np.random.Generator,
) -> PlanePatch:
    half = tile_size / 2.0
    offs = np.linspace(-half * (1 - 1.0 / k_grid), half * (1 - 1.0 / k_grid), k_grid)
    gu, gv = np.meshgrid(offs, offs)
    pts_world = (
        plane.point
        + (cu + gu.ravel())[:, None] * plane.u_axis
        + (cv + gv.ravel())[:, None] * plane.v_axis
    )
    samples = inv.apply(pts_world)
    if spec.depth_sigma > 0.0:
        rays = samples / np.linalg.norm(samples, axis=1, keepdims=True)
        samples = samples + rays * rng.normal(0.0, spec.depth_sigma, size=samples.shape[0])[:, None]
        centroid = samples.mean(axis=0)
        centered = samples - centroid
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        normal = vt[2]
        if normal @ centroid > 0:
            normal = -normal
        patch_plane = Plane(centroid, normal)
    else:
        normal_cam = inv.rotation @ plane.normal
        point_cam = inv.apply(plane.point + cu * plane.u_axis + cv * plane.v_axis)
        patch_plane = Plane(point_cam, normal_cam)
        centroid = samples.mean(axis=0)

    us = intr.fx * samples[:, 0] / samples[:, 2] + intr.cx
    vs = intr.fy * samples[:, 1] / samples[:, 2] + intr.cy
    h_img, w_img = spec.image_size
    c0 = int(np.clip(np.floor(us.min()), 0, w_img - 1))
    c1 = int(np.clip(np.ceil(us.max()) + 1, 1, w_img))
    r0 = int(np.clip(np.floor(vs.min()), 0, h_img - 1))
    r1 = int(np.clip(np.ceil(vs.max()) + 1, 1, h_img))

    z_mean = float(np.mean(samples[:, 2]))
    view = centroid / np.linalg.norm(centroid)
    cos_t = float(abs(patch_plane.normal @ view))
    px_est = max(1, int(tile_size**2 * intr.fx * intr.fy * max(cos_t, 0.05) / z_mean**2))

    return PlanePatch(
        id=pid,
        frame_id=frame_id,
        plane=patch_plane,
        samples=samples,
        pixel_count=px_est,
        area=tile_size**2,
        centroid=centroid,
        bbox_px=(r0, c0, r1, c1),
    )


def render_frame(
    scene: SyntheticScene,
    frame_idx: int,
    depth_sigma: float = 0.0,
    depth_scale: float | None = None,
    with_color: bool = False,
) -> Frame:
    """Ray-cast the scene planes into a depth (and optional color) image."""
    spec = scene.spec
    intr = spec.intrinsics()
    h, w = spec.image_size
    pose = scene.trajectory[frame_idx]
    inv = pose.inverse()

    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    )
    depth = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3)) if with_color else None

    for idx, plane in enumerate(scene.planes):
        p_c = inv.apply(plane.point)
        n_c = inv.rotation @ plane.normal
        u_c = inv.rotation @ plane.u_axis
        v_c = inv.rotation @ plane.v_axis
        denom = dirs @ n_c
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = (p_c @ n_c) / denom
        valid = (denom < -1e-9) & (t_hit > spec.near) & (t_hit < spec.max_range)
        if not np.any(valid):
            continue
        q = dirs * t_hit[..., None]
        rel = q - p_c
        a = rel @ u_c
        b = rel @ v_c
        valid &= (np.abs(a) <= plane.half_u) & (np.abs(b) <= plane.half_v)
        closer = valid & (t_hit < depth)
        depth[closer] = t_hit[closer]
        if with_color:
            base = _PLANE_COLORS[idx % len(_PLANE_COLORS)]
            checker = ((np.floor(a / 0.25) + np.floor(b / 0.25)) % 2).astype(float)
            shade = 0.75 + 0.25 * checker
            color[closer] = base[None, :] * shade[closer, None]

    depth[~np.isfinite(depth)] = 0.0
    if depth_sigma > 0.0:
        rng = np.random.default_rng((spec.seed, 2, frame_idx))
        noise = rng.normal(0.0, depth_sigma, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 0.0), 0.0)
    if depth_scale is not None:
        depth = np.round(depth * depth_scale) / depth_scale

    return Frame(
        index=frame_idx,
        depth=depth,
        intrinsics=intr,
        color=color,
        pose=pose,
        timestamp=float(frame_idx),
    )


def _stratified_inliers(
    scene: SyntheticScene,
    flat: list[PlanePatch],
    ii: np.ndarray,
    jj: np.ndarray,
    pool: np.ndarray,
    n_in: int,
    plane_ids: np.ndarray,
    frame_ids: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pick n_in genuine pairs that make the planted graph rigid.

    A frame whose constraints all share one normal direction has free motion
    along the others, and a clique of frames linked only among themselves
    can slide as a unit.  So for every frame and every plane-normal family
    it shares with an earlier frame, one genuine pair to that earlier frame
    is planted first (every frame then hangs off the gauge frame along every
    observable direction); the remainder is drawn uniformly.
    """
    if n_in == 0:
        return np.zeros(0, dtype=int)
    fam = np.array([int(np.argmax(np.abs(pl.normal))) for pl in scene.planes])
    pair_fam = fam[plane_ids[ii[pool]]]
    fi, fj = frame_ids[ii[pool]], frame_ids[jj[pool]]
    hi_frame = np.maximum(fi, fj)
    want = {(int(f), int(g)) for f, g in zip(hi_frame, pair_fam)}
    chosen: list[int] = []
    used = np.zeros(pool.size, dtype=bool)
    for k in rng.permutation(pool.size):
        if len(chosen) >= n_in or not want:
            break
        stratum = (int(hi_frame[k]), int(pair_fam[k]))
        if stratum in want:
            want.discard(stratum)
            chosen.append(int(k))
            used[k] = True
    extra = n_in - len(chosen)
    if extra > 0:
        chosen.extend(int(k) for k in rng.choice(np.flatnonzero(~used), size=extra, replace=False))
    return pool[np.array(chosen, dtype=int)]


def make_proposals(
    scene: SyntheticScene,
    count: int,
    outlier_fraction: float,
    rng_seed: int = 0,
    d_f_threshold: float = 2.5,
) -> tuple[list[CoplanarPair], np.ndarray]:
    """Planted proposal set: genuine coplanar pairs plus planted-false ones.

    Exactly round(count * outlier_fraction) pairs connect patches from
    different scene planes.  Descriptor distances are forged to mirror what
    the retrieval stage reports on a planted set: genuinely coplanar pairs
    match almost exactly (below 0.1 of the threshold), while planted-false
    ones are the junk a loosened window just admits (0.75-0.9 of it), so
    their confidence weights are systematically smaller - the regime the
    robust solver is expected to survive.  Genuine pairs are planted so the
    constraint graph is rigid by construction rather than by luck (see
    _stratified_inliers); the remainder is drawn uniformly.  Returns the
    pairs and a boolean inlier mask.
    """
    if not (0.0 <= outlier_fraction <= 1.0):
        raise ValueError("outlier_fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    flat = scene.all_patches()
    frame_ids = np.array([p.frame_id for p in flat])
    plane_ids = np.array([scene.plane_of(p) for p in flat])
    n = len(flat)
    ii, jj = np.triu_indices(n, k=1)
    cross = frame_ids[ii] != frame_ids[jj]
    same_plane = plane_ids[ii] == plane_ids[jj]
    inlier_pool = np.flatnonzero(cross & same_plane)
    outlier_pool = np.flatnonzero(cross & ~same_plane)

    n_out = int(round(count * outlier_fraction))
    n_in = count - n_out
    if n_in > inlier_pool.size:
        raise ValueError(f"scene offers only {inlier_pool.size} coplanar pairs, need {n_in}")
    if n_out > outlier_pool.size:
        raise ValueError(f"scene offers only {outlier_pool.size} false pairs, need {n_out}")

    pick_in = _stratified_inliers(
        scene, flat, ii, jj, inlier_pool, n_in, plane_ids, frame_ids, rng
    )
    pick_out = rng.choice(outlier_pool, size=n_out, replace=False)
    chosen = np.concatenate([pick_in, pick_out])
    labels = np.concatenate([np.ones(n_in, dtype=bool), np.zeros(n_out, dtype=bool)])
    order = rng.permutation(chosen.size)
    chosen, labels = chosen[order], labels[order]

    lo = rng.uniform(0.0, 0.1 * d_f_threshold, size=chosen.size)
    hi = rng.uniform(0.75 * d_f_threshold, 0.9 * d_f_threshold, size=chosen.size)
    d_f = np.where(labels, lo, hi)
    d_fm = float(d_f.max()) if chosen.size else 1.0
    pairs = []
    for k, flat_idx in enumerate(chosen):
        a, b = flat[ii[flat_idx]], flat[jj[flat_idx]]
        if (a.frame_id, a.id) > (b.frame_id, b.id):
            a, b = b, a
        w = 1.0 if d_fm <= 0 else pair_confidence(float(d_f[k]), d_fm)
        pairs.append(CoplanarPair(p=a, q=b, d_f=float(d_f[k]), weight=w))
    return pairs, labels


def make_keypoint_matches(
    scene: SyntheticScene,
    count: int,
    rng_seed: int = 0,
    noise_sigma: float = 0.0,
    outlier_fraction: float = 0.0,
) -> tuple[list[KeypointMatch], np.ndarray]:
    """Ground-truth 3D keypoint matches between random frame pairs."""
    rng = np.random.default_rng(rng_seed)
    n = scene.n_frames
    if n < 2:
        raise ValueError("need at least two frames")
    matches: list[KeypointMatch] = []
    labels = np.ones(count, dtype=bool)
    patches = scene.all_patches()
    n_out = int(round(count * outlier_fraction))
    for k in range(count):
        fi, fj = rng.choice(n, size=2, replace=False)
        anchor = patches[int(rng.integers(len(patches)))]
        world = scene.trajectory[anchor.frame_id].apply(
            anchor.samples[int(rng.integers(anchor.samples.shape[0]))]
        )
        u = scene.trajectory[int(fi)].inverse().apply(world)
        v = scene.trajectory[int(fj)].inverse().apply(world)
        if k < n_out:
            v = v + rng.uniform(-1.0, 1.0, size=3)
            labels[k] = False
        if noise_sigma > 0.0:
            u = u + rng.normal(0.0, noise_sigma, size=3)
            v = v + rng.normal(0.0, noise_sigma, size=3)
        matches.append(KeypointMatch(frame_i=int(fi), frame_j=int(fj), u=u, v=v))
    return matches, labels


def problem_from_scene(
    scene: SyntheticScene,
    pairs: Sequence[CoplanarPair],
    keypoints: Sequence[KeypointMatch] = (),
    options: SolverOptions | None = None,
) -> RegistrationProblem:
    """Registration problem over the scene's frames, initialised at identity."""
    return RegistrationProblem(
        poses=[RigidTransform.identity() for _ in range(scene.n_frames)],
        pairs=list(pairs),
        keypoints=list(keypoints),
        options=options or SolverOptions(),
    )
