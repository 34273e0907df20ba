"""File formats: depth/color images, trajectories, embeddings, CSV tables.

Conventions:
  * depth PNG: 16-bit grayscale, meters = raw / depth_scale (default 5000),
    raw 0 marks invalid depth;
  * trajectory: text rows ``timestamp tx ty tz qx qy qz qw`` (quaternion xyzw);
  * embeddings: header ``D N`` then N rows ``frame_id patch_id v1 ... vD``.

All writers are deterministic: fixed float formatting, no timestamps beyond
what the caller passes in.
"""

from __future__ import annotations

import csv
import os
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import (
    Plane,
    PlanePatch,
    RigidTransform,
    quaternion_from_rotation,
    rotation_from_quaternion,
)

DEFAULT_DEPTH_SCALE = 5000.0

_F = "{:.17g}".format  # round-trips float64 exactly


class DataError(RuntimeError):
    """Malformed or missing input data."""


# ---------------------------------------------------------------------------
# images


def write_depth(path, depth_m: np.ndarray, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Store a metric depth map as 16-bit PNG; nonpositive values become 0 (invalid)."""
    depth_m = np.asarray(depth_m, dtype=float)
    if depth_m.ndim != 2:
        raise DataError("depth map must be 2D")
    raw = np.round(np.clip(depth_m, 0.0, 65535.0 / depth_scale) * depth_scale)
    raw[~np.isfinite(depth_m)] = 0
    Image.fromarray(raw.astype(np.uint16)).save(path)


def read_depth(path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    """Load a 16-bit depth PNG into meters; raw 0 stays 0.0 (invalid)."""
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise DataError(f"depth image not found: {path}") from None
    raw = np.asarray(img)
    if raw.ndim != 2:
        raise DataError(f"depth image must be single-channel: {path}")
    return raw.astype(float) / depth_scale


def write_color(path, rgb: np.ndarray) -> None:
    """Store an RGB image given as float array in [0, 1], shape (H, W, 3)."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("color image must have shape (H, W, 3)")
    Image.fromarray(np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def read_color(path) -> np.ndarray:
    """Load an 8-bit color image as float RGB in [0, 1]."""
    try:
        img = Image.open(path).convert("RGB")
    except FileNotFoundError:
        raise DataError(f"color image not found: {path}") from None
    return np.asarray(img).astype(float) / 255.0


# ---------------------------------------------------------------------------
# trajectories


def write_trajectory(path, poses: Sequence[RigidTransform],
                     timestamps: Sequence[float] | None = None) -> None:
    """Write poses as ``timestamp tx ty tz qx qy qz qw`` rows (frame index when no timestamps)."""
    if timestamps is None:
        timestamps = [float(i) for i in range(len(poses))]
    if len(timestamps) != len(poses):
        raise DataError("timestamps and poses length mismatch")
    lines = []
    for ts, pose in zip(timestamps, poses):
        q = quaternion_from_rotation(pose.rotation)
        vals = [ts, *pose.translation, *q]
        lines.append(" ".join(_F(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(path) -> tuple[list[float], list[RigidTransform]]:
    """Read a trajectory file; returns (timestamps, poses)."""
    timestamps: list[float] = []
    poses: list[RigidTransform] = []
    try:
        fh = open(path)
    except FileNotFoundError:
        raise DataError(f"trajectory file not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            timestamps.append(vals[0])
            rot = rotation_from_quaternion(np.array(vals[4:8]))
            poses.append(RigidTransform(rotation=rot, translation=np.array(vals[1:4])))
    if not poses:
        raise DataError(f"trajectory file is empty: {path}")
    return timestamps, poses


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings(path, vectors: dict[tuple[int, int], np.ndarray]) -> None:
    """Write descriptor vectors keyed by (frame_id, patch_id); header ``D N``."""
    if not vectors:
        raise DataError("no embeddings to write")
    keys = sorted(vectors)
    dim = len(np.asarray(vectors[keys[0]]).ravel())
    with open(path, "w") as fh:
        fh.write(f"{dim} {len(keys)}\n")
        for frame_id, patch_id in keys:
            vec = np.asarray(vectors[(frame_id, patch_id)], dtype=float).ravel()
            if len(vec) != dim:
                raise DataError(f"embedding ({frame_id},{patch_id}) has dimension "
                                f"{len(vec)}, expected {dim}")
            fh.write(f"{frame_id} {patch_id} " + " ".join(_F(v) for v in vec) + "\n")


def read_embeddings(path) -> tuple[dict[tuple[int, int], np.ndarray], int]:
    """Read an embedding file; returns ({(frame_id, patch_id): vector}, dim)."""
    try:
        fh = open(path)
    except FileNotFoundError:
        raise DataError(f"embedding file not found: {path}") from None
    with fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}:1: expected header 'D N'")
        try:
            dim, count = int(header[0]), int(header[1])
        except ValueError:
            raise DataError(f"{path}:1: non-integer header") from None
        vectors: dict[tuple[int, int], np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != dim + 2:
                raise DataError(f"{path}:{lineno}: expected {dim + 2} fields, "
                                f"got {len(parts)}")
            try:
                key = (int(parts[0]), int(parts[1]))
                vec = np.array([float(p) for p in parts[2:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row") from None
            vectors[key] = vec
    if len(vectors) != count:
        raise DataError(f"{path}: header promised {count} rows, found {len(vectors)}")
    return vectors, dim


# ---------------------------------------------------------------------------
# association files (``ts_depth depth_path ts_rgb rgb_path``)


def read_association(path) -> list[tuple[float, str, float, str]]:
    rows: list[tuple[float, str, float, str]] = []
    try:
        fh = open(path)
    except FileNotFoundError:
        raise DataError(f"association file not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append((float(parts[0]), parts[1], float(parts[2]), parts[3]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric timestamp") from None
    if not rows:
        raise DataError(f"association file is empty: {path}")
    return rows


# ---------------------------------------------------------------------------
# CSV tables


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_F(v) if isinstance(v, float) else v for v in row])


def write_trace_csv(path, trace) -> None:
    _write_csv(path, ["outer", "inner", "mu", "e_total", "e_data_cop", "e_reg_cop",
                      "e_data_kp", "e_reg_kp", "selected_cop", "selected_kp"],
               [[r.outer, r.inner, float(r.mu), float(r.e_total), float(r.e_data_cop),
                 float(r.e_reg_cop), float(r.e_data_kp), float(r.e_reg_kp),
                 r.selected_cop, r.selected_kp] for r in trace])


def write_pairs_csv(path, pairs) -> None:
    _write_csv(path, ["frame_p", "patch_p", "frame_q", "patch_q", "d_f",
                      "weight", "selection"],
               [[p.p.frame_id, p.p.id, p.q.frame_id, p.q.id, float(p.d_f),
                 float(p.weight), float(p.selection)] for p in pairs])


def write_triplets_csv(path, triplets) -> None:
    _write_csv(path, ["anchor_frame", "anchor_patch", "pos_frame", "pos_patch",
                      "neg_frame", "neg_patch"],
               [[t.anchor.frame_id, t.anchor.id, t.positive.frame_id, t.positive.id,
                 t.negative.frame_id, t.negative.id] for t in triplets])


def write_patches_csv(path, patches_by_frame: dict[int, Sequence[PlanePatch]]) -> None:
    rows = []
    for frame_id in sorted(patches_by_frame):
        for patch in patches_by_frame[frame_id]:
            n = patch.plane.normal
            p = patch.plane.point
            rows.append([frame_id, patch.id, patch.pixel_count, float(patch.area),
                         float(n[0]), float(n[1]), float(n[2]),
                         float(p[0]), float(p[1]), float(p[2]),
                         *[int(v) for v in patch.bbox_px]])
    _write_csv(path, ["frame", "patch", "pixels", "area_m2", "nx", "ny", "nz",
                      "px", "py", "pz", "rmin", "cmin", "rmax", "cmax"], rows)


def write_pr_csv(path, points: Sequence[tuple[float, float]], auc: float) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["precision", "recall"])
        for precision, recall in points:
            writer.writerow([_F(float(precision)), _F(float(recall))])
        writer.writerow(["auc", _F(float(auc))])


def write_sweep_csv(path, rows: Sequence[tuple[float, float]]) -> None:
    _write_csv(path, ["outlier_ratio", "ate_rmse_m"],
               [[float(r), float(a)] for r, a in rows])


# ---------------------------------------------------------------------------
# patch input bundles


def export_patch_bundle(directory, patch: PlanePatch, bundle,
                        depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Write the eight bundle channels plus a metadata text file into `directory`."""
    os.makedirs(directory, exist_ok=True)
    for scale in ("local", "global"):
        rgb = getattr(bundle, f"{scale}_rgb")
        depth = getattr(bundle, f"{scale}_depth")
        normals = getattr(bundle, f"{scale}_normals")
        mask = getattr(bundle, f"{scale}_mask")
        write_color(os.path.join(directory, f"{scale}_rgb.png"), rgb)
        write_depth(os.path.join(directory, f"{scale}_depth.png"), depth, depth_scale)
        write_color(os.path.join(directory, f"{scale}_normals.png"),
                    (np.nan_to_num(normals) + 1.0) / 2.0)
        Image.fromarray(np.round(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8)).save(
            os.path.join(directory, f"{scale}_mask.png"))
    n = patch.plane.normal
    p = patch.plane.point
    meta = [
        f"patch_id {patch.id}",
        f"frame_id {patch.frame_id}",
        "bbox " + " ".join(str(int(v)) for v in patch.bbox_px),
        "plane_normal " + " ".join(_F(float(v)) for v in n),
        "plane_point " + " ".join(_F(float(v)) for v in p),
        f"pixel_count {patch.pixel_count}",
        f"area_m2 {_F(float(patch.area))}",
    ]
    with open(os.path.join(directory, "metadata.txt"), "w") as fh:
        fh.write("\n".join(meta) + "\n")
