"""Planar patch extraction from RGB-D frames.

Turns a depth image into per-pixel normals, grows planar patches by
agglomerative region merging, and packages each patch into the two-scale
crop/mask bundle consumed by descriptor networks.  Everything here is a pure
function of an immutable Frame, so frames can be processed in parallel
without shared state.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    Frame,
    Plane,
    PlanePatch,
    backproject,
    farthest_point_sample,
)

__all__ = [
    "ExtractionParams",
    "PatchInputBundle",
    "estimate_normals",
    "segment_planar_patches",
    "build_patch_inputs",
]

# A 3D plane fit needs 3 points; requiring twice that keeps boundary windows
# (which straddle depth discontinuities and lose half their support) honest.
_MIN_FIT_NEIGHBORS = 6

_SEED_CELL_PX = 4
_LOCAL_SCALE = 1.5
_GLOBAL_SCALE = 5.0
_OUT_SIZE = 224
_PAD_GRAY = 0.5


@dataclass(frozen=True)
class ExtractionParams:
    """Knobs for normal estimation and planar segmentation."""

    normal_window_px: int = 5
    merge_normal_angle_deg: float = 10.0
    merge_plane_rms_m: float = 0.01
    min_valid_pixels: int = 300

    def __post_init__(self) -> None:
        if self.normal_window_px < 3 or self.normal_window_px % 2 == 0:
            raise ValueError("normal_window_px must be an odd integer >= 3")
        if not (0.0 < self.merge_normal_angle_deg < 90.0):
            raise ValueError("merge_normal_angle_deg must lie in (0, 90)")
        if self.merge_plane_rms_m <= 0:
            raise ValueError("merge_plane_rms_m must be positive")
        if self.min_valid_pixels < 1:
            raise ValueError("min_valid_pixels must be >= 1")


@dataclass(frozen=True, eq=False)
class PatchInputBundle:
    """Two-scale network input: 224x224 crops of RGB, depth, normals, mask.

    The local crop frames the patch itself (1.5x its bounding box); the
    global crop shows context (5x).  The local mask is binary; the global
    mask is 1 on the patch and decays linearly to 0 toward the farthest crop
    corner.
    """

    local_rgb: np.ndarray
    local_depth: np.ndarray
    local_normals: np.ndarray
    local_mask: np.ndarray
    global_rgb: np.ndarray
    global_depth: np.ndarray
    global_normals: np.ndarray
    global_mask: np.ndarray


def _window_sums(stack: np.ndarray, radius: int) -> np.ndarray:
    """Box-filter sums over (2r+1)^2 windows, clamped at image borders.

    One integral image per channel; windows shrink at the borders instead of
    wrapping, so border statistics stay unbiased (just lower-count).
    """
    h, w = stack.shape[:2]
    integ = np.zeros((h + 1, w + 1) + stack.shape[2:], dtype=float)
    integ[1:, 1:] = stack.cumsum(axis=0).cumsum(axis=1)
    i = np.arange(h)
    j = np.arange(w)
    i0 = np.clip(i - radius, 0, h)[:, None]
    i1 = np.clip(i + radius + 1, 0, h)[:, None]
    j0 = np.clip(j - radius, 0, w)[None, :]
    j1 = np.clip(j + radius + 1, 0, w)[None, :]
    return integ[i1, j1] + integ[i0, j0] - integ[i0, j1] - integ[i1, j0]


def estimate_normals(frame: Frame, params: ExtractionParams | None = None) -> np.ndarray:
    """Per-pixel unit normals from local plane fits, oriented toward the camera.

    Each pixel's normal is the smallest-scatter direction of the valid
    back-projected points in its normal_window_px neighborhood.  Pixels with
    invalid depth or fewer than six valid neighbors come back as NaN rows.
    """
    params = params or ExtractionParams()
    depth = frame.depth
    valid = depth > 0
    if not np.any(valid):
        raise ValueError("no valid depth")

    pts = backproject(depth, frame.intrinsics)
    pts = np.where(valid[..., None], pts, 0.0)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    stack = np.stack(
        [valid.astype(float), x, y, z, x * x, x * y, x * z, y * y, y * z, z * z],
        axis=-1,
    )
    sums = _window_sums(stack, params.normal_window_px // 2)

    n = sums[..., 0]
    s = sums[..., 1:4]
    good = valid & (n >= _MIN_FIT_NEIGHBORS)
    normals = np.full(depth.shape + (3,), np.nan)
    if not np.any(good):
        return normals

    nn = n[good][:, None, None]
    sv = s[good]
    mom = sums[good][:, 4:]
    mm = np.empty((sv.shape[0], 3, 3))
    mm[:, 0, 0] = mom[:, 0]
    mm[:, 0, 1] = mm[:, 1, 0] = mom[:, 1]
    mm[:, 0, 2] = mm[:, 2, 0] = mom[:, 2]
    mm[:, 1, 1] = mom[:, 3]
    mm[:, 1, 2] = mm[:, 2, 1] = mom[:, 4]
    mm[:, 2, 2] = mom[:, 5]
    scatter = mm - sv[:, :, None] * sv[:, None, :] / nn
    _, vecs = np.linalg.eigh(scatter)
    nrm = vecs[:, :, 0]
    flip = np.einsum("ki,ki->k", nrm, pts[good]) > 0
    nrm[flip] = -nrm[flip]
    normals[good] = nrm
    return normals


class _Region:
    """Mutable accumulator for one growing patch: additive plane-fit stats."""

    __slots__ = ("rid", "count", "s", "m", "cells", "version")

    def __init__(self, rid: int, pts: np.ndarray, cell: tuple[int, int]) -> None:
        self.rid = rid
        self.count = pts.shape[0]
        self.s = pts.sum(axis=0)
        self.m = pts.T @ pts
        self.cells = [cell]
        self.version = 0


def _fit_from_stats(count: int, s: np.ndarray, m: np.ndarray):
    """Centroid, camera-facing normal, and RMS residual of the LS plane."""
    centroid = s / count
    scatter = m - np.outer(s, s) / count
    w, v = np.linalg.eigh(scatter)
    normal = v[:, 0]
    if normal @ centroid > 0:
        normal = -normal
    rms = float(np.sqrt(max(w[0], 0.0) / count))
    return centroid, normal, rms


def _merged_fit(a: _Region, b: _Region):
    return _fit_from_stats(a.count + b.count, a.s + b.s, a.m + b.m)


def segment_planar_patches(
    frame: Frame,
    params: ExtractionParams | None = None,
    samples_per_patch: int = 64,
) -> list[PlanePatch]:
    """Disjoint planar patches grown by greedy seed-cell agglomeration.

    Seeds are 4x4 pixel cells whose own plane fit already meets the RMS
    bound (cells across depth creases never seed).  Adjacent regions merge
    while their normals agree within merge_normal_angle_deg and the merged
    refit stays under merge_plane_rms_m, lowest merged RMS first.  Regions
    with fewer than min_valid_pixels valid pixels are dropped at the end.
    """
    params = params or ExtractionParams()
    depth = frame.depth
    valid = depth > 0
    if not np.any(valid):
        return []

    pts = backproject(depth, frame.intrinsics)
    h, w = depth.shape
    ch, cw = -(-h // _SEED_CELL_PX), -(-w // _SEED_CELL_PX)

    grid: dict[tuple[int, int], int] = {}
    regions: dict[int, _Region] = {}
    for ci in range(ch):
        for cj in range(cw):
            r0, c0 = ci * _SEED_CELL_PX, cj * _SEED_CELL_PX
            sub = valid[r0 : r0 + _SEED_CELL_PX, c0 : c0 + _SEED_CELL_PX]
            if sub.sum() < 3:
                continue
            rows, cols = np.nonzero(sub)
            cell_pts = pts[rows + r0, cols + c0]
            rid = len(regions)
            reg = _Region(rid, cell_pts, (ci, cj))
            _, _, rms = _fit_from_stats(reg.count, reg.s, reg.m)
            if rms > params.merge_plane_rms_m:
                continue
            regions[rid] = reg
            grid[(ci, cj)] = rid

    neighbors: dict[int, set[int]] = {rid: set() for rid in regions}
    for (ci, cj), rid in grid.items():
        for other in (grid.get((ci + 1, cj)), grid.get((ci, cj + 1))):
            if other is not None and other != rid:
                neighbors[rid].add(other)
                neighbors[other].add(rid)

    cos_gate = np.cos(np.radians(params.merge_normal_angle_deg))

    def candidate(a: _Region, b: _Region):
        """Heap entry for merging a and b, or None if the gates reject it."""
        _, na, _ = _fit_from_stats(a.count, a.s, a.m)
        _, nb, _ = _fit_from_stats(b.count, b.s, b.m)
        if float(na @ nb) < cos_gate:
            return None
        _, _, rms = _merged_fit(a, b)
        if rms >= params.merge_plane_rms_m:
            return None
        return (rms, a.rid, b.rid, a.version, b.version)

    heap = []
    seen: set[tuple[int, int]] = set()
    for rid, reg in regions.items():
        for nid in neighbors[rid]:
            key = (min(rid, nid), max(rid, nid))
            if key in seen:
                continue
            seen.add(key)
            entry = candidate(regions[key[0]], regions[key[1]])
            if entry is not None:
                heapq.heappush(heap, entry)

    while heap:
        _, ra, rb, va, vb = heapq.heappop(heap)
        a, b = regions.get(ra), regions.get(rb)
        if a is None or b is None or a.version != va or b.version != vb:
            continue
        a.count += b.count
        a.s = a.s + b.s
        a.m = a.m + b.m
        a.cells.extend(b.cells)
        a.version += 1
        del regions[rb]
        nbrs = (neighbors[ra] | neighbors[rb]) - {ra, rb}
        neighbors[ra] = nbrs
        del neighbors[rb]
        for nid in nbrs:
            neighbors[nid].discard(rb)
            neighbors[nid].add(ra)
            entry = candidate(a, regions[nid])
            if entry is not None:
                heapq.heappush(heap, entry)

    return _patches_from_regions(frame, regions, valid, pts, params, samples_per_patch)


def _patches_from_regions(
    frame: Frame,
    regions: dict[int, _Region],
    valid: np.ndarray,
    pts: np.ndarray,
    params: ExtractionParams,
    samples_per_patch: int,
) -> list[PlanePatch]:
    intr = frame.intrinsics
    survivors = []
    for reg in regions.values():
        if reg.count < params.min_valid_pixels:
            continue
        rows_all, cols_all = [], []
        for ci, cj in reg.cells:
            r0, c0 = ci * _SEED_CELL_PX, cj * _SEED_CELL_PX
            sub = valid[r0 : r0 + _SEED_CELL_PX, c0 : c0 + _SEED_CELL_PX]
            rr, cc = np.nonzero(sub)
            rows_all.append(rr + r0)
            cols_all.append(cc + c0)
        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        survivors.append((reg, rows, cols))

    # Scanline order of each region's first pixel gives reproducible ids.
    survivors.sort(key=lambda t: (int(t[1][0]), int(t[2][0])))

    patches: list[PlanePatch] = []
    for pid, (reg, rows, cols) in enumerate(survivors):
        cloud = pts[rows, cols]
        idx = farthest_point_sample(cloud, samples_per_patch)
        samples = cloud[idx]
        # The stored plane is fit to the samples themselves, so plane and
        # samples stay self-consistent no matter how noisy the full support.
        centroid, normal, _ = _fit_from_stats(samples.shape[0], samples.sum(axis=0), samples.T @ samples)
        rays = cloud / np.linalg.norm(cloud, axis=1, keepdims=True)
        cos_t = np.maximum(np.abs(rays @ normal), 0.05)
        area = float(np.sum(cloud[:, 2] ** 2 / (intr.fx * intr.fy * cos_t)))
        patches.append(
            PlanePatch(
                id=pid,
                frame_id=frame.index,
                plane=Plane(centroid, normal),
                samples=samples,
                pixel_count=int(reg.count),
                area=area,
                centroid=cloud.mean(axis=0),
                bbox_px=(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1),
                pixels=np.stack([rows, cols], axis=1),
            )
        )
    return patches


def _resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    """Resize a float image (2D, or 2D+channels) to size x size."""
    mode = Image.NEAREST if nearest else Image.BILINEAR
    if arr.ndim == 2:
        return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((size, size), mode), dtype=float)
    chans = [
        np.asarray(Image.fromarray(arr[..., k].astype(np.float32), mode="F").resize((size, size), mode), dtype=float)
        for k in range(arr.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def _pad_square(arr: np.ndarray, fill: float) -> np.ndarray:
    """Center-pad to a square with the given fill value."""
    h, w = arr.shape[:2]
    side = max(h, w)
    out = np.full((side, side) + arr.shape[2:], fill, dtype=float)
    r0 = (side - h) // 2
    c0 = (side - w) // 2
    out[r0 : r0 + h, c0 : c0 + w] = arr
    return out


def build_patch_inputs(
    frame: Frame,
    patch: PlanePatch,
    params: ExtractionParams | None = None,
) -> PatchInputBundle:
    """Two-scale 224x224 crop bundle for one patch of one frame.

    Crop rectangles are 1.5x (local) and 5x (global) the patch bounding box,
    centered on it, clamped at the image boundary, padded to squares, and
    resized.  Square padding uses 50% gray for RGB and zeros for depth and
    normals.  The local mask marks patch pixels binarily; the global mask is
    1 on the patch and decays linearly with Euclidean distance to 0 at the
    farthest crop corner.
    """
    r0, c0, r1, c1 = patch.bbox_px
    bh, bw = r1 - r0, c1 - c0
    if bh <= 0 or bw <= 0:
        raise ValueError("patch bbox is empty")

    if patch.pixels is not None:
        support = np.zeros(frame.depth.shape, dtype=float)
        support[patch.pixels[:, 0], patch.pixels[:, 1]] = 1.0
    else:  # analytic patches carry no pixel set; fall back to the bbox
        support = np.zeros(frame.depth.shape, dtype=float)
        support[r0:r1, c0:c1] = 1.0

    normals = frame.normals
    if normals is None:
        normals = estimate_normals(frame, params)
    normals = np.nan_to_num(normals, nan=0.0)
    rgb = frame.color
    if rgb is None:
        rgb = np.full(frame.depth.shape + (3,), _PAD_GRAY)

    h, w = frame.depth.shape
    out: dict[str, np.ndarray] = {}
    for name, scale in (("local", _LOCAL_SCALE), ("global", _GLOBAL_SCALE)):
        rh, rw = int(round(bh * scale)), int(round(bw * scale))
        ir0 = r0 + (bh - rh) // 2
        ic0 = c0 + (bw - rw) // 2
        rr0, rr1 = max(ir0, 0), min(ir0 + rh, h)
        cc0, cc1 = max(ic0, 0), min(ic0 + rw, w)

        def crop(img: np.ndarray, fill: float, nearest: bool = False) -> np.ndarray:
            region = np.array(img[rr0:rr1, cc0:cc1], dtype=float)
            return _resize(_pad_square(region, fill), _OUT_SIZE, nearest=nearest)

        out[f"{name}_rgb"] = crop(rgb, _PAD_GRAY)
        out[f"{name}_depth"] = crop(frame.depth, 0.0)
        out[f"{name}_normals"] = crop(normals, 0.0)
        mask = crop(support, 0.0, nearest=True)
        if name == "global":
            inside = mask > 0.5
            dist = ndimage.distance_transform_edt(~inside)
            dmax = float(dist.max())
            mask = np.where(inside, 1.0, 1.0 - dist / dmax if dmax > 0 else 0.0)
            mask = np.clip(mask, 0.0, 1.0)
        out[f"{name}_mask"] = mask

    return PatchInputBundle(**out)
