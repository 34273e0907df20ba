"""Planar patch extraction: normals, segmentation, and crop bundles.

Oracles: analytic depth renders of known planes (fronto-parallel and tilted),
the synthetic corner scene whose three plane equations are known exactly, and
hand-built PIL resizes for the crop/pad pipeline.
"""

import numpy as np
import pytest
from PIL import Image

from planereg.extraction import (
    ExtractionParams,
    PatchInputBundle,
    build_patch_inputs,
    estimate_normals,
    segment_planar_patches,
)
from planereg.geometry import CameraIntrinsics, Frame, Plane, PlanePatch
from planereg.synthetic import SceneSpec, generate_scene, render_frame

INTR = CameraIntrinsics(120.0, 120.0, 79.5, 59.5)


def plane_depth(normal, point, shape=(120, 160), intr=INTR):
    """Exact ray-cast depth of one infinite plane: z = (n.p0) / (n.dir)."""
    n = np.asarray(normal, float)
    p0 = np.asarray(point, float)
    us, vs = np.meshgrid(np.arange(shape[1], dtype=float), np.arange(shape[0], dtype=float))
    dirs = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1)
    return (n @ p0) / (dirs @ n)


def angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.abs(np.asarray(a) @ np.asarray(b)), -1.0, 1.0)))


class TestExtractionParams:
    def test_defaults(self):
        p = ExtractionParams()
        assert p.normal_window_px == 5
        assert p.merge_normal_angle_deg == 10.0
        assert p.merge_plane_rms_m == 0.01
        assert p.min_valid_pixels == 300

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"normal_window_px": 4},
            {"normal_window_px": 1},
            {"merge_normal_angle_deg": 0.0},
            {"merge_normal_angle_deg": 90.0},
            {"merge_plane_rms_m": 0.0},
            {"min_valid_pixels": 0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            ExtractionParams(**kwargs)


class TestEstimateNormals:
    def test_fronto_parallel_plane(self):
        """Constant z=2 depth: every pixel's normal is (0,0,-1) within 0.5 deg."""
        fr = Frame(index=0, depth=np.full((120, 160), 2.0), intrinsics=INTR)
        nrm = estimate_normals(fr)
        assert nrm.shape == (120, 160, 3)
        assert np.isfinite(nrm).all()
        np.testing.assert_allclose(np.linalg.norm(nrm, axis=-1), 1.0, atol=1e-9)
        worst = angle_deg(nrm.reshape(-1, 3), np.array([0.0, 0.0, -1.0])).max()
        assert worst < 0.5
        # Oriented toward the camera, not just parallel to the axis.
        assert np.all(nrm[..., 2] < 0)

    def test_tilted_plane_matches_analytic_normal(self):
        """Depth of a plane tilted 30 deg about x: fit normals within 1 deg."""
        th = np.radians(30.0)
        n = np.array([0.0, np.sin(th), -np.cos(th)])
        depth = plane_depth(n, (0.0, 0.0, 2.0))
        assert np.all(depth > 0)
        nrm = estimate_normals(Frame(index=0, depth=depth, intrinsics=INTR))
        assert np.isfinite(nrm).all()
        assert angle_deg(nrm.reshape(-1, 3), n).max() < 1.0

    def test_random_depth_total(self):
        """Junk depth with holes must not crash; holes come back NaN."""
        rng = np.random.default_rng(5)
        depth = rng.uniform(0.5, 3.0, size=(40, 50))
        depth[rng.random(depth.shape) < 0.3] = 0.0
        nrm = estimate_normals(Frame(index=0, depth=depth, intrinsics=INTR))
        assert nrm.shape == (40, 50, 3)
        invalid = ~np.isfinite(nrm).all(axis=-1)
        assert invalid.any()
        assert np.all(invalid[depth == 0.0])
        ok = ~invalid
        np.testing.assert_allclose(np.linalg.norm(nrm[ok], axis=-1), 1.0, atol=1e-9)

    def test_all_invalid_raises(self):
        fr = Frame(index=0, depth=np.zeros((20, 20)), intrinsics=INTR)
        with pytest.raises(ValueError, match="no valid depth"):
            estimate_normals(fr)

    def test_isolated_pixels_marked_invalid(self):
        """A lone valid pixel has too few neighbors for a plane fit."""
        depth = np.zeros((30, 30))
        depth[15, 15] = 2.0
        nrm = estimate_normals(Frame(index=0, depth=depth, intrinsics=INTR))
        assert not np.isfinite(nrm[15, 15]).any()


class TestSegmentPlanarPatches:
    def corner_frame(self):
        scene = generate_scene(SceneSpec(preset="corner", n_frames=1, seed=3))
        return scene, render_frame(scene, 0)

    def test_corner_scene_recovers_three_planes(self):
        """Render of 3 orthogonal planes: exactly 3 patches, each within
        1 deg of a scene plane normal and 5 mm of its offset."""
        scene, frame = self.corner_frame()
        patches = segment_planar_patches(frame)
        assert len(patches) == 3
        matched = set()
        for p in patches:
            dists = [
                (angle_deg(pl.normal, p.plane.normal), k)
                for k, pl in enumerate(scene.planes)
            ]
            ang, k = min(dists)
            assert ang < 1.0
            off = abs(float((p.centroid - np.asarray(scene.planes[k].point)) @ np.asarray(scene.planes[k].normal)))
            assert off < 5e-3
            matched.add(k)
        assert matched == {0, 1, 2}

    def test_small_island_discarded(self):
        """200 valid pixels under a 300-pixel floor yields no patches."""
        depth = np.zeros((120, 160))
        depth[50:60, 70:90] = 2.0  # 10 x 20 = 200 pixels
        patches = segment_planar_patches(Frame(index=0, depth=depth, intrinsics=INTR))
        assert patches == []

    def test_lower_floor_keeps_island(self):
        """The same island survives once the pixel floor allows it."""
        depth = np.zeros((120, 160))
        depth[50:60, 70:90] = 2.0
        params = ExtractionParams(min_valid_pixels=100)
        patches = segment_planar_patches(Frame(index=0, depth=depth, intrinsics=INTR), params)
        assert len(patches) == 1
        assert patches[0].pixel_count == 200
        assert angle_deg(patches[0].plane.normal, np.array([0.0, 0.0, 1.0])) < 0.5

    def test_all_invalid_returns_empty(self):
        fr = Frame(index=0, depth=np.zeros((40, 40)), intrinsics=INTR)
        assert segment_planar_patches(fr) == []

    def test_pixel_regions_disjoint_and_valid(self):
        scene, frame = self.corner_frame()
        patches = segment_planar_patches(frame)
        seen = set()
        for p in patches:
            assert p.pixels is not None
            px = {(int(r), int(c)) for r, c in p.pixels}
            assert len(px) == p.pixel_count
            assert not (px & seen)
            seen |= px
            assert np.all(frame.depth[p.pixels[:, 0], p.pixels[:, 1]] > 0)

    def test_pixel_count_meets_floor(self):
        scene, frame = self.corner_frame()
        params = ExtractionParams()
        for p in segment_planar_patches(frame, params):
            assert p.pixel_count >= params.min_valid_pixels

    def test_samples_refit_self_consistency(self):
        """LS plane through each patch's samples reproduces the stored plane."""
        scene, frame = self.corner_frame()
        for p in segment_planar_patches(frame):
            s = p.samples
            c = s.mean(axis=0)
            _, v = np.linalg.eigh((s - c).T @ (s - c))
            n = v[:, 0]
            if n @ c > 0:
                n = -n
            assert np.linalg.norm(n - p.plane.normal) < 1e-6
            assert abs(float((c - p.plane.point) @ p.plane.normal)) < 1e-6

    def test_rms_residual_under_bound(self):
        """Each patch's pixels stay within merge_plane_rms_m of its plane."""
        scene, frame = self.corner_frame()
        params = ExtractionParams()
        from planereg.geometry import backproject

        pts = backproject(frame.depth, frame.intrinsics)
        for p in segment_planar_patches(frame, params):
            cloud = pts[p.pixels[:, 0], p.pixels[:, 1]]
            d = (cloud - p.plane.point) @ p.plane.normal
            assert np.sqrt(np.mean(d**2)) <= params.merge_plane_rms_m

    def test_bbox_covers_pixels(self):
        scene, frame = self.corner_frame()
        for p in segment_planar_patches(frame):
            r0, c0, r1, c1 = p.bbox_px
            assert r0 == p.pixels[:, 0].min() and r1 == p.pixels[:, 0].max() + 1
            assert c0 == p.pixels[:, 1].min() and c1 == p.pixels[:, 1].max() + 1

    def test_noisy_depth_splits_at_crease(self):
        """Two fronto-parallel half-images at different depths segment apart."""
        depth = np.full((120, 160), 1.5)
        depth[:, 80:] = 2.5
        patches = segment_planar_patches(Frame(index=0, depth=depth, intrinsics=INTR))
        assert len(patches) == 2
        zs = sorted(float(p.plane.point[2]) for p in patches)
        assert abs(zs[0] - 1.5) < 1e-6 and abs(zs[1] - 2.5) < 1e-6

    def test_deterministic(self):
        scene, frame = self.corner_frame()
        a = segment_planar_patches(frame)
        b = segment_planar_patches(frame)
        assert [p.id for p in a] == [p.id for p in b]
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.pixels, pb.pixels)
            np.testing.assert_array_equal(pa.samples, pb.samples)


class TestBuildPatchInputs:
    def frame_and_patch(self, bh=40, bw=20, r0=40, c0=70, z=2.0):
        depth = np.zeros((120, 160))
        depth[r0 : r0 + bh, c0 : c0 + bw] = z
        frame = Frame(index=0, depth=depth, intrinsics=INTR)
        params = ExtractionParams(min_valid_pixels=50)
        patches = segment_planar_patches(frame, params)
        assert len(patches) == 1
        return frame, patches[0]

    def test_channel_shapes(self):
        frame, patch = self.frame_and_patch()
        b = build_patch_inputs(frame, patch)
        assert isinstance(b, PatchInputBundle)
        for name in ("local", "global"):
            assert getattr(b, f"{name}_rgb").shape == (224, 224, 3)
            assert getattr(b, f"{name}_depth").shape == (224, 224)
            assert getattr(b, f"{name}_normals").shape == (224, 224, 3)
            assert getattr(b, f"{name}_mask").shape == (224, 224)

    def test_local_mask_binary(self):
        frame, patch = self.frame_and_patch()
        b = build_patch_inputs(frame, patch)
        assert set(np.unique(b.local_mask)) <= {0.0, 1.0}
        assert b.local_mask.max() == 1.0

    def test_global_mask_endpoints(self):
        """1.0 exactly on patch pixels, 0.0 at the farthest crop corner."""
        frame, patch = self.frame_and_patch(bh=30, bw=30, r0=45, c0=65)
        b = build_patch_inputs(frame, patch)
        m = b.global_mask
        assert m[112, 112] == 1.0  # crop is centered on the patch
        corners = np.array([m[0, 0], m[0, -1], m[-1, 0], m[-1, -1]])
        assert m.min() == 0.0
        assert corners.min() == 0.0
        assert np.all((m >= 0.0) & (m <= 1.0))

    def test_global_mask_monotone_along_row(self):
        """Linear decay: values fall monotonically walking away from the patch."""
        frame, patch = self.frame_and_patch(bh=30, bw=30, r0=45, c0=65)
        m = build_patch_inputs(frame, patch).global_mask
        row = m[112, 112:]
        drops = np.diff(row)
        assert np.all(drops <= 1e-12)

    def test_rgb_padding_is_gray_without_color(self):
        frame, patch = self.frame_and_patch()
        b = build_patch_inputs(frame, patch)
        np.testing.assert_allclose(b.local_rgb, 0.5)
        np.testing.assert_allclose(b.global_rgb, 0.5)

    def test_depth_padding_is_zero(self):
        """Global crop of a small patch is mostly out of the support: zeros."""
        frame, patch = self.frame_and_patch(bh=20, bw=20, r0=50, c0=70)
        b = build_patch_inputs(frame, patch)
        assert b.global_depth[0, 0] == 0.0
        assert b.global_depth[112, 112] > 0.0

    def test_whole_image_patch_matches_manual_resize(self):
        """Full-frame patch: local crop equals the square-padded image resized."""
        depth = np.full((120, 160), 2.0)
        frame = Frame(index=0, depth=depth, intrinsics=INTR)
        params = ExtractionParams(min_valid_pixels=50)
        patches = segment_planar_patches(frame, params)
        assert len(patches) == 1
        patch = patches[0]
        assert patch.bbox_px == (0, 0, 120, 160)
        b = build_patch_inputs(frame, patch)

        padded = np.zeros((160, 160), dtype=np.float32)
        padded[20:140, :] = depth.astype(np.float32)
        expect = np.asarray(
            Image.fromarray(padded, mode="F").resize((224, 224), Image.BILINEAR),
            dtype=float,
        )
        np.testing.assert_allclose(b.local_depth, expect, atol=1e-6)
        # Every patch pixel maps inside the central band of ones.
        assert b.local_mask[112, 112] == 1.0

    def test_crop_sizes_follow_bbox_scales(self):
        """A 40x20 bbox maps to 60x30 (local) and 200x100 (global) regions;
        the shorter side picks up the padding, so the pad fraction is
        1 - 30/60 locally and 1 - 100/200 globally along the padded axis."""
        frame, patch = self.frame_and_patch(bh=40, bw=20, r0=40, c0=70)
        b = build_patch_inputs(frame, patch)
        # Local: region 60x30 padded to 60x60 -> the patch occupies 20/60 of
        # the width and 40/60 of the height after resize.
        cols = np.flatnonzero(b.local_depth.max(axis=0) > 0)
        width_frac = (cols.max() - cols.min() + 1) / 224.0
        assert abs(width_frac - (20 / 60)) < 0.05
        rows = np.flatnonzero(b.local_depth.max(axis=1) > 0)
        height_frac = (rows.max() - rows.min() + 1) / 224.0
        assert abs(height_frac - (40 / 60)) < 0.05

    def test_empty_bbox_raises(self):
        frame, _ = self.frame_and_patch()
        bad = PlanePatch(
            id=9,
            frame_id=0,
            plane=Plane(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, -1.0])),
            samples=np.array([[0.0, 0.0, 2.0]]),
            pixel_count=1,
            area=1.0,
            centroid=np.array([0.0, 0.0, 2.0]),
            bbox_px=(5, 5, 5, 9),
        )
        with pytest.raises(ValueError, match="empty"):
            build_patch_inputs(frame, bad)

    def test_color_and_normals_pass_through(self):
        """Supplied color/normals appear in the crops (not the gray/zero fill)."""
        depth = np.zeros((120, 160))
        depth[40:80, 60:100] = 2.0
        color = np.zeros((120, 160, 3))
        color[..., 0] = 1.0  # pure red everywhere
        frame = Frame(index=0, depth=depth, intrinsics=INTR, color=color)
        params = ExtractionParams(min_valid_pixels=50)
        patch = segment_planar_patches(frame, params)[0]
        b = build_patch_inputs(frame, patch)
        assert b.local_rgb[112, 112, 0] == 1.0
        assert b.local_rgb[112, 112, 1] == 0.0
        nz = b.local_normals[112, 112]
        assert abs(nz[2] + 1.0) < 1e-3  # estimated normals face the camera

    def test_deterministic_bundles(self):
        frame, patch = self.frame_and_patch()
        b1 = build_patch_inputs(frame, patch)
        b2 = build_patch_inputs(frame, patch)
        for name in ("local_rgb", "local_depth", "local_normals", "local_mask",
                     "global_rgb", "global_depth", "global_normals", "global_mask"):
            np.testing.assert_array_equal(getattr(b1, name), getattr(b2, name))
