"""Robust alternating solver: closed-form selections, Jacobians, monotonicity,
pose recovery, stability analysis, and the coplanarity-only variant.

Key oracles:
  * selection update vs. brute-force grid search of s*rho + mu*psi(s);
  * analytic pose Jacobian vs. central finite differences;
  * every accepted step re-checked against a from-scratch objective evaluation.
"""

import numpy as np
import pytest

from planereg.geometry import (
    RigidTransform,
    rotation_from_axis_angle,
    rotation_angle_deg,
)
from planereg.matching import CoplanarPair, KeypointMatch
from planereg.solver import (
    RegistrationProblem,
    SolverError,
    SolverOptions,
    alignment_covariance,
    estimate_stability,
    objective_value,
    penalty,
    selection_closed_form,
    solve,
    solve_coplanarity_only,
    update_poses,
    update_selections,
)
from planereg.synthetic import (
    SceneSpec,
    generate_scene,
    make_keypoint_matches,
    make_proposals,
    problem_from_scene,
)

from test_geometry import grid_on_plane, make_patch


def perturbed_poses(scene, rng, rot_deg=10.0, trans_m=0.10):
    """Ground-truth poses with a fixed-magnitude disturbance (frame 0 kept)."""
    poses = [RigidTransform.identity()]
    for pose in scene.trajectory[1:]:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dr = rotation_from_axis_angle(axis * np.deg2rad(rot_deg))
        dt = rng.normal(size=3)
        dt *= trans_m / np.linalg.norm(dt)
        poses.append(RigidTransform(dr @ pose.rotation, pose.translation + dt))
    return poses


def pose_errors(estimated, truth):
    """Max relative-pose errors (meters, degrees) over all frame pairs."""
    err_t, err_r = 0.0, 0.0
    for i in range(len(truth)):
        for j in range(i + 1, len(truth)):
            rel_est = estimated[i].inverse().compose(estimated[j])
            rel_gt = truth[i].inverse().compose(truth[j])
            err_t = max(err_t, float(np.linalg.norm(
                rel_gt.inverse().compose(rel_est).translation)))
            err_r = max(err_r, rotation_angle_deg(rel_est.rotation, rel_gt.rotation))
    return err_t, err_r


class TestSelectionClosedForm:
    def test_matches_grid_search_oracle(self):
        """1000 random (mu, rho): closed form vs. argmin over s grid, step 1e-4."""
        rng = np.random.default_rng(11)
        grid = np.arange(0.0, 1.0 + 1e-12, 1e-4)
        psi = penalty(grid)
        for _ in range(1000):
            mu = rng.uniform(0.005, 2.0)
            rho = rng.uniform(0.0, 4.0)
            s_closed = float(selection_closed_form(mu, rho))
            s_grid = grid[np.argmin(grid * rho + mu * psi)]
            assert abs(s_closed - s_grid) < 1e-3

    def test_limits(self):
        assert selection_closed_form(1.0, 0.0) == pytest.approx(1.0)
        # rho >> mu drives s toward 0.
        assert selection_closed_form(0.01, 100.0) < 1e-6

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(3)
        mu = 0.25
        rho = rng.uniform(0, 2, size=64)
        vec = selection_closed_form(mu, rho)
        for k in range(64):
            assert vec[k] == pytest.approx(float(selection_closed_form(mu, rho[k])))

    def test_penalty_endpoints(self):
        assert penalty(0.0) == pytest.approx(1.0)
        assert penalty(1.0) == pytest.approx(0.0)
        assert penalty(0.25) == pytest.approx(0.25)


def two_patch_problem(rng, n_frames=2, n_pairs=6, options=None):
    """Random small problem with plausible geometry for derivative checks."""
    pairs = []
    for k in range(n_pairs):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        c = rng.uniform(-1, 1, size=3)
        pts = grid_on_plane(c, n, extent=0.4, k=3)
        fi, fj = rng.choice(n_frames, size=2, replace=False)
        p = make_patch(int(fi), c, n, pts + 0.01 * rng.normal(size=pts.shape), pid=2 * k)
        q = make_patch(int(fj), c + 0.05 * n, n, pts[::-1] + 0.01 * rng.normal(size=pts.shape),
                       pid=2 * k + 1)
        pairs.append(CoplanarPair(p=p, q=q, d_f=0.3, weight=float(rng.uniform(0.2, 1.0)),
                                  selection=float(rng.uniform(0.3, 1.0))))
    kps = []
    for _ in range(4):
        fi, fj = rng.choice(n_frames, size=2, replace=False)
        kps.append(KeypointMatch(frame_i=int(fi), frame_j=int(fj),
                                 u=rng.uniform(-1, 1, size=3), v=rng.uniform(-1, 1, size=3),
                                 selection=float(rng.uniform(0.3, 1.0))))
    poses = [RigidTransform.identity()]
    for _ in range(n_frames - 1):
        w = rng.normal(size=3) * 0.2
        poses.append(RigidTransform.from_axis_angle(w, rng.normal(size=3) * 0.2))
    return RegistrationProblem(poses=poses, pairs=pairs, keypoints=kps,
                               options=options or SolverOptions())


class TestPoseJacobian:
    def test_gradient_matches_central_differences(self):
        """Analytic gradient of the data objective vs. central differences.

        The normal-equation gradient is g = J^T r, i.e. half the gradient of
        sum(r^2) in the local parameterization (omega, dt) around the current
        poses; check both frames' 6-dof blocks at step 1e-6.
        """
        from planereg.solver import _accumulate_normal_equations, _State

        rng = np.random.default_rng(21)
        for trial in range(4):
            problem = two_patch_problem(rng, n_frames=3)
            state = _State(problem)
            _, g = _accumulate_normal_equations(state, state.rot, state.tra)

            def data_half(rot, tra):
                bd = state.objective(rot, tra, 0.0, 0.0)
                return 0.5 * (bd.data_cop + bd.data_kp)

            eps = 1e-6
            for f in range(1, 3):
                for axis in range(6):
                    rot_p, tra_p = state.rot.copy(), state.tra.copy()
                    rot_m, tra_m = state.rot.copy(), state.tra.copy()
                    step = np.zeros(6)
                    step[axis] = eps
                    rot_p[f] = rotation_from_axis_angle(step[:3]) @ state.rot[f]
                    tra_p[f] = state.tra[f] + step[3:]
                    rot_m[f] = rotation_from_axis_angle(-step[:3]) @ state.rot[f]
                    tra_m[f] = state.tra[f] - step[3:]
                    fd = (data_half(rot_p, tra_p) - data_half(rot_m, tra_m)) / (2 * eps)
                    an = g[6 * (f - 1) + axis]
                    assert an == pytest.approx(fd, rel=1e-4, abs=1e-8), (
                        f"trial {trial} frame {f} axis {axis}"
                    )

    def test_objective_invariant_under_common_motion(self):
        rng = np.random.default_rng(5)
        problem = two_patch_problem(rng)
        e0 = objective_value(problem).total
        w = rng.normal(size=3)
        motion = RigidTransform.from_axis_angle(w, rng.normal(size=3))
        # Applying one motion to all poses leaves every residual unchanged,
        # but frame 0 must stay identity, so compare via raw breakdown.
        from planereg.solver import _State

        state = _State(problem)
        rot2 = np.array([motion.rotation @ r for r in state.rot])
        tra2 = np.array([motion.rotation @ t + motion.translation for t in state.tra])
        e1 = state.objective(rot2, tra2, problem.initial_mu(), problem.initial_mu()).total
        assert e1 == pytest.approx(e0, rel=1e-9)


class TestSingleSteps:
    def test_update_selections_at_truth_keeps_inliers(self):
        scene = generate_scene(SceneSpec(preset="box", n_frames=3, seed=7))
        pairs, labels = make_proposals(scene, 60, outlier_fraction=0.5, rng_seed=1)
        problem = RegistrationProblem(poses=list(scene.trajectory), pairs=pairs,
                                      keypoints=[])
        s_cop, _ = update_selections(problem)
        for s, is_true in zip(s_cop, labels):
            if is_true:
                assert s > 0.9  # delta ~ 0 at the true poses
            else:
                assert s < 0.9

    def test_update_poses_never_increases_objective(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            problem = two_patch_problem(rng)
            e0 = objective_value(problem).total
            new_poses = update_poses(problem)
            moved = RegistrationProblem(poses=new_poses, pairs=problem.pairs,
                                        keypoints=problem.keypoints,
                                        options=problem.options)
            assert objective_value(moved).total <= e0 * (1 + 1e-9) + 1e-12

    def test_gauge_frame_must_be_identity(self):
        rng = np.random.default_rng(2)
        problem = two_patch_problem(rng)
        bad = [RigidTransform.from_axis_angle(np.array([0.1, 0, 0]), np.zeros(3))] + list(
            problem.poses[1:]
        )
        with pytest.raises(ValueError, match="identity"):
            RegistrationProblem(poses=bad, pairs=problem.pairs, keypoints=[])


class TestSolve:
    def test_two_frame_recovery_from_perturbation(self):
        """3-orthogonal-plane scene, 10 cm / 10 degree initial error."""
        scene = generate_scene(SceneSpec(preset="corner", n_frames=2, seed=3))
        pairs, _ = make_proposals(scene, 30, outlier_fraction=0.0, rng_seed=0)
        kps, _ = make_keypoint_matches(scene, 8, rng_seed=0)
        rng = np.random.default_rng(40)
        problem = RegistrationProblem(poses=perturbed_poses(scene, rng),
                                      pairs=pairs, keypoints=kps)
        result = solve(problem)
        err_t, err_r = pose_errors(result.poses, scene.trajectory)
        assert err_t < 1e-4
        assert err_r < 0.01

    def test_trace_objective_never_increases_within_mu_level(self):
        scene = generate_scene(SceneSpec(preset="box", n_frames=4, seed=9))
        pairs, _ = make_proposals(scene, 80, outlier_fraction=0.3, rng_seed=2)
        rng = np.random.default_rng(41)
        problem = RegistrationProblem(poses=perturbed_poses(scene, rng, 5.0, 0.05),
                                      pairs=pairs, keypoints=[])
        result = solve(problem)
        by_outer: dict[int, list[float]] = {}
        for row in result.trace:
            by_outer.setdefault(row.outer, []).append(row.e_total)
        for values in by_outer.values():
            for a, b in zip(values, values[1:]):
                assert b <= a * (1 + 1e-9) + 1e-12

    def test_outliers_end_deselected(self):
        scene = generate_scene(SceneSpec(preset="box", n_frames=4, seed=13))
        pairs, labels = make_proposals(scene, 80, outlier_fraction=0.4, rng_seed=3)
        rng = np.random.default_rng(42)
        problem = RegistrationProblem(poses=perturbed_poses(scene, rng, 5.0, 0.05),
                                      pairs=pairs, keypoints=[])
        result = solve(problem)
        outlier_s = result.selections_cop[~np.array(labels)]
        inlier_s = result.selections_cop[np.array(labels)]
        assert np.all(outlier_s < 0.5)
        assert np.mean(inlier_s > 0.5) > 0.95

    def test_mu_schedule_reaches_floor(self):
        scene = generate_scene(SceneSpec(preset="box", n_frames=2, seed=1))
        pairs, _ = make_proposals(scene, 20, outlier_fraction=0.0, rng_seed=0)
        problem = RegistrationProblem(poses=list(scene.trajectory), pairs=pairs,
                                      keypoints=[])
        result = solve(problem)
        opts = problem.options
        assert result.mu_final >= opts.mu_floor
        assert result.mu_final * opts.mu_decay < opts.mu_floor
        # 1.0 * 0.5^k schedule: final level is 0.015625.
        assert result.mu_final == pytest.approx(0.015625)

    def test_empty_problem_returns_initial_poses(self):
        poses = [RigidTransform.identity(),
                 RigidTransform.from_axis_angle(np.array([0, 0.2, 0]), np.array([1, 0, 0.0]))]
        problem = RegistrationProblem(poses=poses, pairs=[], keypoints=[])
        result = solve(problem)
        np.testing.assert_allclose(result.poses[1].matrix(), poses[1].matrix(), atol=1e-12)

    def test_selection_history_one_entry_per_mu_level(self):
        scene = generate_scene(SceneSpec(preset="box", n_frames=2, seed=2))
        pairs, _ = make_proposals(scene, 10, outlier_fraction=0.0, rng_seed=0)
        problem = RegistrationProblem(poses=list(scene.trajectory), pairs=pairs,
                                      keypoints=[])
        result = solve(problem)
        # mu: 1.0, 0.5, ..., 0.015625 -> 7 levels.
        assert len(result.selection_history) == 7


class TestStability:
    def test_single_plane_has_three_null_directions(self):
        """One plane constrains z, roll-as-in-plane... exactly 3 dof remain."""
        pts = grid_on_plane(np.array([0, 0, 2.0]), np.array([0.0, 0.0, 1.0]), extent=1.0, k=5)
        normals = np.tile([0.0, 0.0, 1.0], (pts.shape[0], 1))
        c = alignment_covariance(pts, normals)
        w = np.linalg.eigvalsh(c)
        bound = 1e-9 * np.trace(c)
        assert int(np.sum(w < bound)) == 3

    def test_three_orthogonal_planes_fully_constrained(self):
        all_rows_pts, all_rows_nrm = [], []
        for n in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])):
            pts = grid_on_plane(2.0 * n, n, extent=1.0, k=5)
            all_rows_pts.append(pts)
            all_rows_nrm.append(np.tile(n, (pts.shape[0], 1)))
        c = alignment_covariance(np.concatenate(all_rows_pts), np.concatenate(all_rows_nrm))
        w = np.linalg.eigvalsh(c)
        bound = 1e-9 * np.trace(c)
        assert int(np.sum(w >= bound)) == 6

    def test_estimate_stability_flags_unconstrained_axis(self):
        """Two frames seeing only z-normal planes: x/y translation unconstrained."""
        n = np.array([0.0, 0.0, 1.0])
        pairs = []
        for k, c in enumerate((np.array([0, 0, 2.0]), np.array([0.4, 0.3, 2.0]))):
            pts = grid_on_plane(c, n, extent=0.5, k=4)
            p = make_patch(0, c, n, pts, pid=2 * k)
            q = make_patch(1, c, n, pts + np.array([0.05, 0, 0]), pid=2 * k + 1)
            pairs.append(CoplanarPair(p=p, q=q, d_f=0.1, weight=1.0, selection=1.0))
        problem = RegistrationProblem(
            poses=[RigidTransform.identity(), RigidTransform.identity()],
            pairs=pairs, keypoints=[])
        report = estimate_stability(problem)
        for f in range(2):
            assert report.gammas[f, 2] > 1.0  # z well constrained
            assert report.gammas[f, 0] < 1e-9
            assert report.gammas[f, 1] < 1e-9


class TestCoplanarityOnly:
    def test_rejects_keypoints(self):
        rng = np.random.default_rng(8)
        problem = two_patch_problem(rng)
        with pytest.raises(ValueError, match="keypoint"):
            solve_coplanarity_only(problem)

    def test_recovers_well_constrained_scene(self):
        """Position RMSE < 1 mm; the weak motion regulariser only biases at
        the 0.1 mm scale once the coplanar terms pin all six dof."""
        scene = generate_scene(SceneSpec(preset="corner", n_frames=3, seed=6))
        pairs, _ = make_proposals(scene, 60, outlier_fraction=0.0, rng_seed=1)
        rng = np.random.default_rng(43)
        problem = RegistrationProblem(poses=perturbed_poses(scene, rng, 3.0, 0.03),
                                      pairs=pairs, keypoints=[])
        result = solve_coplanarity_only(problem)
        ate = np.sqrt(np.mean([
            np.sum((est.translation - gt.translation) ** 2)
            for est, gt in zip(result.poses, scene.trajectory)
        ]))
        assert ate < 1e-3
        _, err_r = pose_errors(result.poses, scene.trajectory)
        assert err_r < 0.1

    def test_unconstrained_axis_keeps_large_mu(self):
        """Frames seeing a single wall: the in-plane axes' mu never decays."""
        scene = generate_scene(SceneSpec(preset="single_wall", n_frames=3, seed=5))
        pairs, _ = make_proposals(scene, 30, outlier_fraction=0.0, rng_seed=1)
        problem = RegistrationProblem(poses=list(scene.trajectory), pairs=pairs,
                                      keypoints=[])
        result = solve_coplanarity_only(problem)
        assert result.stability is not None
        mu = result.stability.mu
        opts = problem.options
        # The wall normal is the z-ish axis of each camera; after rebasing to
        # frame 0 the world normal is axis-aligned.  Unconstrained axes keep
        # mu_aniso_init exactly, the constrained axis must have decayed.
        assert np.any(mu == opts.mu_aniso_init)
        assert np.any(mu < opts.mu_aniso_init)

    def test_inlier_pairs_stay_selected(self):
        scene = generate_scene(SceneSpec(preset="corner", n_frames=3, seed=10))
        pairs, labels = make_proposals(scene, 60, outlier_fraction=0.3, rng_seed=4)
        rng = np.random.default_rng(44)
        problem = RegistrationProblem(poses=perturbed_poses(scene, rng, 2.0, 0.02),
                                      pairs=pairs, keypoints=[])
        result = solve_coplanarity_only(problem)
        labels = np.array(labels)
        assert np.mean(result.selections_cop[labels] > 0.5) > 0.9
        assert np.mean(result.selections_cop[~labels] < 0.5) > 0.9


class TestSolverOptionsValidation:
    def test_bad_options_rejected(self):
        with pytest.raises(ValueError):
            SolverOptions(mu_init=0.0)
        with pytest.raises(ValueError):
            SolverOptions(mu_decay=1.5)
        with pytest.raises(ValueError):
            SolverOptions(rel_tol=-1.0)
        with pytest.raises(ValueError):
            SolverOptions(gamma_t=0.0)
