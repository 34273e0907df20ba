"""Robust alternating registration over coplanarity and keypoint constraints.

The objective couples per-frame poses T_i with per-constraint selection
variables s in [0, 1]:

    E = sum_pairs  w * s * delta^2(T_i, T_j)       (coplanarity data)
      + sum_pairs  mu * w * psi(s)                 (coplanarity pruning)
      + sum_kps    s * r                           (keypoint data)
      + sum_kps    mu * psi(s)                     (keypoint pruning)

with psi(s) = (sqrt(s) - 1)^2.  Minimisation alternates a closed-form update
of the selections with one damped least-squares pass over the poses, while a
continuation schedule shrinks mu so that constraints inconsistent with the
consensus geometry are progressively switched off.

``solve_coplanarity_only`` is the keypoint-free variant: it adds a weak
consecutive-frame regulariser, drives a per-frame per-axis mu from a
stability analysis of the currently selected constraints, and never prunes
along directions the data does not constrain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import (
    PlanePatch,
    RigidTransform,
    farthest_point_sample,
    orthonormalize_rotation,
    rotation_from_axis_angle,
    skew,
)
from .matching import CoplanarPair, KeypointMatch

__all__ = [
    "SolverOptions",
    "RegistrationProblem",
    "ObjectiveBreakdown",
    "TraceRow",
    "StabilityReport",
    "SolveResult",
    "SolverError",
    "selection_closed_form",
    "penalty",
    "objective_value",
    "update_selections",
    "update_poses",
    "solve",
    "estimate_stability",
    "alignment_covariance",
    "solve_coplanarity_only",
]

_AXES = ("x", "y", "z")


class SolverError(RuntimeError):
    """Raised when the optimisation produces non-finite state.

    ``poses`` carries the last finite iterate for post-mortem inspection.
    """

    def __init__(self, message: str, poses: list[RigidTransform] | None = None) -> None:
        super().__init__(message)
        self.poses = poses


@dataclass(frozen=True)
class SolverOptions:
    mu_init: float = 1.0
    mu_floor: float = 0.01
    mu_decay: float = 0.5
    rel_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 100
    samples_per_patch: int = 64
    kp_squared: bool = True
    frame_reg_lambda: float = 0.001
    gamma_t: float = 0.5
    mu_aniso_init: float = 0.1
    max_step: float = 0.5

    def __post_init__(self) -> None:
        if self.mu_init <= 0 or self.mu_floor <= 0:
            raise ValueError("mu bounds must be positive")
        if not (0.0 < self.mu_decay < 1.0):
            raise ValueError("mu_decay must lie in (0, 1)")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.samples_per_patch < 3:
            raise ValueError("samples_per_patch must be >= 3")
        if self.frame_reg_lambda < 0 or self.gamma_t <= 0 or self.mu_aniso_init <= 0:
            raise ValueError("regulariser parameters out of range")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")


@dataclass(eq=False)
class RegistrationProblem:
    """Poses to solve for plus the constraints among them.

    ``poses`` are the initial camera-to-reference transforms, one per node;
    node 0 is the gauge and must be the identity.  Pair/keypoint endpoints
    index into this pose list via their frame ids.
    """

    poses: list[RigidTransform]
    pairs: list[CoplanarPair] = field(default_factory=list)
    keypoints: list[KeypointMatch] = field(default_factory=list)
    mu: float | None = None
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        n = len(self.poses)
        if n == 0:
            raise ValueError("at least one pose is required")
        p0 = self.poses[0]
        if not (
            np.allclose(p0.rotation, np.eye(3), atol=1e-12)
            and np.allclose(p0.translation, 0.0, atol=1e-12)
        ):
            raise ValueError("pose 0 is the gauge and must be the identity")
        for pair in self.pairs:
            if not (0 <= pair.p.frame_id < n and 0 <= pair.q.frame_id < n):
                raise ValueError("pair endpoint frame id out of range")
        for kp in self.keypoints:
            if not (0 <= kp.frame_i < n and 0 <= kp.frame_j < n):
                raise ValueError("keypoint endpoint frame id out of range")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def initial_mu(self) -> float:
        return self.options.mu_init if self.mu is None else float(self.mu)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    data_cop: float
    reg_cop: float
    data_kp: float
    reg_kp: float
    frame_reg: float = 0.0


@dataclass(frozen=True)
class TraceRow:
    outer: int
    inner: int
    mu: float
    e_total: float
    e_data_cop: float
    e_reg_cop: float
    e_data_kp: float
    e_reg_kp: float
    selected_cop: int
    selected_kp: int


@dataclass(frozen=True)
class StabilityReport:
    """Per-frame alignment stability: gamma per translational axis.

    ``eigenvalues`` are the six eigenvalues of each frame's constraint
    covariance; ``gammas[f, d]`` is the eigenvalue whose eigenvector has the
    largest translational component along axis d.  ``mu`` carries the
    per-frame per-axis pruning parameter when produced by the
    coplanarity-only solver.
    """

    gammas: np.ndarray
    eigenvalues: np.ndarray
    mu: np.ndarray | None = None


@dataclass(eq=False)
class SolveResult:
    poses: list[RigidTransform]
    pairs: list[CoplanarPair]
    keypoints: list[KeypointMatch]
    selections_cop: np.ndarray
    selections_kp: np.ndarray
    trace: list[TraceRow]
    selection_history: list[np.ndarray]
    mu_final: float
    converged: bool
    objective: ObjectiveBreakdown
    stability: StabilityReport | None = None


def penalty(s) -> np.ndarray | float:
    """psi(s) = (sqrt(s) - 1)^2 on [0, 1]; 1 at s=0, 0 at s=1."""
    sc = np.clip(s, 0.0, 1.0)
    return (np.sqrt(sc) - 1.0) ** 2


def selection_closed_form(mu, rho):
    """argmin_s [ s * rho + mu * psi(s) ]  =  (mu / (mu + rho))^2.

    rho is the constraint's current data residual (delta^2 for coplanar
    pairs, r for keypoints); any common positive weight cancels.  The result
    is already in [0, 1] for rho >= 0; clamping guards rounding only.
    """
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    s = (mu / (mu + rho)) ** 2
    return np.clip(s, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Internal vectorised state
# ---------------------------------------------------------------------------


class _State:
    """Structure-of-arrays view of one registration problem."""

    def __init__(self, problem: RegistrationProblem) -> None:
        self.problem = problem
        self.opts = problem.options
        n = problem.n_frames
        self.n = n
        self.rot = np.array([p.rotation for p in problem.poses], dtype=float)
        self.tra = np.array([p.translation for p in problem.poses], dtype=float)

        pairs = problem.pairs
        self.n_pairs = len(pairs)
        self.pair_w = np.array([p.weight for p in pairs], dtype=float)
        self.pair_frames = np.array(
            [[p.p.frame_id, p.q.frame_id] for p in pairs], dtype=int
        ).reshape(-1, 2)
        self.s_cop = np.array([p.selection for p in pairs], dtype=float)

        own, oth, v, ppt, pnm, scale, pidx = [], [], [], [], [], [], []
        for k, pair in enumerate(pairs):
            for side, other in ((pair.p, pair.q), (pair.q, pair.p)):
                m = side.samples.shape[0]
                own.append(np.full(m, side.frame_id))
                oth.append(np.full(m, other.frame_id))
                v.append(side.samples)
                ppt.append(np.tile(other.plane.point, (m, 1)))
                pnm.append(np.tile(other.plane.normal, (m, 1)))
                scale.append(np.full(m, 1.0 / m))
                pidx.append(np.full(m, k))
        if pairs:
            self.r_own = np.concatenate(own)
            self.r_oth = np.concatenate(oth)
            self.r_v = np.concatenate(v)
            self.r_ppt = np.concatenate(ppt)
            self.r_pnm = np.concatenate(pnm)
            self.r_scale = np.concatenate(scale)
            self.r_pidx = np.concatenate(pidx)
        else:
            self.r_own = np.zeros(0, dtype=int)
            self.r_oth = np.zeros(0, dtype=int)
            self.r_v = np.zeros((0, 3))
            self.r_ppt = np.zeros((0, 3))
            self.r_pnm = np.zeros((0, 3))
            self.r_scale = np.zeros(0)
            self.r_pidx = np.zeros(0, dtype=int)

        kps = problem.keypoints
        self.n_kp = len(kps)
        self.kp_i = np.array([k.frame_i for k in kps], dtype=int)
        self.kp_j = np.array([k.frame_j for k in kps], dtype=int)
        self.kp_u = np.array([k.u for k in kps], dtype=float).reshape(-1, 3)
        self.kp_v = np.array([k.v for k in kps], dtype=float).reshape(-1, 3)
        self.s_kp = np.array([k.selection for k in kps], dtype=float)

        # Consecutive-frame regulariser support points (coplanarity-only mode).
        self.fr_frame = np.zeros(0, dtype=int)
        self.fr_pts = np.zeros((0, 3))

    def build_frame_reg_points(self, per_frame: int = 16) -> None:
        by_frame: dict[int, list[np.ndarray]] = {}
        seen: set[tuple[int, int]] = set()
        for pair in self.problem.pairs:
            for patch in (pair.p, pair.q):
                if patch.key in seen:
                    continue
                seen.add(patch.key)
                by_frame.setdefault(patch.frame_id, []).append(patch.samples)
        fallback = np.array(
            [[0.0, 0.0, 1.0], [0.5, 0.0, 1.5], [0.0, 0.5, 1.5], [-0.5, -0.5, 2.0]]
        )
        frames, pts = [], []
        for f in range(self.n - 1):
            if f in by_frame:
                cloud = np.concatenate(by_frame[f], axis=0)
                idx = farthest_point_sample(cloud, per_frame)
                chosen = cloud[idx]
            else:
                chosen = fallback
            frames.append(np.full(chosen.shape[0], f))
            pts.append(chosen)
        self.fr_frame = np.concatenate(frames) if frames else np.zeros(0, dtype=int)
        self.fr_pts = np.concatenate(pts) if pts else np.zeros((0, 3))

    # -- residual evaluation -------------------------------------------------

    def cop_geometry(self, rot: np.ndarray, tra: np.ndarray):
        """Transformed sample points, plane anchors/normals, signed distances."""
        g = np.einsum("nij,nj->ni", rot[self.r_own], self.r_v) + tra[self.r_own]
        p = np.einsum("nij,nj->ni", rot[self.r_oth], self.r_ppt) + tra[self.r_oth]
        nrm = np.einsum("nij,nj->ni", rot[self.r_oth], self.r_pnm)
        d = np.einsum("ni,ni->n", g - p, nrm)
        return g, p, nrm, d

    def pair_delta2(self, rot: np.ndarray, tra: np.ndarray) -> np.ndarray:
        if self.n_pairs == 0:
            return np.zeros(0)
        _, _, _, d = self.cop_geometry(rot, tra)
        return np.bincount(self.r_pidx, weights=self.r_scale * d**2, minlength=self.n_pairs)

    def kp_residual(self, rot: np.ndarray, tra: np.ndarray) -> np.ndarray:
        if self.n_kp == 0:
            return np.zeros((0, 3))
        a = np.einsum("nij,nj->ni", rot[self.kp_i], self.kp_u) + tra[self.kp_i]
        b = np.einsum("nij,nj->ni", rot[self.kp_j], self.kp_v) + tra[self.kp_j]
        return a - b

    def kp_rho(self, rot: np.ndarray, tra: np.ndarray) -> np.ndarray:
        """Keypoint data residual as it enters the objective."""
        r2 = np.sum(self.kp_residual(rot, tra) ** 2, axis=1)
        return r2 if self.opts.kp_squared else np.sqrt(r2)

    def frame_reg_residual(self, rot: np.ndarray, tra: np.ndarray) -> np.ndarray:
        if self.fr_pts.shape[0] == 0:
            return np.zeros((0, 3))
        i = self.fr_frame
        a = np.einsum("nij,nj->ni", rot[i], self.fr_pts) + tra[i]
        b = np.einsum("nij,nj->ni", rot[i + 1], self.fr_pts) + tra[i + 1]
        return a - b

    def objective(
        self,
        rot: np.ndarray,
        tra: np.ndarray,
        mu_cop: np.ndarray | float,
        mu_kp: float,
        frame_reg_lambda: float = 0.0,
    ) -> ObjectiveBreakdown:
        delta2 = self.pair_delta2(rot, tra)
        e_data_cop = float(np.sum(self.pair_w * self.s_cop * delta2))
        e_reg_cop = float(np.sum(mu_cop * self.pair_w * penalty(self.s_cop)))
        rho_kp = self.kp_rho(rot, tra)
        e_data_kp = float(np.sum(self.s_kp * rho_kp))
        e_reg_kp = float(np.sum(mu_kp * penalty(self.s_kp)))
        e_frame = 0.0
        if frame_reg_lambda > 0.0:
            fr = self.frame_reg_residual(rot, tra)
            e_frame = float(frame_reg_lambda * np.sum(fr**2))
        total = e_data_cop + e_reg_cop + e_data_kp + e_reg_kp + e_frame
        return ObjectiveBreakdown(total, e_data_cop, e_reg_cop, e_data_kp, e_reg_kp, e_frame)

    def poses(self) -> list[RigidTransform]:
        return [
            RigidTransform(orthonormalize_rotation(self.rot[f]), self.tra[f])
            for f in range(self.n)
        ]


def _pose_jacobian_rows(state: _State, rot: np.ndarray, tra: np.ndarray):
    """Scaled residuals and 6-dof blocks for every coplanarity sample row."""
    g, p, nrm, d = state.cop_geometry(rot, tra)
    w_row = state.pair_w[state.r_pidx] * state.s_cop[state.r_pidx] * state.r_scale
    scale = np.sqrt(w_row)
    r = scale * d
    rv = g - tra[state.r_own]  # R_own @ v
    rp = p - tra[state.r_oth]  # R_oth @ plane point
    j_own = np.concatenate([np.cross(rv, nrm), nrm], axis=1) * scale[:, None]
    j_oth = (
        np.concatenate([-np.cross(rp, nrm) + np.cross(nrm, g - p), -nrm], axis=1)
        * scale[:, None]
    )
    return r, j_own, j_oth


def _accumulate_normal_equations(
    state: _State,
    rot: np.ndarray,
    tra: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton normal equations over the non-gauge pose parameters."""
    n_unknown = state.n - 1
    dim = 6 * n_unknown
    h = np.zeros((dim, dim))
    g_vec = np.zeros(dim)
    if dim == 0:
        return h, g_vec

    def block(f: int) -> slice:
        return slice(6 * (f - 1), 6 * f)

    if state.n_pairs:
        r, j_own, j_oth = _pose_jacobian_rows(state, rot, tra)
        combo = state.r_own * state.n + state.r_oth
        for c in np.unique(combo):
            fo, ft = int(c) // state.n, int(c) % state.n
            m = combo == c
            ja, jb, rr = j_own[m], j_oth[m], r[m]
            if fo > 0:
                h[block(fo), block(fo)] += ja.T @ ja
                g_vec[block(fo)] += ja.T @ rr
            if ft > 0:
                h[block(ft), block(ft)] += jb.T @ jb
                g_vec[block(ft)] += jb.T @ rr
            if fo > 0 and ft > 0:
                cross = ja.T @ jb
                h[block(fo), block(ft)] += cross
                h[block(ft), block(fo)] += cross.T

    if state.n_kp:
        res = state.kp_residual(rot, tra)
        if state.opts.kp_squared:
            w = state.s_kp.copy()
        else:
            # Literal (unsquared) data term handled by reweighted least squares.
            norms = np.maximum(np.linalg.norm(res, axis=1), 1e-9)
            w = state.s_kp / norms
        sw = np.sqrt(w)
        for k in range(state.n_kp):
            fi, fj = int(state.kp_i[k]), int(state.kp_j[k])
            ru = rot[fi] @ state.kp_u[k]
            rvv = rot[fj] @ state.kp_v[k]
            ji = np.hstack([-skew(ru), np.eye(3)]) * sw[k]
            jj = np.hstack([skew(rvv), -np.eye(3)]) * sw[k]
            rr = res[k] * sw[k]
            if fi > 0:
                h[block(fi), block(fi)] += ji.T @ ji
                g_vec[block(fi)] += ji.T @ rr
            if fj > 0:
                h[block(fj), block(fj)] += jj.T @ jj
                g_vec[block(fj)] += jj.T @ rr
            if fi > 0 and fj > 0:
                cross = ji.T @ jj
                h[block(fi), block(fj)] += cross
                h[block(fj), block(fi)] += cross.T

    if state.fr_pts.shape[0] and state.opts.frame_reg_lambda > 0.0:
        lam = np.sqrt(state.opts.frame_reg_lambda)
        res = state.frame_reg_residual(rot, tra)
        for k in range(state.fr_pts.shape[0]):
            fi = int(state.fr_frame[k])
            fj = fi + 1
            ra = rot[fi] @ state.fr_pts[k]
            rb = rot[fj] @ state.fr_pts[k]
            ji = np.hstack([-skew(ra), np.eye(3)]) * lam
            jj = np.hstack([skew(rb), -np.eye(3)]) * lam
            rr = res[k] * lam
            if fi > 0:
                h[block(fi), block(fi)] += ji.T @ ji
                g_vec[block(fi)] += ji.T @ rr
            h[block(fj), block(fj)] += jj.T @ jj
            g_vec[block(fj)] += jj.T @ rr
            if fi > 0:
                cross = ji.T @ jj
                h[block(fi), block(fj)] += cross
                h[block(fj), block(fi)] += cross.T

    return h, g_vec


def _pose_step(
    state: _State,
    mu_cop: np.ndarray | float,
    mu_kp: float,
    frame_reg_lambda: float,
) -> float:
    """One damped least-squares pass over the poses.  Returns the step size.

    The candidate step is retried with increasing damping until the full
    objective does not increase; with no acceptable step the poses stay put.
    """
    if state.n <= 1:
        return 0.0
    e0 = state.objective(state.rot, state.tra, mu_cop, mu_kp, frame_reg_lambda).total
    h, g = _accumulate_normal_equations(state, state.rot, state.tra)
    if not np.all(np.isfinite(h)) or not np.all(np.isfinite(g)):
        raise SolverError("non-finite normal equations", state.poses())
    diag = np.diag(h).copy()
    floor = 1e-10 * max(float(diag.max(initial=0.0)), 1.0)
    damp = np.maximum(diag, floor)

    lam = 1e-6
    for _ in range(16):
        try:
            delta = np.linalg.solve(h + lam * np.diag(damp), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        steps = delta.reshape(-1, 6)
        widest = float(np.max(np.linalg.norm(steps.reshape(-1, 3), axis=1), initial=0.0))
        if widest > state.opts.max_step:
            # Trust region: a single damped pass must stay local even when a
            # constraint majority would pay for teleporting the trajectory.
            lam *= 10.0
            continue
        rot_new = state.rot.copy()
        tra_new = state.tra.copy()
        change = 0.0
        for f in range(1, state.n):
            wv = delta[6 * (f - 1) : 6 * (f - 1) + 3]
            dt = delta[6 * (f - 1) + 3 : 6 * f]
            rot_new[f] = orthonormalize_rotation(rotation_from_axis_angle(wv) @ state.rot[f])
            tra_new[f] = state.tra[f] + dt
            change = max(
                change,
                float(np.linalg.norm(wv)),
                float(np.linalg.norm(dt)) / max(1.0, float(np.linalg.norm(state.tra[f]))),
            )
        e1 = state.objective(rot_new, tra_new, mu_cop, mu_kp, frame_reg_lambda).total
        if np.isfinite(e1) and e1 <= e0 * (1.0 + 1e-12) + 1e-15:
            state.rot = rot_new
            state.tra = tra_new
            return change
        lam *= 10.0
    return 0.0


def _selection_step(
    state: _State,
    mu_cop: np.ndarray | float,
    mu_kp: float,
) -> float:
    """Closed-form update of all selection variables.  Returns max |ds|."""
    change = 0.0
    if state.n_pairs:
        rho = state.pair_delta2(state.rot, state.tra)
        s_new = selection_closed_form(mu_cop, rho)
        change = max(change, float(np.max(np.abs(s_new - state.s_cop), initial=0.0)))
        state.s_cop = s_new
    if state.n_kp:
        rho = state.kp_rho(state.rot, state.tra)
        s_new = selection_closed_form(mu_kp, rho)
        change = max(change, float(np.max(np.abs(s_new - state.s_kp), initial=0.0)))
        state.s_kp = s_new
    return change


# ---------------------------------------------------------------------------
# Public single-step entry points
# ---------------------------------------------------------------------------


def objective_value(problem: RegistrationProblem) -> ObjectiveBreakdown:
    """Objective of the problem's current poses and selections."""
    state = _State(problem)
    mu = problem.initial_mu()
    return state.objective(state.rot, state.tra, mu, mu)


def update_selections(problem: RegistrationProblem) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form optimal selections at the problem's current poses."""
    state = _State(problem)
    mu = problem.initial_mu()
    _selection_step(state, mu, mu)
    return state.s_cop, state.s_kp


def update_poses(problem: RegistrationProblem) -> list[RigidTransform]:
    """One damped least-squares pose pass; never increases the objective."""
    state = _State(problem)
    mu = problem.initial_mu()
    _pose_step(state, mu, mu, 0.0)
    return state.poses()


# ---------------------------------------------------------------------------
# Full alternating solves
# ---------------------------------------------------------------------------


def _check_monotone(before: float, after: float, what: str, state: _State) -> None:
    if after > before * (1.0 + 1e-9) + 1e-12:
        raise SolverError(
            f"{what} increased the objective ({before:.6e} -> {after:.6e})",
            state.poses(),
        )


def _result_from_state(
    state: _State,
    trace: list[TraceRow],
    history: list[np.ndarray],
    mu_final: float,
    converged: bool,
    objective: ObjectiveBreakdown,
    stability: StabilityReport | None = None,
) -> SolveResult:
    poses = state.poses()
    pairs = [
        p.with_selection(float(s)) for p, s in zip(state.problem.pairs, state.s_cop)
    ]
    kps = [
        k.with_selection(float(s)) for k, s in zip(state.problem.keypoints, state.s_kp)
    ]
    return SolveResult(
        poses=poses,
        pairs=pairs,
        keypoints=kps,
        selections_cop=state.s_cop.copy(),
        selections_kp=state.s_kp.copy(),
        trace=trace,
        selection_history=history,
        mu_final=mu_final,
        converged=converged,
        objective=objective,
        stability=stability,
    )


def solve(problem: RegistrationProblem) -> SolveResult:
    """Alternating minimisation under a shrinking global mu.

    At each mu level the pose pass and the selection update alternate until
    every unknown's relative change falls below ``rel_tol``; mu then decays
    by ``mu_decay`` until it crosses ``mu_floor`` (or ``max_outer`` levels).
    """
    opts = problem.options
    state = _State(problem)
    mu = problem.initial_mu()
    trace: list[TraceRow] = []
    history: list[np.ndarray] = []
    converged_all = True

    outer = 0
    while mu >= opts.mu_floor and outer < opts.max_outer:
        level_converged = False
        for inner in range(opts.max_inner):
            # Selections lead: the first pose pass must not honour stale
            # (all-ones) selections, or a large outlier majority can drag the
            # trajectory out of the true basin before any pruning happens.
            e_before = state.objective(state.rot, state.tra, mu, mu).total
            s_change = _selection_step(state, mu, mu)
            e_mid = state.objective(state.rot, state.tra, mu, mu).total
            _check_monotone(e_before, e_mid, "selection step", state)
            pose_change = _pose_step(state, mu, mu, 0.0)
            bd = state.objective(state.rot, state.tra, mu, mu)
            _check_monotone(e_mid, bd.total, "pose step", state)
            trace.append(
                TraceRow(
                    outer=outer,
                    inner=inner,
                    mu=mu,
                    e_total=bd.total,
                    e_data_cop=bd.data_cop,
                    e_reg_cop=bd.reg_cop,
                    e_data_kp=bd.data_kp,
                    e_reg_kp=bd.reg_kp,
                    selected_cop=int(np.sum(state.s_cop > 0.5)),
                    selected_kp=int(np.sum(state.s_kp > 0.5)),
                )
            )
            if max(pose_change, s_change) < opts.rel_tol:
                level_converged = True
                break
        converged_all = converged_all and level_converged
        history.append(state.s_cop.copy())
        outer += 1
        mu *= opts.mu_decay

    final = state.objective(state.rot, state.tra, mu / opts.mu_decay, mu / opts.mu_decay)
    return _result_from_state(
        state, trace, history, mu / opts.mu_decay, converged_all, final
    )


def alignment_covariance(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """6x6 covariance of point-to-plane constraint rows [v x n; n]."""
    v = np.asarray(points, dtype=float).reshape(-1, 3)
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    rows = np.concatenate([np.cross(v, n), n], axis=1)
    return rows.T @ rows


def _stability_from_state(
    state: _State, mu: np.ndarray | None = None, threshold: float = 0.5
) -> StabilityReport:
    gammas = np.zeros((state.n, 3))
    eigvals = np.zeros((state.n, 6))
    if state.n_pairs:
        selected = state.s_cop[state.r_pidx] > threshold
        g, p, nrm, _ = state.cop_geometry(state.rot, state.tra)
        rv = g - state.tra[state.r_own]
        rows = np.concatenate([np.cross(rv, nrm), nrm], axis=1)
        for f in range(state.n):
            m = selected & (state.r_own == f)
            if not np.any(m):
                continue
            c = rows[m].T @ rows[m]
            w, vec = np.linalg.eigh(c)
            eigvals[f] = w
            for d in range(3):
                k = int(np.argmax(np.abs(vec[3 + d, :])))
                gammas[f, d] = w[k]
    return StabilityReport(gammas=gammas, eigenvalues=eigvals, mu=mu)


def estimate_stability(problem: RegistrationProblem) -> StabilityReport:
    """Stability of each frame under its currently selected pairs (s > 0.5).

    Frames with no selected pair report all-zero gammas.
    """
    return _stability_from_state(_State(problem))


def _pair_mu_aniso(state: _State, mu_aniso: np.ndarray) -> np.ndarray:
    """Per-pair mu: min of the two endpoint frames' mu along the axis
    closest to each patch's current world-frame normal."""
    mus = np.zeros(state.n_pairs)
    for k, pair in enumerate(state.problem.pairs):
        fi, fj = state.pair_frames[k]
        n_p = state.rot[fi] @ pair.p.plane.normal
        n_q = state.rot[fj] @ pair.q.plane.normal
        dp = int(np.argmax(np.abs(n_p)))
        dq = int(np.argmax(np.abs(n_q)))
        mus[k] = min(mu_aniso[fi, dp], mu_aniso[fj, dq])
    return mus


def solve_coplanarity_only(problem: RegistrationProblem) -> SolveResult:
    """Keypoint-free registration driven by per-frame per-axis pruning.

    Adds a weak consecutive-frame motion regulariser, then repeats: alternate
    to convergence, measure per-frame stability gammas from the selected
    pairs, and halve mu only for frame/axis combinations whose gamma exceeds
    ``gamma_t`` - axes the data does not constrain keep their large mu and
    their constraints stay on.  Stops when every gamma is below ``gamma_t``
    or after ``max_outer`` rounds.
    """
    opts = problem.options
    if problem.keypoints:
        raise ValueError("coplanarity-only solve does not accept keypoint matches")
    state = _State(problem)
    state.build_frame_reg_points()
    lam = opts.frame_reg_lambda
    mu_aniso = np.full((state.n, 3), opts.mu_aniso_init)
    trace: list[TraceRow] = []
    history: list[np.ndarray] = []
    converged_all = True
    stability = _stability_from_state(state, mu_aniso.copy())

    for outer in range(opts.max_outer):
        mu_pairs = _pair_mu_aniso(state, mu_aniso)
        level_converged = False
        for inner in range(opts.max_inner):
            mu_pairs = _pair_mu_aniso(state, mu_aniso)
            # Selections lead, as in solve(): see the comment there.
            e_before = state.objective(state.rot, state.tra, mu_pairs, 0.0, lam).total
            s_change = _selection_step(state, mu_pairs, 0.0)
            e_mid = state.objective(state.rot, state.tra, mu_pairs, 0.0, lam).total
            _check_monotone(e_before, e_mid, "selection step", state)
            pose_change = _pose_step(state, mu_pairs, 0.0, lam)
            bd = state.objective(state.rot, state.tra, mu_pairs, 0.0, lam)
            _check_monotone(e_mid, bd.total, "pose step", state)
            trace.append(
                TraceRow(
                    outer=outer,
                    inner=inner,
                    mu=float(mu_aniso.max()),
                    e_total=bd.total,
                    e_data_cop=bd.data_cop,
                    e_reg_cop=bd.reg_cop,
                    e_data_kp=0.0,
                    e_reg_kp=0.0,
                    selected_cop=int(np.sum(state.s_cop > 0.5)),
                    selected_kp=0,
                )
            )
            if max(pose_change, s_change) < opts.rel_tol:
                level_converged = True
                break
        converged_all = converged_all and level_converged
        history.append(state.s_cop.copy())
        stability = _stability_from_state(state, mu_aniso.copy())
        decay_mask = stability.gammas > opts.gamma_t
        # The floor keeps converged (near-zero-residual) constraints selected;
        # unfloored halving would eventually prune everything and leave the
        # weak frame regulariser free to drag the trajectory together.
        mu_aniso[decay_mask] = np.maximum(mu_aniso[decay_mask] * 0.5, opts.mu_floor)
        stability = replace(stability, mu=mu_aniso.copy())
        if float(stability.gammas.max(initial=0.0)) < opts.gamma_t:
            break

    mu_pairs = _pair_mu_aniso(state, mu_aniso)
    final = state.objective(state.rot, state.tra, mu_pairs, 0.0, lam)
    return _result_from_state(
        state,
        trace,
        history,
        float(mu_aniso.min()),
        converged_all,
        final,
        stability=stability,
    )
