"""Hierarchical registration: fragments, intra/inter solves, composition.

The sequence is split into overlapping fragments.  Each fragment is first
registered rigidly on its own (intra stage); the surviving constraints and a
per-fragment-pair RANSAC vote then feed one global problem whose unknowns
are whole-fragment poses (inter stage).  Global per-frame poses are the
composition of the two stages, with overlap frames resolved to the earlier
fragment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .descriptors import DescriptorProvider, describe_all
from .geometry import PlanePatch, RigidTransform
from .matching import (
    CoplanarPair,
    KeypointMatch,
    RansacParams,
    propose_pairs,
    ransac_verify,
)
from .solver import RegistrationProblem, SolveResult, SolverOptions, solve

__all__ = [
    "Fragment",
    "PipelineParams",
    "PipelineResult",
    "partition",
    "register_intra",
    "register_inter",
    "compose_trajectory",
    "register_sequence",
]


@dataclass(eq=False)
class Fragment:
    """A contiguous frame window registered rigidly before the global stage."""

    id: int
    start: int
    end: int  # inclusive
    local_poses: list[RigidTransform] = field(default_factory=list)
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.end < self.start:
            raise ValueError("fragment end precedes start")
        if not self.local_poses:
            self.local_poses = [
                RigidTransform.identity() for _ in range(self.n_frames)
            ]
        if len(self.local_poses) != self.n_frames:
            raise ValueError("one local pose per frame is required")

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1

    def contains(self, frame: int) -> bool:
        return self.start <= frame <= self.end

    def local_pose_of(self, frame: int) -> RigidTransform:
        if not self.contains(frame):
            raise ValueError(f"frame {frame} outside fragment [{self.start}, {self.end}]")
        return self.local_poses[frame - self.start]


@dataclass(frozen=True)
class PipelineParams:
    fragment_size: int = 21
    overlap: int = 5
    solver: SolverOptions = field(default_factory=SolverOptions)
    ransac: RansacParams = field(default_factory=RansacParams)
    d_f_threshold: float = 2.5
    # Cross-fragment representative-patch merging: two patches of one
    # fragment collapse when their fragment-frame planes agree this closely.
    dedup_angle_deg: float = 1.0
    dedup_offset_m: float = 0.005

    def __post_init__(self) -> None:
        if not (0 < self.overlap < self.fragment_size):
            raise ValueError("overlap must satisfy 0 < overlap < fragment_size")


@dataclass(eq=False)
class PipelineResult:
    trajectory: list[RigidTransform]
    fragments: list[Fragment]
    intra_survivors: list[CoplanarPair]
    inter_pairs: list[CoplanarPair]
    inter_keypoints: list[KeypointMatch]
    intra_results: list[SolveResult]
    inter_result: SolveResult | None
    overlap_discrepancy_m: float


def partition(n_frames: int, params: PipelineParams | None = None) -> list[Fragment]:
    """Overlapping fragments covering [0, n): starts at stride multiples,
    the last fragment clipped to the sequence end."""
    prm = params or PipelineParams()
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    stride = prm.fragment_size - prm.overlap
    fragments: list[Fragment] = []
    start = 0
    while True:
        end = min(start + prm.fragment_size - 1, n_frames - 1)
        fragments.append(Fragment(id=len(fragments), start=start, end=end))
        if end == n_frames - 1:
            return fragments
        start += stride


def _relabel_pair(pair: CoplanarPair, frame_map: Mapping[int, int]) -> CoplanarPair:
    return replace(
        pair,
        p=replace(pair.p, frame_id=frame_map[pair.p.frame_id]),
        q=replace(pair.q, frame_id=frame_map[pair.q.frame_id]),
    )


def register_intra(
    fragment: Fragment,
    pairs: Sequence[CoplanarPair],
    keypoints: Sequence[KeypointMatch] = (),
    options: SolverOptions | None = None,
) -> tuple[Fragment, list[CoplanarPair], SolveResult]:
    """Solve the fragment's internal problem; survivors are pairs with s > 0.5.

    `pairs`/`keypoints` may contain constraints outside the fragment; only
    those with both endpoints inside are used.  Survivors are returned with
    their original (global) frame ids and final selections.
    """
    opts = options or SolverOptions()
    inside = [
        (k, p) for k, p in enumerate(pairs)
        if fragment.contains(p.p.frame_id) and fragment.contains(p.q.frame_id)
    ]
    kps_inside = [
        k for k in keypoints
        if fragment.contains(k.frame_i) and fragment.contains(k.frame_j)
    ]
    frame_map = {f: f - fragment.start for f in range(fragment.start, fragment.end + 1)}
    local_pairs = [_relabel_pair(p, frame_map) for _, p in inside]
    local_kps = [
        replace(k, frame_i=frame_map[k.frame_i], frame_j=frame_map[k.frame_j])
        for k in kps_inside
    ]
    problem = RegistrationProblem(
        poses=[RigidTransform.identity() for _ in range(fragment.n_frames)],
        pairs=local_pairs,
        keypoints=local_kps,
        options=opts,
    )
    result = solve(problem)
    solved = Fragment(
        id=fragment.id, start=fragment.start, end=fragment.end,
        local_poses=result.poses, pose=fragment.pose,
    )
    survivors = [
        pairs[idx].with_selection(float(s))
        for (idx, _), s in zip(inside, result.selections_cop)
        if s > 0.5
    ]
    return solved, survivors, result


def _to_fragment_coords_pair(
    pair: CoplanarPair, frag_of: Mapping[int, "Fragment"]
) -> CoplanarPair:
    fp = frag_of[pair.p.frame_id]
    fq = frag_of[pair.q.frame_id]
    p_local = pair.p.transformed(fp.local_pose_of(pair.p.frame_id))
    q_local = pair.q.transformed(fq.local_pose_of(pair.q.frame_id))
    return replace(
        pair,
        p=replace(p_local, frame_id=fp.id),
        q=replace(q_local, frame_id=fq.id),
    )


def register_inter(
    fragments: Sequence[Fragment],
    cross_pairs: Sequence[CoplanarPair],
    cross_keypoints: Sequence[KeypointMatch] = (),
    params: PipelineParams | None = None,
) -> tuple[list[Fragment], SolveResult]:
    """One registration over whole-fragment poses (fragment 0 pinned).

    Constraint endpoints are given with *fragment* ids and geometry already
    expressed in fragment coordinates (see `_to_fragment_coords_pair`);
    frames stay rigid within their fragments.
    """
    prm = params or PipelineParams()
    problem = RegistrationProblem(
        poses=[RigidTransform.identity() for _ in fragments],
        pairs=list(cross_pairs),
        keypoints=list(cross_keypoints),
        options=prm.solver,
    )
    result = solve(problem)
    solved = [
        Fragment(id=f.id, start=f.start, end=f.end,
                 local_poses=list(f.local_poses), pose=pose)
        for f, pose in zip(fragments, result.poses)
    ]
    return solved, result


def compose_trajectory(
    fragments: Sequence[Fragment], n_frames: int | None = None
) -> list[RigidTransform]:
    """Global pose per frame: fragment pose composed with the local pose.
    Frames inside an overlap take the earlier fragment's composition."""
    if not fragments:
        raise ValueError("no fragments")
    n = n_frames if n_frames is not None else max(f.end for f in fragments) + 1
    poses: list[RigidTransform | None] = [None] * n
    for frag in sorted(fragments, key=lambda f: f.start):
        for frame in range(frag.start, frag.end + 1):
            if frame < n and poses[frame] is None:
                poses[frame] = frag.pose.compose(frag.local_pose_of(frame))
    for k, pose in enumerate(poses):
        if pose is None:
            raise ValueError(f"frame {k} not covered by any fragment")
    return poses  # type: ignore[return-value]


def _overlap_discrepancy(fragments: Sequence[Fragment]) -> float:
    """Diagnostic: worst positional disagreement on frames two fragments share."""
    worst = 0.0
    ordered = sorted(fragments, key=lambda f: f.start)
    for a, b in zip(ordered, ordered[1:]):
        for frame in range(b.start, min(a.end, b.end) + 1):
            pa = a.pose.compose(a.local_pose_of(frame))
            pb = b.pose.compose(b.local_pose_of(frame))
            worst = max(worst, float(np.linalg.norm(pa.translation - pb.translation)))
    return worst


def _dedup_fragment_patches(
    fragment: Fragment,
    patches_by_frame: Sequence[Sequence[PlanePatch]],
    vectors: Mapping[tuple[int, int], np.ndarray],
    angle_deg: float,
    offset_m: float,
) -> tuple[list[PlanePatch], dict[tuple[int, int], np.ndarray]]:
    """Representative patches of one fragment, in fragment coordinates.

    Patches whose fragment-frame planes agree within the angle/offset gates
    merge; the representative is the merged patch with the largest pixel
    support, carrying its own observed sample cloud and descriptor (cloud
    and descriptor must stay those of one real observation so that sample
    -overlap verification against another fragment's representative remains
    meaningful).  Representatives are re-keyed to (fragment id, new id).
    """
    cos_gate = float(np.cos(np.radians(angle_deg)))
    reps: list[tuple[PlanePatch, PlanePatch]] = []  # (fragment coords, original)
    for frame in range(fragment.start, fragment.end + 1):
        if frame >= len(patches_by_frame):
            continue
        local_pose = fragment.local_pose_of(frame)
        for patch in patches_by_frame[frame]:
            moved = patch.transformed(local_pose)
            merged = False
            for i, (rep, rep_orig) in enumerate(reps):
                if float(rep.plane.normal @ moved.plane.normal) < cos_gate:
                    continue
                off = abs(float(rep.plane.normal @ (moved.plane.point - rep.plane.point)))
                if off > offset_m:
                    continue
                if patch.pixel_count > rep_orig.pixel_count:
                    reps[i] = (moved, patch)
                merged = True
                break
            if not merged:
                reps.append((moved, patch))
    out_patches: list[PlanePatch] = []
    out_vectors: dict[tuple[int, int], np.ndarray] = {}
    for new_id, (rep, orig) in enumerate(reps):
        relabeled = replace(rep, frame_id=fragment.id, id=new_id)
        out_patches.append(relabeled)
        out_vectors[(fragment.id, new_id)] = vectors[orig.key]
    return out_patches, out_vectors


class _TableProvider:
    """Descriptor lookup over precomputed vectors (keyed by patch.key)."""

    def __init__(self, table: Mapping[tuple[int, int], np.ndarray]) -> None:
        self._table = dict(table)
        self.dim = len(next(iter(self._table.values()))) if self._table else 0

    def describe(self, patch: PlanePatch) -> np.ndarray:
        return self._table[patch.key]


def _fragment_pair_seed(base_seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence((base_seed, i, j)).generate_state(1)[0])


def register_sequence(
    patches_by_frame: Sequence[Sequence[PlanePatch]],
    provider: DescriptorProvider,
    keypoints: Sequence[KeypointMatch] = (),
    params: PipelineParams | None = None,
    rng_seed: int = 0,
) -> PipelineResult:
    """Full hierarchical registration of a patch sequence.

    Proposes coplanar pairs from descriptors, solves each fragment, verifies
    cross-fragment candidates with RANSAC per fragment pair, solves the
    fragment-level problem, and composes per-frame global poses.
    """
    prm = params or PipelineParams()
    n = len(patches_by_frame)
    fragments = partition(n, prm)
    frag_of: dict[int, Fragment] = {}
    for frag in fragments:  # earliest fragment wins for overlap frames
        for frame in range(frag.start, frag.end + 1):
            frag_of.setdefault(frame, frag)

    all_pairs = propose_pairs(patches_by_frame, provider, prm.d_f_threshold)

    def same_fragment(pair: CoplanarPair) -> bool:
        return any(
            f.contains(pair.p.frame_id) and f.contains(pair.q.frame_id)
            for f in fragments
        )

    intra_pairs = [p for p in all_pairs if same_fragment(p)]
    intra_survivors: list[CoplanarPair] = []
    intra_results: list[SolveResult] = []
    solved_fragments: list[Fragment] = []
    for frag in fragments:
        solved, survivors, result = register_intra(frag, intra_pairs, keypoints, prm.solver)
        solved_fragments.append(solved)
        intra_results.append(result)
        intra_survivors.extend(survivors)
    fragments = solved_fragments
    frag_of = {}
    for frag in fragments:
        for frame in range(frag.start, frag.end + 1):
            frag_of.setdefault(frame, frag)

    if len(fragments) == 1:
        trajectory = compose_trajectory(fragments, n)
        return PipelineResult(
            trajectory=trajectory,
            fragments=fragments,
            intra_survivors=intra_survivors,
            inter_pairs=[],
            inter_keypoints=[],
            intra_results=intra_results,
            inter_result=None,
            overlap_discrepancy_m=0.0,
        )

    # Cross-fragment stage: representative patches per fragment, proposal,
    # then a RANSAC vote per fragment pair.
    flat = [p for frame in patches_by_frame for p in frame]
    vectors = describe_all(provider, flat)
    rep_groups: list[list[PlanePatch]] = []
    rep_vectors: dict[tuple[int, int], np.ndarray] = {}
    for frag in fragments:
        reps, vecs = _dedup_fragment_patches(
            frag, patches_by_frame, vectors, prm.dedup_angle_deg, prm.dedup_offset_m
        )
        rep_groups.append(reps)
        rep_vectors.update(vecs)
    candidates = propose_pairs(rep_groups, _TableProvider(rep_vectors), prm.d_f_threshold)

    cross_kps: dict[tuple[int, int], list[KeypointMatch]] = {}
    for kp in keypoints:
        fi, fj = frag_of[kp.frame_i], frag_of[kp.frame_j]
        if fi.id == fj.id:
            continue
        u = fi.local_pose_of(kp.frame_i).apply(kp.u)
        v = fj.local_pose_of(kp.frame_j).apply(kp.v)
        if fi.id > fj.id:  # one orientation per fragment pair, or the vote is garbage
            fi, fj, u, v = fj, fi, v, u
        moved = replace(kp, frame_i=fi.id, frame_j=fj.id, u=u, v=v)
        cross_kps.setdefault((fi.id, fj.id), []).append(moved)

    by_frag_pair: dict[tuple[int, int], list[CoplanarPair]] = {}
    for pair in candidates:
        key = tuple(sorted((pair.p.frame_id, pair.q.frame_id)))
        by_frag_pair.setdefault(key, []).append(pair)
    for key in cross_kps:
        by_frag_pair.setdefault(key, [])

    inter_pairs: list[CoplanarPair] = []
    inter_kps: list[KeypointMatch] = []
    for key in sorted(by_frag_pair):
        group = by_frag_pair[key]
        kps = cross_kps.get(key, [])
        verify_params = replace(prm.ransac, rng_seed=_fragment_pair_seed(rng_seed, *key))
        verdict = ransac_verify(group, kps, verify_params)
        if verdict.accepted:
            inter_pairs.extend(verdict.pairs)
            inter_kps.extend(verdict.keypoints)

    fragments, inter_result = register_inter(fragments, inter_pairs, inter_kps, prm)
    trajectory = compose_trajectory(fragments, n)
    return PipelineResult(
        trajectory=trajectory,
        fragments=fragments,
        intra_survivors=intra_survivors,
        inter_pairs=inter_pairs,
        inter_keypoints=inter_kps,
        intra_results=intra_results,
        inter_result=inter_result,
        overlap_discrepancy_m=_overlap_discrepancy(fragments),
    )
