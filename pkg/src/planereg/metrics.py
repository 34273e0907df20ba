"""Evaluation metrics: trajectory error, precision-recall over descriptor
distances, the binned coplanarity benchmark, and outlier-robustness sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fileio import write_sweep_csv
from .geometry import PlanePatch, RigidTransform
from .solver import SolverOptions, solve
from .synthetic import SyntheticScene, make_proposals, problem_from_scene

__all__ = [
    "SIZE_BINS",
    "DISTANCE_BINS",
    "CopBenchmarkSet",
    "CopPair",
    "ate_rmse",
    "pr_curve",
    "build_cop_set",
    "robustness_sweep",
]

# Subset ranges in m^2 (sizes) and meters (pair centroid distances); each
# range is half-open (lo, hi] except the lowest, which includes 0.
SIZE_BINS: dict[str, tuple[float, float]] = {
    "S1": (0.25, 10.0),
    "S2": (0.05, 0.25),
    "S3": (0.0, 0.05),
}
DISTANCE_BINS: dict[str, tuple[float, float]] = {
    "D1": (0.0, 0.3),
    "D2": (0.3, 1.0),
    "D3": (1.0, 5.0),
}


def _positions(trajectory: Sequence[RigidTransform]) -> np.ndarray:
    return np.stack([t.translation for t in trajectory])


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rigid fit (no scale): returns src mapped onto dst.

    Closed form via the SVD of the centered cross-covariance; the reflection
    guard keeps the fit a proper rotation.
    """
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (src - src_mean).T @ (dst - dst_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return (src - src_mean) @ rot.T + dst_mean


def ate_rmse(
    estimated: Sequence[RigidTransform],
    ground_truth: Sequence[RigidTransform],
    align: bool = False,
) -> float:
    """RMSE of camera positions, optionally after rigid alignment."""
    if len(estimated) != len(ground_truth):
        raise ValueError(
            f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}"
        )
    if not estimated:
        raise ValueError("trajectories are empty")
    est = _positions(estimated)
    gt = _positions(ground_truth)
    if align:
        est = _rigid_align(est, gt)
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


def pr_curve(
    scores: Sequence[float], labels: Sequence[bool]
) -> tuple[list[tuple[float, float]], float]:
    """Precision-recall sweep for a distance-like score (small = positive).

    The classifier at threshold t predicts positive when score <= t; the
    sweep visits every distinct score ascending.  The curve is anchored at
    (precision 1, recall 0) and the area is the trapezoid sum over recall.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("labels are degenerate: need at least one positive and one negative")

    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    predicted = np.arange(1, s.size + 1)
    # Evaluate at the last index of each distinct score (ties share a threshold).
    last_of_value = np.nonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])[0]
    precision = tp[last_of_value] / predicted[last_of_value]
    recall = tp[last_of_value] / n_pos

    points = [(1.0, 0.0)] + [
        (float(p), float(r)) for p, r in zip(precision, recall)
    ]
    auc = 0.0
    for (p0, r0), (p1, r1) in zip(points, points[1:]):
        auc += (r1 - r0) * 0.5 * (p0 + p1)
    return points, float(auc)


@dataclass(frozen=True, eq=False)
class CopPair:
    p: PlanePatch
    q: PlanePatch
    area_m2: float          # mean of the two patch areas
    distance_m: float       # world-frame centroid distance under GT poses
    label: bool
    size_bin: str
    distance_bin: str
    subset: str             # which quota this pair filled


@dataclass(eq=False)
class CopBenchmarkSet:
    pairs: list[CopPair] = field(default_factory=list)

    def subset(self, name: str) -> list[CopPair]:
        return [p for p in self.pairs if p.subset == name]

    def counts(self) -> dict[str, tuple[int, int]]:
        """Per subset: (positives, negatives)."""
        out: dict[str, tuple[int, int]] = {}
        for name in list(SIZE_BINS) + list(DISTANCE_BINS):
            sub = self.subset(name)
            pos = sum(1 for p in sub if p.label)
            out[name] = (pos, len(sub) - pos)
        return out


def _bin_of(value: float, bins: Mapping[str, tuple[float, float]]) -> str | None:
    for name, (lo, hi) in bins.items():
        if (value > lo or (lo == 0.0 and value >= 0.0)) and value <= hi:
            return name
    return None


def build_cop_set(
    scene: SyntheticScene | Sequence[SyntheticScene],
    count: int = 600,
    rng_seed: int = 0,
) -> CopBenchmarkSet:
    """Balanced benchmark pairs organized by patch size and pair distance.

    `count` splits evenly over the six subsets (S1-S3 by mean patch area,
    D1-D3 by ground-truth centroid distance), each half positive and half
    negative, drawn without replacement across subsets.
    """
    scenes = [scene] if isinstance(scene, SyntheticScene) else list(scene)
    if count % 12 != 0:
        raise ValueError("count must be divisible by 12 (six subsets, balanced labels)")
    quota = count // 6

    candidates: list[tuple[int, float, float, bool, str, str]] = []
    tagged: list[tuple[PlanePatch, PlanePatch, int]] = []
    for si, sc in enumerate(scenes):
        poses = sc.trajectory
        for fi in range(sc.n_frames):
            for fj in range(fi + 1, sc.n_frames):
                for p in sc.patches_by_frame[fi]:
                    for q in sc.patches_by_frame[fj]:
                        area = 0.5 * (p.area + q.area)
                        cp = poses[p.frame_id].apply(p.centroid)
                        cq = poses[q.frame_id].apply(q.centroid)
                        dist = float(np.linalg.norm(cp - cq))
                        sb = _bin_of(area, SIZE_BINS)
                        db = _bin_of(dist, DISTANCE_BINS)
                        if sb is None or db is None:
                            continue
                        label = sc.coplanar(p, q)
                        candidates.append(
                            (len(tagged), area, dist, label, sb, db)
                        )
                        tagged.append((p, q, si))

    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(candidates))
    used: set[int] = set()
    out = CopBenchmarkSet()
    for subset in list(SIZE_BINS) + list(DISTANCE_BINS):
        axis = 4 if subset in SIZE_BINS else 5
        for want_label in (True, False):
            picked = 0
            for k in order:
                if picked == quota // 2:
                    break
                idx, area, dist, label, sb, db = candidates[k]
                if idx in used or label is not want_label:
                    continue
                if (sb, db)[axis - 4] != subset:
                    continue
                p, q, _ = tagged[idx]
                out.pairs.append(
                    CopPair(
                        p=p, q=q, area_m2=area, distance_m=dist, label=label,
                        size_bin=sb, distance_bin=db, subset=subset,
                    )
                )
                used.add(idx)
                picked += 1
            if picked < quota // 2:
                kind = "positive" if want_label else "negative"
                raise ValueError(
                    f"cannot fill subset {subset}: needed {quota // 2} "
                    f"{kind} pairs, found {picked}"
                )
    return out


def robustness_sweep(
    scene: SyntheticScene,
    ratios: Sequence[float],
    options: SolverOptions | None = None,
    pairs_per_run: int = 200,
    rng_seed: int = 0,
    csv_path=None,
) -> list[tuple[float, float]]:
    """Registration accuracy vs. planted-outlier fraction.

    For each ratio a fresh proposal set with that outlier fraction is solved
    from identity and scored against the generating trajectory (no alignment
    — frame 0 is the shared gauge).
    """
    opts = options or SolverOptions()
    rows: list[tuple[float, float]] = []
    for i, ratio in enumerate(ratios):
        if not (0.0 <= ratio < 1.0):
            raise ValueError("outlier ratios must lie in [0, 1)")
        pairs, _ = make_proposals(
            scene, pairs_per_run, outlier_fraction=ratio, rng_seed=(rng_seed, i)
        )
        result = solve(problem_from_scene(scene, pairs, options=opts))
        rows.append((float(ratio), ate_rmse(result.poses, scene.trajectory)))
    if csv_path is not None:
        write_sweep_csv(csv_path, rows)
    return rows
