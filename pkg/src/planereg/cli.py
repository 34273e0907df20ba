"""Command-line surface: synth, extract, propose, register, evaluate, sweep.

Every command reads one RunConfig (file + ``--set`` overrides), writes its
artifacts under ``paths.output_dir``, and is deterministic for a fixed
config: rerunning overwrites outputs byte-identically.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, config_to_text, load_config
from .descriptors import (
    ColorHistogramDescriptor,
    DescriptorProvider,
    FileDescriptorProvider,
    OraclePlaneDescriptor,
    feature_distance,
)
from .extraction import build_patch_inputs, segment_planar_patches
from .fileio import (
    DataError,
    export_patch_bundle,
    read_association,
    read_color,
    read_depth,
    read_embeddings,
    read_trajectory,
    write_color,
    write_depth,
    write_pairs_csv,
    write_patches_csv,
    write_pr_csv,
    write_trace_csv,
    write_trajectory,
)
from .geometry import CameraIntrinsics, Frame, PlanePatch, RigidTransform
from .matching import load_keypoint_matches, propose_pairs
from .metrics import DISTANCE_BINS, SIZE_BINS, ate_rmse, build_cop_set, pr_curve, robustness_sweep
from .pipeline import register_sequence
from .solver import RegistrationProblem, SolverError, solve, solve_coplanarity_only
from .synthetic import generate_scene, render_frame

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3

_MATCH_MAX_DT = 0.02  # nearest-timestamp association window, seconds


# ---------------------------------------------------------------------------
# shared plumbing


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigError(f"{key} must be set for this command")
    return value


def _check_dir(path: str, label: str) -> None:
    if path and not os.path.isdir(path):
        raise DataError(f"{label} not found: {path}")


def _load_frames(config: RunConfig) -> tuple[list[Frame], list[float]]:
    """Frames from the association file; color loaded when the file exists."""
    assoc = _require(config.association_file, "paths.association_file")
    _check_dir(config.depth_dir, "depth directory")
    _check_dir(config.rgb_dir, "rgb directory")
    rows = read_association(assoc)
    base = os.path.dirname(os.path.abspath(assoc))
    depth_base = config.depth_dir or base
    rgb_base = config.rgb_dir or base
    intr = CameraIntrinsics(config.fx, config.fy, config.cx, config.cy)

    frames: list[Frame] = []
    stamps: list[float] = []
    for idx, (ts_depth, depth_rel, _ts_rgb, rgb_rel) in enumerate(rows):
        depth_path = depth_rel if os.path.isabs(depth_rel) else os.path.join(depth_base, depth_rel)
        rgb_path = rgb_rel if os.path.isabs(rgb_rel) else os.path.join(rgb_base, rgb_rel)
        depth = read_depth(depth_path, config.depth_scale)
        color = read_color(rgb_path) if os.path.exists(rgb_path) else None
        frames.append(Frame(index=idx, depth=depth, intrinsics=intr, color=color,
                            timestamp=ts_depth))
        stamps.append(ts_depth)
    if not frames:
        raise DataError(f"association file is empty: {assoc}")
    return frames, stamps


def _extract_all(config: RunConfig, frames: list[Frame]) -> list[list[PlanePatch]]:
    return [
        segment_planar_patches(f, config.extraction, config.solver.samples_per_patch)
        for f in frames
    ]


def _provider(config: RunConfig, frames: list[Frame]) -> DescriptorProvider:
    if config.descriptor == "file":
        table, dim = read_embeddings(_require(config.embedding_file, "paths.embedding_file"))
        return FileDescriptorProvider(table, dim)
    if config.descriptor == "oracle":
        _, poses = read_trajectory(_require(config.groundtruth_file, "paths.groundtruth_file"))
        if len(poses) < len(frames):
            raise DataError("ground-truth trajectory has fewer poses than frames")
        return OraclePlaneDescriptor({i: p for i, p in enumerate(poses)})
    return ColorHistogramDescriptor({f.index: f for f in frames})


def _load_keypoints(config: RunConfig, frames: list[Frame]):
    if not config.keypoint_file:
        return []
    return load_keypoint_matches(config.keypoint_file, {f.index: f for f in frames})


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.output_dir, name)


# ---------------------------------------------------------------------------
# synth


def _project(intr: CameraIntrinsics, p: np.ndarray) -> tuple[float, float]:
    return (p[0] / p[2] * intr.fx + intr.cx, p[1] / p[2] * intr.fy + intr.cy)


def _synth_keypoints(scene, frames: list[Frame], seed: int, per_pair: int = 12) -> list[str]:
    """Verified pixel correspondences between adjacent rendered frames.

    Valid pixels of frame i are projected into frame i+1 through the ground
    truth; a row is kept only when the reprojected pixel sees compatible
    depth, so every line in the file is a genuine match.
    """
    rng = np.random.default_rng((seed, 9))
    lines: list[str] = []
    for i in range(len(frames) - 1):
        fa, fb = frames[i], frames[i + 1]
        rel = scene.trajectory[i + 1].inverse().compose(scene.trajectory[i])
        ok_r, ok_c = np.nonzero(fa.depth > 0)
        if ok_r.size == 0:
            continue
        order = rng.permutation(ok_r.size)
        kept = 0
        for k in order:
            if kept >= per_pair:
                break
            r, c = int(ok_r[k]), int(ok_c[k])
            z = float(fa.depth[r, c])
            intr = fa.intrinsics
            p = np.array([(c - intr.cx) / intr.fx * z, (r - intr.cy) / intr.fy * z, z])
            q = rel.apply(p)
            if q[2] <= 0:
                continue
            u, v = _project(fb.intrinsics, q)
            rb, cb = int(round(v)), int(round(u))
            hb, wb = fb.depth.shape
            if not (0 <= rb < hb and 0 <= cb < wb):
                continue
            if abs(float(fb.depth[rb, cb]) - float(q[2])) > 0.005:
                continue
            lines.append(f"{i} {float(c):.4f} {float(r):.4f} {i + 1} {u:.4f} {v:.4f}")
            kept += 1
    return lines


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    scene = generate_scene(config.scene)
    out = config.output_dir
    os.makedirs(os.path.join(out, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out, "rgb"), exist_ok=True)

    frames: list[Frame] = []
    assoc_lines: list[str] = []
    for i in range(scene.n_frames):
        frame = render_frame(scene, i, depth_sigma=config.scene.depth_sigma, with_color=True)
        frames.append(frame)
        write_depth(os.path.join(out, "depth", f"{i:06d}.png"), frame.depth, config.depth_scale)
        write_color(os.path.join(out, "rgb", f"{i:06d}.png"), frame.color)
        assoc_lines.append(f"{float(i):.6f} depth/{i:06d}.png {float(i):.6f} rgb/{i:06d}.png")

    with open(_out(config, "association.txt"), "w") as fh:
        fh.write("\n".join(assoc_lines) + "\n")
    write_trajectory(_out(config, "groundtruth.txt"), scene.trajectory,
                     [float(i) for i in range(scene.n_frames)])
    kp_lines = _synth_keypoints(scene, frames, config.seed)
    with open(_out(config, "keypoints.txt"), "w") as fh:
        fh.write("\n".join(kp_lines) + ("\n" if kp_lines else ""))

    h, w = config.scene.image_size
    runnable = replace(
        config,
        association_file=_out(config, "association.txt"),
        groundtruth_file=_out(config, "groundtruth.txt"),
        keypoint_file=_out(config, "keypoints.txt"),
        depth_dir="",
        rgb_dir="",
        fx=config.scene.fx,
        fy=config.scene.fy,
        cx=(w - 1) / 2.0,
        cy=(h - 1) / 2.0,
    )
    with open(_out(config, "synth.conf"), "w") as fh:
        fh.write(config_to_text(runnable))

    for warning in scene.warnings:
        print(f"warning: {warning}")
    print(f"synthesized {scene.n_frames} frames ({config.scene.preset}) into {out}")
    print(f"runnable config: {_out(config, 'synth.conf')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract / propose


def cmd_extract(config: RunConfig, args: argparse.Namespace) -> int:
    frames, _ = _load_frames(config)
    patches = _extract_all(config, frames)
    write_patches_csv(_out(config, "patches.csv"),
                      {f.index: pts for f, pts in zip(frames, patches)})
    total = sum(len(p) for p in patches)
    if args.export_bundles:
        for frame, frame_patches in zip(frames, patches):
            for patch in frame_patches:
                bundle = build_patch_inputs(frame, patch, config.extraction)
                export_patch_bundle(
                    os.path.join(config.output_dir, "bundles",
                                 f"f{frame.index:04d}_p{patch.id:03d}"),
                    patch, bundle, config.depth_scale,
                )
    print(f"extracted {total} patches from {len(frames)} frames "
          f"-> {_out(config, 'patches.csv')}")
    return EXIT_OK


def cmd_propose(config: RunConfig, args: argparse.Namespace) -> int:
    frames, _ = _load_frames(config)
    patches = _extract_all(config, frames)
    provider = _provider(config, frames)
    pairs = propose_pairs(patches, provider, config.pipeline.d_f_threshold)
    write_pairs_csv(_out(config, "pairs.csv"), pairs)
    print(f"proposed {len(pairs)} candidate pairs -> {_out(config, 'pairs.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register


def cmd_register(config: RunConfig, args: argparse.Namespace) -> int:
    frames, stamps = _load_frames(config)
    patches = _extract_all(config, frames)
    keypoints = _load_keypoints(config, frames)
    n = len(frames)

    if args.coplanarity_only:
        provider = _provider(config, frames)
        pairs = propose_pairs(patches, provider, config.pipeline.d_f_threshold)
        problem = RegistrationProblem(
            poses=[RigidTransform.identity() for _ in range(n)],
            pairs=pairs,
            options=config.solver,
        )
        result = solve_coplanarity_only(problem)
        survivors = [p for p in result.pairs if p.selection > 0.5]
        trajectory, trace, selected = result.poses, result.trace, survivors
        converged = result.converged
    elif args.keypoints_only:
        if not keypoints:
            raise DataError("keypoints-only registration requires paths.keypoint_file")
        problem = RegistrationProblem(
            poses=[RigidTransform.identity() for _ in range(n)],
            keypoints=keypoints,
            options=config.solver,
        )
        result = solve(problem)
        trajectory, trace, selected = result.poses, result.trace, []
        converged = result.converged
    else:
        provider = _provider(config, frames)
        outcome = register_sequence(patches, provider, keypoints,
                                    config.pipeline, rng_seed=config.seed)
        final = outcome.inter_result or outcome.intra_results[-1]
        trajectory = outcome.trajectory
        trace = final.trace
        selected = list(outcome.intra_survivors) + list(outcome.inter_pairs)
        converged = final.converged

    write_trajectory(_out(config, "trajectory.txt"), trajectory, stamps)
    write_trace_csv(_out(config, "trace.csv"), trace)
    write_pairs_csv(_out(config, "selected_pairs.csv"), selected)
    print(f"registered {n} frames; {len(selected)} constraints kept; "
          f"converged={str(converged).lower()}")
    print(f"trajectory -> {_out(config, 'trajectory.txt')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / sweep


def _match_by_timestamp(
    est: tuple[list[float], list[RigidTransform]],
    gt: tuple[list[float], list[RigidTransform]],
) -> tuple[list[RigidTransform], list[RigidTransform]]:
    ts_e, poses_e = est
    ts_g, poses_g = gt
    order = np.argsort(ts_g)
    ts_sorted = np.asarray(ts_g)[order]
    out_e: list[RigidTransform] = []
    out_g: list[RigidTransform] = []
    for t, pose in zip(ts_e, poses_e):
        k = int(np.searchsorted(ts_sorted, t))
        best, best_dt = None, _MATCH_MAX_DT
        for j in (k - 1, k):
            if 0 <= j < len(ts_sorted):
                dt = abs(float(ts_sorted[j]) - t)
                if dt <= best_dt:
                    best, best_dt = int(order[j]), dt
        if best is not None:
            out_e.append(pose)
            out_g.append(poses_g[best])
    if not out_e:
        raise DataError("no trajectory timestamps matched the ground truth")
    return out_e, out_g


def _pr_provider(config: RunConfig, scene) -> DescriptorProvider:
    if config.descriptor == "file":
        table, dim = read_embeddings(_require(config.embedding_file, "paths.embedding_file"))
        return FileDescriptorProvider(table, dim)
    if config.descriptor == "oracle":
        return OraclePlaneDescriptor({i: p for i, p in enumerate(scene.trajectory)})
    raise ConfigError("pr evaluation needs run.descriptor = oracle or file")


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    if args.mode == "ate":
        est_path = args.trajectory or _out(config, "trajectory.txt")
        gt_path = _require(config.groundtruth_file, "paths.groundtruth_file")
        est, gt = read_trajectory(est_path), read_trajectory(gt_path)
        poses_e, poses_g = _match_by_timestamp(est, gt)
        value = ate_rmse(poses_e, poses_g, align=args.align)
        line = f"ate_rmse_m {value:.6f}"
        print(line)
        with open(_out(config, "ate.txt"), "w") as fh:
            fh.write(line + "\n")
        return EXIT_OK

    # mode == "pr": benchmark pairs from the configured synthetic scene
    if args.count % 12 != 0:
        raise ConfigError("--count must be divisible by 12 (six subsets, balanced)")
    if config.descriptor not in ("oracle", "file"):
        # reject before the scene is generated; building it can take seconds
        raise ConfigError("pr evaluation needs run.descriptor = oracle or file")
    scene = generate_scene(config.scene)
    cop = build_cop_set(scene, count=args.count, rng_seed=config.seed)
    provider = _pr_provider(config, scene)
    try:
        vectors = {
            key: provider.describe(patch)
            for pair in cop.pairs
            for key, patch in ((pair.p.key, pair.p), (pair.q.key, pair.q))
        }
    except KeyError as exc:
        raise DataError(f"embedding missing for patch {exc}") from None

    def curve(pairs):
        scores = [feature_distance(vectors[p.p.key], vectors[p.q.key]) for p in pairs]
        labels = [p.label for p in pairs]
        return pr_curve(scores, labels)

    points, auc = curve(cop.pairs)
    write_pr_csv(_out(config, "pr.csv"), points, auc)
    print(f"pr_auc overall {auc:.4f}")
    for name in list(SIZE_BINS) + list(DISTANCE_BINS):
        sub = cop.subset(name)
        if not sub:
            continue
        pts, sub_auc = curve(sub)
        write_pr_csv(_out(config, f"pr_{name}.csv"), pts, sub_auc)
        print(f"pr_auc {name} {sub_auc:.4f}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> int:
    scene = generate_scene(config.scene)
    rows = robustness_sweep(
        scene,
        config.sweep_ratios,
        options=config.solver,
        pairs_per_run=config.sweep_pairs,
        rng_seed=config.seed,
        csv_path=_out(config, "sweep.csv"),
    )
    for ratio, ate in rows:
        print(f"outlier_ratio {ratio:.2f} ate_rmse_m {ate:.6f}")
    print(f"sweep -> {_out(config, 'sweep.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="run configuration file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config key (repeatable)")
    sub.add_argument("--output-dir", help="shorthand for --set paths.output_dir=...")
    sub.add_argument("--seed", type=int, help="shorthand for --set run.seed=...")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planereg",
        description="Coplanarity-driven RGB-D registration workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic RGB-D sequence with ground truth")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="segment planar patches from a depth sequence")
    _add_common(p)
    p.add_argument("--export-bundles", action="store_true",
                   help="also write per-patch two-scale crop bundles")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("propose", help="propose coplanar patch pairs from descriptors")
    _add_common(p)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("register", help="estimate the trajectory from patches and keypoints")
    _add_common(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--coplanarity-only", action="store_true",
                      help="planes only: anisotropic per-frame schedule, no keypoints")
    mode.add_argument("--keypoints-only", action="store_true",
                      help="ablation: drop all coplanarity terms")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a trajectory (ate) or descriptors (pr)")
    _add_common(p)
    p.add_argument("--mode", choices=("ate", "pr"), default="ate")
    p.add_argument("--trajectory", help="estimated trajectory (default: <output_dir>/trajectory.txt)")
    p.add_argument("--align", action="store_true",
                   help="rigidly align trajectories before the ATE (Horn)")
    p.add_argument("--count", type=int, default=600,
                   help="benchmark pair budget for --mode pr")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="ATE versus planted outlier ratio on a synthetic scene")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def _configure(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"paths.output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return apply_overrides(config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return EXIT_USAGE if code != 0 else EXIT_OK
    try:
        config = _configure(args)
        os.makedirs(config.output_dir, exist_ok=True)
        return args.func(config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
