"""Command-line entry points: ``pcof train | detect | eval | bench | synth``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import statistics
import sys
import time
from pathlib import Path

import cv2
import numpy as np

from .errors import InvalidArgumentError, ModelFormatError, PcofError
from .evalkit import (
    EvalConfig, f1_sweep, match_detections, pose_error, random_pose_in_range, read_ground_truth, synth_scene,
    write_ground_truth, write_metrics_csv,
)
from .features import DEFAULT_MAG_THRESH
from .geometry import PoseRange, build_pose_lattice
from .meshes import load_mesh, toy_object
from .modelfile import read_model, write_model
from .pipeline import Timings, estimate_poses
from .render import CameraIntrinsics, depth_to_png_array, project, render_depth
from .templates import TrainingConfig, build_bpt

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config values or missing inputs (exit code 2)."""


# --------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    # camera
    fx: float = 572.4
    fy: float = 572.4
    cx: float = 325.26
    cy: float = 242.05
    width: int = 640
    height: int = 480
    # pose range and leaf lattice steps
    cap_deg: float = 25.0
    roll_min: float = -12.0
    roll_max: float = 12.0
    dist_min: float = 565.0
    dist_max: float = 635.0
    leaf_roll_step: float = 6.0
    leaf_dist_step: float = 70.0
    # training
    n_renders: int = 50
    th_grad: float = 5.0
    th_norm: float = 10.0
    jitter_tilt_deg: float = 5.0
    jitter_roll_deg: float = 3.75
    jitter_dist_mm: float = 40.0
    normal_window: int = 5
    frontal_cutoff_deg: float = 15.0
    max_jump_mm: float = 20.0
    # detection
    threshold: float = 0.4
    nms_radius: float = 0.0  # 0 = half the projected object diameter
    mag_thresh: float = DEFAULT_MAG_THRESH
    scene_normal_window: int = 7
    icp: bool = True
    max_results: int = 0  # 0 = unlimited
    # evaluation
    k_m: float = 0.15
    max_pos_mm: float = 5.0
    max_rot_deg: float = 7.5
    mode: str = "axes"
    # execution
    threads: int = 0  # 0 = PCOF_THREADS or all cores
    seed: int = 0

    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def pose_range(self):
        return PoseRange(self.cap_deg, self.roll_min, self.roll_max, self.dist_min, self.dist_max)

    def training(self):
        return TrainingConfig(
            n_renders=self.n_renders, th_grad=self.th_grad, th_norm=self.th_norm,
            jitter_tilt_deg=self.jitter_tilt_deg, jitter_roll_deg=self.jitter_roll_deg,
            jitter_dist_mm=self.jitter_dist_mm, normal_window=self.normal_window,
            frontal_cutoff_deg=self.frontal_cutoff_deg, max_jump_mm=self.max_jump_mm, seed=self.seed,
        )

    def eval_config(self):
        return EvalConfig(self.k_m, self.max_pos_mm, self.max_rot_deg, self.mode)

    def validate(self):
        if not 0.0 < self.threshold <= 1.0:
            raise UsageError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.nms_radius < 0:
            raise UsageError("nms_radius must be >= 0")
        if self.threads < 0:
            raise UsageError("threads must be >= 0")
        if self.scene_normal_window < 3 or self.scene_normal_window % 2 == 0:
            raise UsageError("scene_normal_window must be an odd integer >= 3")
        try:
            self.intrinsics()
            self.pose_range()
            self.training()
            self.eval_config()
        except InvalidArgumentError as e:
            raise UsageError(str(e)) from None
        return self


def _coerce(name, typ, text):
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise UsageError(f"{name}: expected {typ.__name__}, got {text!r}") from None


_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}


def parse_config_text(text, base=None, source="<config>"):
    """Apply ``key = value`` lines onto ``base``; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise UsageError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, _FIELD_TYPES[key], value)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config not found: {p}")
        cfg = parse_config_text(p.read_text(), cfg, str(p))
    if overrides:
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def format_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def resolve_threads(flag_value):
    if flag_value:
        return flag_value
    env = os.environ.get("PCOF_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"PCOF_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("PCOF_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# image I/O


def read_gray(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"gray image not found: {p}")
    img = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise PcofError(f"cannot decode image {p}")
    return img


def read_depth(path):
    """Depth in mm from a 16-bit PNG or a ``.npy`` array; 0 marks missing pixels."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"depth image not found: {p}")
    if p.suffix.lower() == ".npy":
        return np.load(p).astype(np.float32)
    img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 2:
        raise PcofError(f"cannot decode single-channel depth image {p}")
    return img.astype(np.float32)


def write_depth(depth, path):
    p = Path(path)
    if p.suffix.lower() == ".npy":
        np.save(p, depth.astype(np.float32))
    else:
        cv2.imwrite(str(p), depth_to_png_array(depth))


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model not found: {p}")
    return read_model(p)


def _check_size(img, K, what):
    if img.shape != K.shape:
        raise PcofError(f"{what} size mismatch: expected {K.width}x{K.height}, got {img.shape[1]}x{img.shape[0]}")


# --------------------------------------------------------------------------
# output


def detection_line(result):
    d = result.detection
    nums = [*result.pose.R.ravel().tolist(), *result.pose.t.tolist()]
    return " ".join([f"{d.score:.6f}", str(d.x), str(d.y)] + [f"{v:.6f}" for v in nums])


def draw_overlay(gray, results, tree):
    """Color copy of ``gray`` with each detection's rendered contour and model axes."""
    K, mesh = tree.intrinsics, tree.mesh
    canvas = cv2.cvtColor(gray, cv2.COLOR_GRAY2BGR)
    axis_len = 0.5 * tree.diameter
    for res in results:
        pose = res.pose
        if mesh is not None:
            mask = (render_depth(mesh, pose, K) > 0).astype(np.uint8)
            contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
            cv2.drawContours(canvas, contours, -1, (0, 255, 0), 1)
        pts = np.vstack([np.zeros(3), np.eye(3) * axis_len])
        uv = project(pose.apply(pts), K)
        o = tuple(int(round(v)) for v in uv[0])
        for k, color in enumerate(((0, 0, 255), (0, 255, 0), (255, 0, 0))):
            cv2.line(canvas, o, tuple(int(round(v)) for v in uv[k + 1]), color, 2)
    return canvas


# --------------------------------------------------------------------------
# commands


def cmd_train(args, cfg):
    try:
        mesh = load_mesh(args.mesh)
    except FileNotFoundError:
        raise UsageError(f"mesh not found: {args.mesh}") from None
    K = cfg.intrinsics()
    lattice = build_pose_lattice(cfg.pose_range(), cfg.leaf_roll_step, cfg.leaf_dist_step)
    threads = resolve_threads(cfg.threads)
    t0 = time.perf_counter()

    def progress(done, total):
        if args.verbose:
            print(f"  leaves {done}/{total}", file=sys.stderr)

    tree = build_bpt(mesh, lattice, K, cfg.training(), threads=threads, progress=progress)
    elapsed = time.perf_counter() - t0
    write_model(tree, args.out)
    print(f"model written to {args.out}")
    for depth, s in tree.stats.items():
        g, n = s["grad_features"], s["norm_features"]
        print(f"depth {depth}: {s['nodes']} nodes, gradient features min/mean/max {g[0]}/{g[1]:.1f}/{g[2]}, "
              f"normal features {n[0]}/{n[1]:.1f}/{n[2]}")
    print(f"training time {elapsed:.1f} s on {threads} thread(s)")
    return EXIT_OK


def _estimate(tree, gray, depth, cfg, timings=None, rearranged=True):
    return estimate_poses(
        gray, depth, tree, cfg.threshold, nms_radius=cfg.nms_radius or None, icp=cfg.icp, rearranged=rearranged,
        timings=timings, mag_thresh=cfg.mag_thresh, normal_window=cfg.scene_normal_window,
        max_results=cfg.max_results or None,
    )


def cmd_detect(args, cfg):
    tree = _load_model(args.model)
    gray, depth = read_gray(args.gray), read_depth(args.depth)
    _check_size(gray, tree.intrinsics, "gray image")
    _check_size(depth, tree.intrinsics, "depth image")
    timings = Timings()
    results = _estimate(tree, gray, depth, cfg, timings)
    prefix = Path(args.out)
    det_path = prefix.with_name(prefix.name + ".txt")
    png_path = prefix.with_name(prefix.name + ".png")
    det_path.write_text("".join(detection_line(r) + "\n" for r in results))
    cv2.imwrite(str(png_path), draw_overlay(gray, results, tree))
    print(f"{len(results)} detection(s) written to {det_path}, overlay {png_path}")
    for stage, seconds in timings.as_dict().items():
        print(f"  {stage:<10} {1000 * seconds:9.1f} ms")
    return EXIT_OK


def read_scene_list(path):
    """Lines ``scene_id gray_path depth_path``; relative paths resolve against the list's directory."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"scene list not found: {p}")
    out = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if len(parts) != 3:
            raise UsageError(f"{p}:{n}: expected 'scene_id gray depth'")
        sid, g, d = parts
        out.append((sid, p.parent / g, p.parent / d))
    return out


def cmd_eval(args, cfg):
    tree = _load_model(args.model)
    scenes = read_scene_list(args.scenes)
    gt_path = Path(args.gt)
    if not gt_path.is_file():
        raise UsageError(f"ground-truth file not found: {gt_path}")
    gts = read_ground_truth(gt_path)
    gt_ids = {g.scene_id for g in gts}
    missing = [sid for sid, _, _ in scenes if sid not in gt_ids]
    if missing:
        raise PcofError(f"no ground truth for scene id(s): {', '.join(missing)}")
    ecfg = cfg.eval_config()
    dets = {}
    for sid, g, d in scenes:
        gray, depth = read_gray(g), read_depth(d)
        _check_size(gray, tree.intrinsics, f"scene {sid} gray image")
        _check_size(depth, tree.intrinsics, f"scene {sid} depth image")
        dets[sid] = [(r.detection.score, r.pose) for r in _estimate(tree, gray, depth, cfg)]
    pts, d_obj = (tree.mesh.vertices, tree.diameter) if tree.mesh is not None else (None, None)
    used = [g for g in gts if g.scene_id in dets]
    rows = f1_sweep(dets, used, ecfg, pts, d_obj)
    write_metrics_csv(rows, args.out)
    best = max(rows, key=lambda r: r["f1"])
    print(f"metrics written to {args.out}; best F1 {best['f1']:.3f} at threshold {best['threshold']:.3f}")
    flat = sorted(((s, sid, pose) for sid, lst in dets.items() for s, pose in lst), key=lambda t: -t[0])
    matched = match_detections(dets, used, ecfg, pts, d_obj)
    errors = [pose_error(pose, used[m].pose) for (_, _, pose), (_, m) in zip(flat, matched) if m is not None]
    if errors:
        mean = np.mean(errors, axis=0)
        names = ("x", "y", "z", "rx", "ry", "rz")
        units = ("mm",) * 3 + ("deg",) * 3
        print(f"mean absolute errors over {len(errors)} correct detection(s):")
        for name, v, u in zip(names, mean, units):
            print(f"  {name:<3} {v:8.3f} {u}")
    else:
        print("no correct detections")
    return EXIT_OK


def cmd_bench(args, cfg):
    tree = _load_model(args.model)
    gray, depth = read_gray(args.gray), read_depth(args.depth)
    _check_size(gray, tree.intrinsics, "gray image")
    _check_size(depth, tree.intrinsics, "depth image")
    if args.repetitions < 1:
        raise UsageError("repetitions must be >= 1")
    bench_cfg = dataclasses.replace(cfg, icp=False)
    # compile and pack outside the timed runs
    _estimate(tree, gray, depth, bench_cfg, rearranged=True)
    _estimate(tree, gray, depth, bench_cfg, rearranged=False)
    samples = {True: [], False: []}
    outputs = {}
    for _ in range(args.repetitions):
        for rearranged in (False, True):
            t = Timings()
            res = _estimate(tree, gray, depth, bench_cfg, timings=t, rearranged=rearranged)
            samples[rearranged].append(t)
            outputs[rearranged] = [(r.detection.node, r.detection.x, r.detection.y, r.detection.score) for r in res]
    same = outputs[True] == outputs[False]
    print(f"median over {args.repetitions} run(s):")
    medians = {}
    for rearranged, label in ((False, "naive"), (True, "rearranged")):
        med = {k: statistics.median(t.as_dict()[k] for t in samples[rearranged]) for k in ("pyramid", "rearrange",
                                                                                            "search")}
        medians[rearranged] = med["rearrange"] + med["search"]
        stages = ", ".join(f"{k} {1000 * v:.1f} ms" for k, v in med.items())
        print(f"  {label:<10} {stages}; search total {1000 * medians[rearranged]:.1f} ms")
    speedup = medians[False] / medians[True] if medians[True] > 0 else float("inf")
    print(f"speedup rearranged/naive: {speedup:.2f}x")
    print(f"identical detections: {'yes' if same else 'NO'} ({len(outputs[True])} detection(s))")
    return EXIT_OK if same else EXIT_RUNTIME


def cmd_synth(args, cfg):
    """Write seeded synthetic scenes of the built-in toy object (or ``--mesh``) plus a scene list and ground truth."""
    if args.mesh:
        try:
            mesh = load_mesh(args.mesh)
        except FileNotFoundError:
            raise UsageError(f"mesh not found: {args.mesh}") from None
    else:
        mesh = toy_object()
    if args.count < 1:
        raise UsageError("count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    K, prange = cfg.intrinsics(), cfg.pose_range()
    rng = np.random.default_rng(cfg.seed)
    records, lines = [], []
    for i in range(args.count):
        sid = f"{i:04d}"
        pose = random_pose_in_range(prange, K, rng)
        gray, depth, rec = synth_scene([(mesh, pose)], K, noise_sigma=args.noise, dropout_rate=args.dropout,
                                       seed=cfg.seed * 100003 + i, scene_id=sid)
        cv2.imwrite(str(out / f"{sid}_gray.png"), gray)
        write_depth(depth, out / f"{sid}_depth.png")
        records += rec
        lines.append(f"{sid} {sid}_gray.png {sid}_depth.png")
    if args.save_mesh:
        from .meshes import save_ply

        save_ply(mesh, out / "object.ply")
    write_ground_truth(records, out / "gt.txt")
    (out / "scenes.txt").write_text("\n".join(lines) + "\n")
    print(f"{args.count} scene(s) written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _threshold(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1], got {text}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--threads", type=int, help="worker threads (default: PCOF_THREADS or all cores)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    detection = argparse.ArgumentParser(add_help=False)
    detection.add_argument("--model", required=True)
    detection.add_argument("--threshold", type=_threshold, help="score threshold in (0, 1]")
    detection.add_argument("--nms-radius", type=float, help="suppression radius in pixels")

    parser = argparse.ArgumentParser(prog="pcof", description="Template-based 6D pose estimation from depth and gray images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a mesh")
    p.add_argument("--mesh", required=True, help="ASCII PLY or OBJ triangle mesh (mm)")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common, detection], help="detect objects in one scene")
    p.add_argument("--gray", required=True)
    p.add_argument("--depth", required=True, help="16-bit PNG or .npy depth in mm")
    p.add_argument("--out", required=True, help="output prefix for <prefix>.txt and <prefix>.png")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common, detection], help="evaluate over a scene list")
    p.add_argument("--scenes", required=True, help="file of 'scene_id gray depth' lines")
    p.add_argument("--gt", required=True, help="ground-truth pose file")
    p.add_argument("--mode", choices=("add", "axes"), help="correctness criterion")
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common, detection], help="time naive against rearranged search")
    p.add_argument("--gray", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--repetitions", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write seeded synthetic test scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mesh", help="mesh to render (default: built-in toy object)")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--noise", type=float, default=2.0, help="depth noise sigma in mm")
    p.add_argument("--dropout", type=float, default=0.05, help="fraction of missing depth pixels")
    p.add_argument("--save-mesh", action="store_true", help="also write the mesh as object.ply")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on usage errors
    try:
        overrides = {
            "threshold": getattr(args, "threshold", None),
            "nms_radius": getattr(args, "nms_radius", None),
            "threads": args.threads,
            "seed": args.seed,
            "mode": getattr(args, "mode", None),
        }
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"pcof {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PcofError, ModelFormatError, OSError) as e:
        print(f"pcof {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
