"""Pose metrics, F1 sweeps and a seeded synthetic scene generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError
from .pose import Pose6D, rotation_between
from .render import TriangleMesh, backproject_pixels, render_depth


@dataclass(frozen=True)
class GroundTruthRecord:
    scene_id: str
    object_id: str
    pose: Pose6D


@dataclass(frozen=True)
class EvalConfig:
    k_m: float = 0.15
    max_pos_mm: float = 5.0
    max_rot_deg: float = 7.5
    mode: str = "add"  # "add" (ADD criterion) or "axes" (per-axis thresholds)

    def __post_init__(self):
        if min(self.k_m, self.max_pos_mm, self.max_rot_deg) <= 0:
            raise InvalidArgumentError("k_m and thresholds must be positive")
        if self.mode not in ("add", "axes"):
            raise InvalidArgumentError(f"mode must be 'add' or 'axes', got {self.mode!r}")


def add_metric(est, gt, model_points, d_obj, k_m=0.15):
    """Mean distance between model points under both poses; correct iff below ``k_m * d_obj``."""
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgumentError("model point set is empty")
    if d_obj <= 0:
        raise InvalidArgumentError("object diameter must be positive")
    mean = float(np.linalg.norm(est.apply(pts) - gt.apply(pts), axis=1).mean())
    return mean, mean < k_m * d_obj


def euler_xyz(R):
    """Intrinsic x-y-z Euler angles in degrees with ``R = Rx(a) Ry(b) Rz(c)``."""
    return Rotation.from_matrix(R).as_euler("XYZ", degrees=True)


def pose_error(est, gt):
    """Absolute per-axis errors ``(dx, dy, dz, rx, ry, rz)`` in mm and degrees."""
    dt = np.abs(est.t - gt.t)
    dr = np.abs(euler_xyz(gt.R.T @ est.R))
    return tuple(float(v) for v in np.concatenate([dt, dr]))


def within_axes(est, gt, cfg):
    e = pose_error(est, gt)
    return max(e[:3]) <= cfg.max_pos_mm and max(e[3:]) <= cfg.max_rot_deg


def match_detections(detections, gts, cfg, model_points=None, d_obj=None):
    """Greedy one-to-one matching by descending score.

    ``detections`` maps scene id to a list of ``(score, Pose6D)``.  Returns a
    flat list of ``(score, matched_gt_index or None)``.
    """
    if cfg.mode == "add" and (model_points is None or d_obj is None):
        raise InvalidArgumentError("ADD mode needs model points and the object diameter")
    by_scene = {}
    for i, g in enumerate(gts):
        by_scene.setdefault(g.scene_id, []).append(i)
    flat = [(float(s), sid, pose) for sid, dets in detections.items() for s, pose in dets]
    flat.sort(key=lambda d: -d[0])
    used = set()
    out = []
    for score, sid, pose in flat:
        best, best_err = None, np.inf
        for gi in by_scene.get(sid, []):
            if gi in used:
                continue
            gt = gts[gi].pose
            if cfg.mode == "add":
                err, ok = add_metric(pose, gt, model_points, d_obj, cfg.k_m)
            else:
                ok = within_axes(pose, gt, cfg)
                err = float(np.linalg.norm(pose.t - gt.t))
            if ok and err < best_err:
                best, best_err = gi, err
        if best is not None:
            used.add(best)
        out.append((score, best))
    return out


def f1_sweep(detections, gts, cfg, model_points=None, d_obj=None, thresholds=None):
    """Precision/recall/F1 per score threshold over a fixed greedy matching.

    Rows are dicts with keys threshold, tp, fp, fn, precision, recall, f1.
    With no detections above a threshold, precision is reported as 1.
    """
    matched = match_detections(detections, gts, cfg, model_points, d_obj)
    if thresholds is None:
        thresholds = sorted({s for s, _ in matched}) or [0.0]
    scores = np.array([s for s, _ in matched])
    hit = np.array([m is not None for _, m in matched], dtype=bool)
    rows = []
    for th in thresholds:
        keep = scores >= th
        tp = int((hit & keep).sum())
        fp = int((~hit & keep).sum())
        fn = len(gts) - tp
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / len(gts) if gts else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 and recall > 0 else 0.0
        rows.append(dict(threshold=float(th), tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1))
    return rows


METRIC_COLUMNS = ("threshold", "tp", "fp", "fn", "precision", "recall", "f1")


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_ground_truth(records, path):
    lines = []
    for r in records:
        nums = [*r.pose.R.ravel().tolist(), *r.pose.t.tolist()]
        lines.append(" ".join([str(r.scene_id), str(r.object_id)] + [repr(float(v)) for v in nums]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_ground_truth(path):
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 14:
            raise InvalidArgumentError(f"{path}:{n}: expected 14 fields, got {len(parts)}")
        vals = np.array([float(v) for v in parts[2:]])
        out.append(GroundTruthRecord(parts[0], parts[1], Pose6D(vals[:9].reshape(3, 3), vals[9:])))
    return out


# --------------------------------------------------------------------------
# synthetic scenes

LIGHT_DIR = np.array([0.3, -0.4, -1.0]) / np.linalg.norm([0.3, -0.4, -1.0])  # towards the light, camera frame
BACKGROUND_GRAY = 30.0
AMBIENT = 0.25


def _face_normals_cam(mesh, pose):
    tri = pose.apply(mesh.vertices)[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def synth_scene(objects, K, background=1000.0, noise_sigma=0.0, dropout_rate=0.0, seed=0, scene_id="0",
                albedos=None):
    """Render a depth/gray scene of ``objects`` (``(mesh, pose)`` or ``(mesh, pose, object_id)``).

    Depth is the z-buffered composite over a fronto-parallel plane at
    ``background`` mm, then perturbed by Gaussian noise and random dropout
    (missing = 0).  Gray is Lambertian flat shading under a fixed light with
    a distinct albedo per object, so intensity edges follow the silhouettes.
    """
    if not 0.0 <= dropout_rate <= 1.0:
        raise InvalidArgumentError("dropout_rate must lie in [0, 1]")
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    h, w = K.shape
    depth = np.full((h, w), np.float32(background), dtype=np.float32) if background else np.zeros((h, w), np.float32)
    gray = np.full((h, w), BACKGROUND_GRAY)
    records = []
    for k, obj in enumerate(objects):
        mesh, pose = obj[0], obj[1]
        oid = str(obj[2]) if len(obj) > 2 else str(k)
        albedo = albedos[k] if albedos is not None else 0.9 - 0.25 * (k % 3)
        d, ids = render_depth(mesh, pose, K, return_face_ids=True)
        shade = albedo * (AMBIENT + (1 - AMBIENT) * np.clip(_face_normals_cam(mesh, pose) @ -LIGHT_DIR, 0, 1))
        front = (d > 0) & ((depth == 0) | (d < depth))
        depth[front] = d[front]
        gray[front] = 255.0 * shade[ids[front]]
        records.append(GroundTruthRecord(str(scene_id), oid, pose))
    if noise_sigma > 0:
        valid = depth > 0
        depth[valid] += rng.normal(0.0, noise_sigma, int(valid.sum())).astype(np.float32)
    if dropout_rate > 0:
        depth[rng.random((h, w)) < dropout_rate] = 0.0
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8), depth, records


def place_on_ray(pose, K, u, v):
    """Rotate a pose about the camera centre so the model origin projects to pixel (u, v).

    The object keeps its appearance relative to the line of sight, so a pose
    whose viewpoint lies inside a training range stays inside it.
    """
    ray = backproject_pixels(u, v, 1.0, K)
    G = rotation_between(pose.t / np.linalg.norm(pose.t), ray / np.linalg.norm(ray))
    return Pose6D(G @ pose.R, G @ pose.t)


def random_pose_in_range(prange, K, rng, max_offset_px=100.0, interior=0.8):
    """Random pose of a trained range, placed at a random pixel near the principal point.

    The model origin lands within ``max_offset_px`` of the principal point in
    both u and v.  Templates are rendered on the optical axis, and perspective
    distortion grows with the off-axis angle.  ``interior`` shrinks every range
    dimension about its centre so that poses stay clear of the range boundary.
    """
    from .geometry import view_pose

    cap = prange.cap_deg * interior
    cos_t = rng.uniform(np.cos(np.deg2rad(cap)), 1.0)
    phi = rng.uniform(0, 2 * np.pi)
    s = np.sqrt(1 - cos_t * cos_t)
    direction = np.array([s * np.cos(phi), s * np.sin(phi), cos_t])
    mid_r = 0.5 * (prange.roll_min + prange.roll_max)
    half_r = 0.5 * (prange.roll_max - prange.roll_min) * interior
    mid_d = 0.5 * (prange.dist_min + prange.dist_max)
    half_d = 0.5 * (prange.dist_max - prange.dist_min) * interior
    base = view_pose(direction, rng.uniform(mid_r - half_r, mid_r + half_r),
                     rng.uniform(mid_d - half_d, mid_d + half_d))
    u = K.cx + rng.uniform(-max_offset_px, max_offset_px)
    v = K.cy + rng.uniform(-max_offset_px, max_offset_px)
    return place_on_ray(base, K, u, v)


__all__ = [
    "EvalConfig", "GroundTruthRecord", "TriangleMesh", "add_metric", "euler_xyz", "f1_sweep", "match_detections",
    "place_on_ray", "pose_error", "random_pose_in_range", "read_ground_truth", "synth_scene", "within_axes",
    "write_ground_truth", "write_metrics_csv",
]
