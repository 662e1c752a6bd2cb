"""End-to-end pose estimation: pyramid, tree search, NMS, PnP and ICP."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import PcofError
from .features import DEFAULT_MAG_THRESH, build_feature_pyramid
from .matcher import SearchStats, detect, nms
from .pose import Pose6D
from .refine import projected_window, refine_icp, refine_pnp
from .render import project, render_depth

DEFAULT_ICP_POINTS = 2000
VISIBILITY_OVERSAMPLE = 8
VISIBILITY_TOL_MM = 2.0


@dataclass(eq=False)
class PoseResult:
    detection: object
    pose: Pose6D
    rms_mm: float = float("nan")
    stage: str = "coarse"  # last stage that succeeded: coarse, pnp or icp


@dataclass
class Timings:
    pyramid: float = 0.0
    rearrange: float = 0.0
    search: float = 0.0
    refine: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"pyramid": self.pyramid, "rearrange": self.rearrange, "search": self.search, "refine": self.refine}


def default_nms_radius(tree):
    """Half the projected object diameter at the middle training distance, in pixels."""
    prange = tree.lattice.range
    mid = 0.5 * (prange.dist_min + prange.dist_max)
    return max(4.0, 0.5 * tree.intrinsics.fx * tree.diameter / mid)


def matched_correspondences(det, tree, pyr):
    """Leaf template features matching the scene at the detection, as (image points, model points)."""
    pair = tree.pairs[-1][det.node]
    uv, xyz = [], []
    for t, pts, omap in ((pair.grad, pair.grad_points, pyr.gradient[0]), (pair.norm, pair.norm_points, pyr.normal[0])):
        h, w = omap.shape
        px = det.x + t.x.astype(np.int64)
        py = det.y + t.y.astype(np.int64)
        inside = (px >= 0) & (py >= 0) & (px < w) & (py < h)
        hit = np.zeros(len(px), dtype=bool)
        hit[inside] = (omap[py[inside], px[inside]] & t.ori[inside]) != 0
        uv.append(np.stack([px[hit] + 0.5, py[hit] + 0.5], axis=1))
        xyz.append(pts[hit].astype(np.float64))
    return np.vstack(uv), np.vstack(xyz)


def visible_model_points(mesh, pose, K, max_points=DEFAULT_ICP_POINTS, seed=0):
    """Model-frame surface samples visible at ``pose``, at most ``max_points`` of them.

    Points are drawn uniformly over the surface (seeded, so repeatable) and
    kept when the rendered depth at their pixel agrees with their own depth.
    Sampling off the pixel grid matters: points back-projected from a render
    sit on the same lattice as a scene of the same view, and nearest-neighbour
    pairing then has local minima one pixel apart.
    """
    pts = mesh.sample_surface(VISIBILITY_OVERSAMPLE * max_points, np.random.default_rng(seed))
    cam = pose.apply(pts)
    in_front = cam[:, 2] > 0
    uv = np.full((len(pts), 2), -1.0)
    uv[in_front] = project(cam[in_front], K)
    col, row = np.floor(uv[:, 0]).astype(np.int64), np.floor(uv[:, 1]).astype(np.int64)
    inside = in_front & (col >= 0) & (row >= 0) & (col < K.width) & (row < K.height)
    if not inside.any():
        return np.zeros((0, 3))
    x0, y0 = int(col[inside].min()), int(row[inside].min())
    x1, y1 = int(col[inside].max()) + 1, int(row[inside].max()) + 1
    d = render_depth(mesh, pose, K, window=(x0, y0, x1 - x0, y1 - y0))
    z = np.zeros(len(pts))
    z[inside] = d[row[inside] - y0, col[inside] - x0]
    visible = inside & (z > 0) & (np.abs(z - cam[:, 2]) < VISIBILITY_TOL_MM)
    pts = pts[visible]
    if len(pts) > max_points:
        pts = pts[np.linspace(0, len(pts) - 1, max_points).astype(np.int64)]
    return pts


def align_depth(mesh, pose, scene_depth, K, max_offset=None):
    """Slide the pose along its viewing ray so rendered and scene depths agree in median.

    Only pixels where both depths exist and differ by less than ``max_offset``
    (default: the model radius) take part.  The projection of the model
    origin is unchanged.
    """
    if max_offset is None:
        max_offset = float(np.linalg.norm(mesh.vertices, axis=1).max())
    x0, y0, x1, y1 = projected_window(pose, mesh.vertices, K, margin=0.0)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, K.width), min(y1, K.height)
    if x1 <= x0 or y1 <= y0:
        return pose
    model = render_depth(mesh, pose, K, window=(x0, y0, x1 - x0, y1 - y0))
    scene = scene_depth[y0:y1, x0:x1]
    both = (model > 0) & (scene > 0)
    diff = (scene - model)[both]
    diff = diff[np.abs(diff) < max_offset]
    if len(diff) == 0:
        return pose
    shift = float(np.median(diff))
    return Pose6D(pose.R, pose.t * (pose.t[2] + shift) / pose.t[2])


def refine_detection(det, tree, pyr, depth, icp=True, icp_points=DEFAULT_ICP_POINTS):
    K = tree.intrinsics
    result = PoseResult(det, det.pose)
    try:
        uv, xyz = matched_correspondences(det, tree, pyr)
        result.pose = refine_pnp(uv, xyz, K, det.pose)
        result.stage = "pnp"
    except PcofError:
        pass
    if icp and tree.mesh is not None:
        pose = align_depth(tree.mesh, result.pose, depth, K)
        try:
            # second pass re-evaluates visibility at the improved pose
            for _ in range(2):
                pts = visible_model_points(tree.mesh, pose, K, icp_points)
                if len(pts) == 0:
                    break
                pose, rms = refine_icp(pts, depth, K, pose)
                result.pose, result.rms_mm, result.stage = pose, rms, "icp"
        except PcofError:
            pass
    return result


def estimate_poses(gray, depth, tree, threshold, nms_radius=None, icp=True, rearranged=True, timings=None,
                   mag_thresh=DEFAULT_MAG_THRESH, normal_window=None, max_results=None):
    """Detect and refine every instance of the tree's object; results sorted by score.

    ``normal_window`` sets the plane-fit window for the scene normals
    (default: the training window); noisy depth benefits from a larger one.
    """
    timings = timings if timings is not None else Timings()
    cfg = tree.config
    t0 = time.perf_counter()
    pyr = build_feature_pyramid(gray, depth, tree.intrinsics, mag_thresh=mag_thresh,
                                normal_window=normal_window or cfg.normal_window,
                                frontal_cutoff=cfg.frontal_cutoff_deg)
    t1 = time.perf_counter()
    stats = SearchStats()
    dets = detect(pyr, tree, threshold, rearranged=rearranged, stats=stats)
    dets = nms(dets, nms_radius if nms_radius is not None else default_nms_radius(tree))
    if max_results is not None:
        dets = dets[:max_results]
    t2 = time.perf_counter()
    results = [refine_detection(d, tree, pyr, depth, icp=icp) for d in dets]
    t3 = time.perf_counter()
    timings.pyramid += t1 - t0
    timings.rearrange += stats.rearrange_s
    timings.search += (t2 - t1) - stats.rearrange_s
    timings.refine += t3 - t2
    return results
