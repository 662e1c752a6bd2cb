"""Pose refinement: coarse pose assembly, Gauss-Newton PnP and point-to-point ICP."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, ICPDivergedError, InsufficientDataError, InvalidArgumentError
from .geometry import TREE_DEPTH, lattice_node_to_pose
from .pose import Pose6D, hat, orthonormalize, so3_exp
from .render import backproject, backproject_pixels

PNP_MAX_ITER = 20
PNP_STEP_TOL = 1e-6
ICP_MAX_ITER = 30
ICP_ROT_TOL = 1e-4
ICP_TRANS_TOL = 0.01
ICP_GATE = 3.0
ICP_MIN_GATE_MM = 10.0


def anchor_to_pixel(x, y, K):
    """Continuous image position of the model origin for a detection at anchor pixel (x, y).

    Templates are anchored at the pixel holding the principal point, so the
    sub-pixel part of the principal point carries over.
    """
    return x + (K.cx - np.floor(K.cx)), y + (K.cy - np.floor(K.cy))


def initial_pose(det, K, lattice):
    """Leaf lattice rotation with the origin back-projected through the detected pixel at the leaf distance."""
    node_pose = lattice_node_to_pose(lattice.node(TREE_DEPTH - 1, det.node))
    u, v = anchor_to_pixel(det.x, det.y, K)
    return Pose6D(node_pose.R, backproject_pixels(u, v, node_pose.t[2], K))


# --------------------------------------------------------------------------
# PnP


def _project(pose, pts, K):
    X = pts @ pose.R.T + pose.t
    return np.stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy], axis=1), X


def reprojection_error(pose, image_points, model_points, K):
    """Sum of squared reprojection residuals (px^2)."""
    uv, _ = _project(pose, np.asarray(model_points, float), K)
    return float(((uv - image_points) ** 2).sum())


def perturb(pose, delta):
    """Apply the increment ``delta = (omega, dt)``: ``R <- exp(omega) R``, ``t <- t + dt``."""
    return Pose6D(so3_exp(delta[:3]) @ pose.R, pose.t + delta[3:])


def pnp_jacobian(pose, model_points, K):
    """Jacobian (2N x 6) of the stacked projections w.r.t. the increment of :func:`perturb` at zero."""
    pts = np.asarray(model_points, float)
    _, X = _project(pose, pts, K)
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    n = len(pts)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z**2
    rp = X - pose.t
    dX = np.zeros((n, 3, 6))
    dX[:, :, :3] = -np.array([hat(p) for p in rp])
    dX[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dX).reshape(2 * n, 6)


def refine_pnp(image_points, model_points, K, init, max_iter=PNP_MAX_ITER, step_tol=PNP_STEP_TOL):
    """Minimize squared reprojection error by Gauss-Newton; never returns a worse pose than ``init``."""
    uv = np.asarray(image_points, float).reshape(-1, 2)
    pts = np.asarray(model_points, float).reshape(-1, 3)
    if len(uv) != len(pts):
        raise InvalidArgumentError("image and model point counts differ")
    if len(pts) < 4:
        raise InsufficientDataError(f"PnP needs at least 4 correspondences, got {len(pts)}")
    pose = init
    err = reprojection_error(pose, uv, pts, K)
    for _ in range(max_iter):
        proj, _ = _project(pose, pts, K)
        r = (proj - uv).ravel()
        J = pnp_jacobian(pose, pts, K)
        A = J.T @ J
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            raise DegenerateGeometryError("PnP normal equations are singular (degenerate point configuration)")
        step = -np.linalg.solve(A, J.T @ r)
        # backtrack so the error never increases
        for _ in range(10):
            cand = perturb(pose, step)
            cand = Pose6D(orthonormalize(cand.R), cand.t)
            cand_err = reprojection_error(cand, uv, pts, K)
            if cand_err <= err:
                break
            step = step * 0.5
        else:
            break
        pose, err = cand, cand_err
        if np.linalg.norm(step) < step_tol:
            break
    return pose


# --------------------------------------------------------------------------
# ICP


def procrustes(src, dst):
    """Rigid (R, t) minimizing sum |R src + t - dst|^2 (Kabsch)."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, md - R @ ms


def scene_cloud(scene_depth, K, window=None):
    """Back-projected scene points, optionally limited to ``window=(x0, y0, x1, y1)``."""
    if window is None:
        return backproject(scene_depth, K)
    x0, y0, x1, y1 = window
    h, w = scene_depth.shape
    x0, y0, x1, y1 = max(int(x0), 0), max(int(y0), 0), min(int(x1), w), min(int(y1), h)
    if x1 <= x0 or y1 <= y0:
        return np.zeros((0, 3))
    return backproject(scene_depth[y0:y1, x0:x1], K, offset=(x0, y0))


def projected_window(pose, model_points, K, margin=0.25):
    """Bounding box of the projected model grown by ``margin`` of its size on each side."""
    uv, _ = _project(pose, np.asarray(model_points, float), K)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    pad = margin * (hi - lo) + 4
    return (*np.floor(lo - pad).astype(int), *np.ceil(hi + pad).astype(int))


def refine_icp(model_points, scene_depth, K, init, window="auto", max_iter=ICP_MAX_ITER, history=None,
               min_gate_mm=ICP_MIN_GATE_MM):
    """Point-to-point ICP of model-frame points against the scene depth.

    Pairs farther than three times the current median distance are rejected,
    but the gate never drops below ``min_gate_mm``: on clean depth the median
    shrinks to the pixel spacing, and a tighter gate would discard exactly the
    pairs along depth edges that keep the model from sliding over flat faces.
    An iteration is accepted only if it does not raise the inlier rms; the
    rms of every accepted iteration is appended to ``history`` if given.
    Returns ``(pose, rms_mm)``.
    """
    pts = np.asarray(model_points, float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgumentError("model cloud is empty")
    if isinstance(window, str):
        window = projected_window(init, pts, K)
    cloud = scene_cloud(scene_depth, K, window)
    if len(cloud) == 0:
        raise ICPDivergedError("no scene points to register against")
    kd = cKDTree(cloud)

    def pairs(pose):
        P = pose.apply(pts)
        d, idx = kd.query(P)
        gate = max(ICP_GATE * np.median(d), min_gate_mm)
        keep = d <= gate
        if not keep.any():
            raise ICPDivergedError("no correspondences within the distance gate")
        return P[keep], cloud[idx[keep]], float(np.sqrt(np.mean(d[keep] ** 2)))

    pose = init
    P, Q, rms = pairs(pose)
    if history is not None:
        history.append(rms)
    for _ in range(max_iter):
        dR, dt = procrustes(P, Q)
        cand = Pose6D(orthonormalize(dR @ pose.R), dR @ pose.t + dt)
        cP, cQ, crms = pairs(cand)
        if crms > rms:
            break
        moved = np.linalg.norm(cand.t - pose.t)
        pose, P, Q, rms = cand, cP, cQ, crms
        if history is not None:
            history.append(rms)
        angle = np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0))
        if angle < ICP_ROT_TOL and moved < ICP_TRANS_TOL:
            break
    return pose, rms
