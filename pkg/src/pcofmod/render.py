"""Software depth rasterizer and depth-image geometry.

Pixel convention: pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)``
in continuous image coordinates, so its centre is ``(col + 0.5, row + 0.5)``.
A camera point ``(X, Y, Z)`` projects to ``u = fx X / Z + cx``,
``v = fy Y / Z + cy``.  Depth images are float32 millimetres, 0 = missing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidArgumentError

NEAR_MM = 1.0
DEFAULT_MAX_JUMP_MM = 20.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def at_level(self, level):
        """Intrinsics of pyramid ``level`` (each level halves the resolution)."""
        s = 2.0**level
        w, h = self.width, self.height
        for _ in range(level):
            w, h = -(-w // 2), -(-h // 2)
        return CameraIntrinsics(self.fx / s, self.fy / s, self.cx / s, self.cy / s, w, h)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle mesh in model coordinates (mm); faces wound counter-clockwise seen from outside."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidArgumentError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def diameter(self):
        """Largest vertex-to-vertex distance."""
        from scipy.spatial import ConvexHull, QhullError

        v = self.vertices
        try:
            v = v[ConvexHull(v).vertices]
        except (QhullError, ValueError):
            pass
        best = 0.0
        for i in range(0, len(v), 512):
            d = np.linalg.norm(v[i:i + 512, None, :] - v[None, :, :], axis=-1)
            best = max(best, float(d.max()))
        return best

    def sample_surface(self, count, rng):
        """Area-weighted uniform samples on the surface."""
        tri = self.vertices[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        idx = rng.choice(len(tri), size=count, p=area / area.sum())
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        t = tri[idx]
        return (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]


@numba.njit(cache=True, nogil=True)
def _rasterize(cam, faces, fx, fy, cx, cy, x0, y0, zbuf, ids, cull):
    h, w = zbuf.shape
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay, az = cam[ia, 0], cam[ia, 1], cam[ia, 2]
        bx, by, bz = cam[ib, 0], cam[ib, 1], cam[ib, 2]
        qx, qy, qz = cam[ic, 0], cam[ic, 1], cam[ic, 2]
        if az <= NEAR_MM or bz <= NEAR_MM or qz <= NEAR_MM:
            continue
        if cull:
            nx = (by - ay) * (qz - az) - (bz - az) * (qy - ay)
            ny = (bz - az) * (qx - ax) - (bx - ax) * (qz - az)
            nz = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            if nx * ax + ny * ay + nz * az >= 0.0:
                continue
        ua = fx * ax / az + cx - x0
        va = fy * ay / az + cy - y0
        ub = fx * bx / bz + cx - x0
        vb = fy * by / bz + cy - y0
        uc = fx * qx / qz + cx - x0
        vc = fy * qy / qz + cy - y0
        area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if area == 0.0:
            continue
        c0 = max(int(np.ceil(min(ua, ub, uc) - 0.5)), 0)
        c1 = min(int(np.floor(max(ua, ub, uc) - 0.5)), w - 1)
        r0 = max(int(np.ceil(min(va, vb, vc) - 0.5)), 0)
        r1 = min(int(np.floor(max(va, vb, vc) - 0.5)), h - 1)
        inv_area = 1.0 / area
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                l0 = ((ub - px) * (vc - py) - (uc - px) * (vb - py)) * inv_area
                l1 = ((uc - px) * (va - py) - (ua - px) * (vc - py)) * inv_area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                z = 1.0 / (l0 / az + l1 / bz + l2 / qz)
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    ids[r, c] = f


def render_depth(mesh, pose, K, window=None, cull_backfaces=True, return_face_ids=False):
    """Z-buffered perspective depth render of ``mesh`` placed at ``pose``.

    ``window=(x0, y0, w, h)`` restricts rasterization to a sub-rectangle of
    the image; the returned array then has shape ``(h, w)``.
    """
    if window is None:
        window = (0, 0, K.width, K.height)
    x0, y0, w, h = (int(a) for a in window)
    cam = pose.apply(mesh.vertices)
    zbuf = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int32)
    if len(mesh.faces):
        _rasterize(cam, mesh.faces, K.fx, K.fy, K.cx, K.cy, float(x0), float(y0), zbuf, ids, cull_backfaces)
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0).astype(np.float32)
    if return_face_ids:
        return depth, ids
    return depth


def project(points, K):
    """Continuous image coordinates (u, v) of camera-frame points."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([K.fx * p[..., 0] / p[..., 2] + K.cx, K.fy * p[..., 1] / p[..., 2] + K.cy], axis=-1)


def backproject_pixels(u, v, z, K):
    """Camera-frame points for continuous pixel coordinates and depths."""
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    return np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=-1)


def backproject(depth, K, offset=(0, 0), return_pixels=False):
    """Point cloud (N, 3) of all non-missing pixels, using pixel centres."""
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols].astype(np.float64)
    pts = backproject_pixels(cols + offset[0] + 0.5, rows + offset[1] + 0.5, z, K)
    if return_pixels:
        return pts, np.stack([cols, rows], axis=1)
    return pts


@numba.njit(cache=True, nogil=True)
def _fit_normals(depth, fx, fy, cx, cy, x0, y0, half, max_jump, out):
    h, w = depth.shape
    for r in range(h):
        for c in range(w):
            zc = depth[r, c]
            out[r, c, 0] = np.nan
            out[r, c, 1] = np.nan
            out[r, c, 2] = np.nan
            if zc <= 0.0:
                continue
            n = 0
            sx = sy = sz = 0.0
            sxx = sxy = syy = sxz = syz = 0.0
            for rr in range(max(r - half, 0), min(r + half + 1, h)):
                for cc in range(max(c - half, 0), min(c + half + 1, w)):
                    z = depth[rr, cc]
                    if z <= 0.0 or abs(z - zc) > max_jump:
                        continue
                    X = (cc + x0 + 0.5 - cx) * z / fx
                    Y = (rr + y0 + 0.5 - cy) * z / fy
                    n += 1
                    sx += X
                    sy += Y
                    sz += z
                    sxx += X * X
                    sxy += X * Y
                    syy += Y * Y
                    sxz += X * z
                    syz += Y * z
            if n < 3:
                continue
            mx, my, mz = sx / n, sy / n, sz / n
            cxx = sxx - n * mx * mx
            cxy = sxy - n * mx * my
            cyy = syy - n * my * my
            cxz = sxz - n * mx * mz
            cyz = syz - n * my * mz
            det = cxx * cyy - cxy * cxy
            if det <= 1e-9 * cxx * cyy or cxx <= 0.0 or cyy <= 0.0:
                continue
            a = (cxz * cyy - cyz * cxy) / det
            b = (cyz * cxx - cxz * cxy) / det
            norm = np.sqrt(a * a + b * b + 1.0)
            out[r, c, 0] = a / norm
            out[r, c, 1] = b / norm
            out[r, c, 2] = -1.0 / norm


def normals_from_depth(depth, K, window=5, max_jump=DEFAULT_MAX_JUMP_MM, offset=(0, 0)):
    """Per-pixel plane-fit normals, camera frame, facing the camera (n_z < 0).

    Returns an ``(H, W, 3)`` array with NaN where the normal is missing.
    """
    if window < 3 or window % 2 == 0:
        raise InvalidArgumentError("window must be an odd integer >= 3")
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    out = np.empty(depth.shape + (3,))
    _fit_normals(depth, K.fx, K.fy, K.cx, K.cy, float(offset[0]), float(offset[1]), window // 2, float(max_jump), out)
    return out


def depth_to_png_array(depth):
    """Round float depth to the 16-bit millimetre file representation."""
    return np.clip(np.rint(depth), 0, 65535).astype(np.uint16)
