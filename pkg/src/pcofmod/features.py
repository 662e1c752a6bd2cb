"""Quantized gradient / normal orientations, orientation histograms and feature pyramids.

Orientation maps are ``uint8`` arrays where bit ``k`` marks orientation bin
``k``; 0 means "no feature".  Gradient bins are 22.5 deg wide over a
polarity-free half turn, normal bins 45 deg wide over the full azimuth
circle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvalidArgumentError
from .render import DEFAULT_MAX_JUMP_MM, normals_from_depth

N_BINS = 8
GRADIENT_PERIOD = 180.0
NORMAL_PERIOD = 360.0
DEFAULT_MAG_THRESH = 30.0
DEFAULT_FRONTAL_CUTOFF = 15.0
PYRAMID_LEVELS = 4

GRADIENT = "gradient"
NORMAL = "normal"
_PERIOD = {GRADIENT: GRADIENT_PERIOD, NORMAL: NORMAL_PERIOD}


def quantize_gradient(gx, gy, mag_thresh=DEFAULT_MAG_THRESH):
    """Bin index 0..7 of an image gradient, or None below ``mag_thresh``."""
    if np.hypot(gx, gy) < mag_thresh:
        return None
    angle = np.degrees(np.arctan2(gy, gx)) % GRADIENT_PERIOD
    return int(np.floor(angle / (GRADIENT_PERIOD / N_BINS) + 0.5)) % N_BINS


def quantize_normal(n, frontal_cutoff=DEFAULT_FRONTAL_CUTOFF):
    """Azimuth bin 0..7 of a camera-facing unit normal, or None near the optical axis."""
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise InvalidArgumentError("normal must have unit length")
    if n[2] >= 0.0:
        raise InvalidArgumentError("normal must face the camera (n_z < 0)")
    if -n[2] > np.cos(np.deg2rad(frontal_cutoff)):
        return None
    az = np.degrees(np.arctan2(n[1], n[0])) % NORMAL_PERIOD
    return int(np.floor(az / (NORMAL_PERIOD / N_BINS) + 0.5)) % N_BINS


@numba.njit(cache=True, nogil=True)
def _sobel(img):
    h, w = img.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for r in range(h):
        r0 = max(r - 1, 0)
        r1 = min(r + 1, h - 1)
        for c in range(w):
            c0 = max(c - 1, 0)
            c1 = min(c + 1, w - 1)
            gx[r, c] = (img[r0, c1] + 2.0 * img[r, c1] + img[r1, c1]) - (img[r0, c0] + 2.0 * img[r, c0] + img[r1, c0])
            gy[r, c] = (img[r1, c0] + 2.0 * img[r1, c] + img[r1, c1]) - (img[r0, c0] + 2.0 * img[r0, c] + img[r0, c1])
    return gx, gy


def sobel(img):
    """3x3 Sobel derivatives with replicated borders."""
    return _sobel(np.ascontiguousarray(img, dtype=np.float64))


@numba.njit(cache=True, nogil=True)
def _angles_to_mask(angle, valid, period):
    h, w = angle.shape
    out = np.zeros((h, w), dtype=np.uint8)
    width = period / 8.0
    for r in range(h):
        for c in range(w):
            if valid[r, c]:
                k = int(np.floor(angle[r, c] / width + 0.5)) % 8
                out[r, c] = np.uint8(1 << k)
    return out


def gradient_angles(gx, gy):
    """Polarity-free gradient direction in degrees, in [0, 180)."""
    return np.degrees(np.arctan2(gy, gx)) % GRADIENT_PERIOD


def gradient_orientation_map(gray, mag_thresh=DEFAULT_MAG_THRESH):
    """Single-bit gradient masks where the Sobel magnitude reaches ``mag_thresh``."""
    gx, gy = sobel(gray)
    valid = np.hypot(gx, gy) >= mag_thresh
    return _angles_to_mask(gradient_angles(gx, gy), valid, GRADIENT_PERIOD)


@numba.njit(cache=True, nogil=True)
def _contour_mask(depth, max_jump):
    h, w = depth.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            z = depth[r, c]
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if rr < 0 or cc < 0 or rr >= h or cc >= w:
                    continue
                zn = depth[rr, cc]
                if (z > 0.0) != (zn > 0.0) or (z > 0.0 and abs(zn - z) > max_jump):
                    out[r, c] = True
                    break
    return out


def depth_contour_mask(depth, max_jump=DEFAULT_MAX_JUMP_MM):
    """Pixels on either side of a silhouette or of a depth jump larger than ``max_jump``."""
    return _contour_mask(np.ascontiguousarray(depth, dtype=np.float64), float(max_jump))


def depth_gradient_field(depth, max_jump=DEFAULT_MAX_JUMP_MM):
    """Continuous gradient angles of a rendered depth image, valid on contour pixels only."""
    d = np.ascontiguousarray(depth, dtype=np.float64)
    gx, gy = _sobel(d)
    valid = _contour_mask(d, float(max_jump)) & ((gx != 0.0) | (gy != 0.0))
    return gradient_angles(gx, gy), valid


def depth_gradient_map(depth, max_jump=DEFAULT_MAX_JUMP_MM):
    angle, valid = depth_gradient_field(depth, max_jump)
    return _angles_to_mask(angle, valid, GRADIENT_PERIOD)


def normal_azimuth_field(normals, frontal_cutoff=DEFAULT_FRONTAL_CUTOFF):
    """Azimuth angles (deg, [0, 360)) of a normal map; invalid where missing or frontal."""
    nz = normals[..., 2]
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(nz) & (-nz <= np.cos(np.deg2rad(frontal_cutoff)))
    az = np.degrees(np.arctan2(normals[..., 1], normals[..., 0])) % NORMAL_PERIOD
    return np.where(valid, az, 0.0), valid


def normal_orientation_map(depth, K, window=5, frontal_cutoff=DEFAULT_FRONTAL_CUTOFF, max_jump=DEFAULT_MAX_JUMP_MM):
    normals = normals_from_depth(depth, K, window=window, max_jump=max_jump)
    az, valid = normal_azimuth_field(normals, frontal_cutoff)
    return _angles_to_mask(az, valid, NORMAL_PERIOD)


@dataclass(eq=False)
class OrientationHistogramGrid:
    """Per-pixel 8-bin orientation frequencies over a rectangular image region.

    ``origin`` is the (x, y) pixel of ``bins[0, 0]`` in the image at
    pyramid ``level``, ``anchor`` the pixel template offsets are measured
    from, and ``count`` the number of renders behind the votes.
    """

    bins: np.ndarray  # (H, W, 8) float64
    modality: str
    count: float
    origin: tuple = (0, 0)
    level: int = 0
    anchor: tuple = (0, 0)

    @property
    def shape(self):
        return self.bins.shape[:2]


@numba.njit(cache=True, nogil=True)
def _vote(angle, valid, period, hist):
    h, w = angle.shape
    width = period / 8.0
    for r in range(h):
        for c in range(w):
            if not valid[r, c]:
                continue
            pos = angle[r, c] / width
            k = np.floor(pos)
            frac = pos - k
            k0 = int(k) % 8
            hist[r, c, k0] += 1.0 - frac
            hist[r, c, (k0 + 1) % 8] += frac


def vote(angle, valid, modality, hist):
    """Add one render's linearly interpolated votes into ``hist`` in place."""
    _vote(np.ascontiguousarray(angle, dtype=np.float64), np.ascontiguousarray(valid), _PERIOD[modality], hist)


def accumulate_histograms(angles, valid, modality, origin=(0, 0), level=0, anchor=(0, 0)):
    """Histogram grid from ``N`` continuous angle fields (``(N, H, W)`` arrays)."""
    angles = np.asarray(angles, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if angles.ndim != 3 or angles.shape != valid.shape:
        raise InvalidArgumentError("angles and valid must share an (N, H, W) shape")
    if modality not in _PERIOD:
        raise InvalidArgumentError(f"unknown modality {modality!r}")
    n, h, w = angles.shape
    if n < 1:
        raise InvalidArgumentError("need at least one render")
    hist = np.zeros((h, w, N_BINS))
    for a, v in zip(angles, valid):
        _vote(a, v, _PERIOD[modality], hist)
    return OrientationHistogramGrid(hist, modality, float(n), tuple(origin), level, tuple(anchor))


@numba.njit(cache=True, nogil=True)
def _median_down(depth):
    h, w = depth.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((oh, ow), dtype=depth.dtype)
    buf = np.empty(4)
    for r in range(oh):
        for c in range(ow):
            n = 0
            for rr in range(2 * r, min(2 * r + 2, h)):
                for cc in range(2 * c, min(2 * c + 2, w)):
                    z = depth[rr, cc]
                    if z > 0:
                        buf[n] = z
                        n += 1
            if n == 0:
                continue
            s = np.sort(buf[:n])
            if n % 2 == 1:
                out[r, c] = s[n // 2]
            else:
                out[r, c] = 0.5 * (s[n // 2 - 1] + s[n // 2])
    return out


def downsample_depth(depth):
    """Halve resolution; each output pixel is the median of the valid pixels in its 2x2 block."""
    return _median_down(np.ascontiguousarray(depth))


def downsample_gray(gray):
    """Halve resolution with a 2x2 box filter (partial border blocks averaged over what exists)."""
    g = np.asarray(gray, dtype=np.float32)
    h, w = g.shape
    ph, pw = h + h % 2, w + w % 2
    pad = np.zeros((ph, pw), dtype=np.float64)
    cnt = np.zeros((ph, pw))
    pad[:h, :w] = g
    cnt[:h, :w] = 1.0
    s = pad.reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    n = cnt.reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    return (s / n).astype(np.float32)


@dataclass(eq=False)
class FeaturePyramid:
    """Gradient and normal orientation maps at four resolutions (level 0 = full)."""

    gradient: list = field(default_factory=list)
    normal: list = field(default_factory=list)
    intrinsics: list = field(default_factory=list)

    @property
    def levels(self):
        return len(self.gradient)


def build_feature_pyramid(gray, depth, K, mag_thresh=DEFAULT_MAG_THRESH, normal_window=5,
                          frontal_cutoff=DEFAULT_FRONTAL_CUTOFF, levels=PYRAMID_LEVELS):
    gray = np.asarray(gray)
    depth = np.asarray(depth, dtype=np.float32)
    if gray.shape != depth.shape or gray.shape != K.shape:
        raise InvalidArgumentError(
            f"gray {gray.shape}, depth {depth.shape} and intrinsics {K.shape} must have the same size")
    pyr = FeaturePyramid()
    g, d = gray.astype(np.float32), depth
    for level in range(levels):
        Kl = K.at_level(level)
        if level:
            g, d = downsample_gray(g), downsample_depth(d)
        pyr.gradient.append(gradient_orientation_map(g, mag_thresh))
        pyr.normal.append(normal_orientation_map(d, Kl, window=normal_window, frontal_cutoff=frontal_cutoff))
        pyr.intrinsics.append(Kl)
    return pyr
