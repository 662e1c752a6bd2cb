"""PCOF-MOD templates and the balanced pose tree.

Leaf templates are distilled from orientation histograms accumulated over
many renders jittered around the leaf pose.  Internal templates are built
bottom-up: children's histograms are averaged, pooled 2x2 to half
resolution, and thresholded again.

All histogram grids of one model share a single training window, fixed in
level-0 pixel coordinates and aligned to multiples of 8, so grids of
different nodes line up pixel-for-pixel at every pyramid level.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyTemplateError, InvalidArgumentError, RenderOutOfFrameError
from .features import (
    GRADIENT,
    NORMAL,
    OrientationHistogramGrid,
    depth_gradient_field,
    normal_azimuth_field,
    vote,
)
from .geometry import TREE_DEPTH, lattice_node_to_pose
from .pose import Pose6D, rot_x, rot_y, rot_z
from .render import backproject_pixels, normals_from_depth, render_depth

log = logging.getLogger(__name__)

WINDOW_ALIGN = 2 ** (TREE_DEPTH - 1)


@dataclass(frozen=True)
class TrainingConfig:
    n_renders: int = 1000
    th_grad: float = 100.0
    th_norm: float = 200.0
    jitter_tilt_deg: float = 10.0  # about camera x and y
    jitter_roll_deg: float = 7.5  # about the optical axis
    jitter_dist_mm: float = 90.0
    normal_window: int = 5
    frontal_cutoff_deg: float = 15.0
    max_jump_mm: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_renders < 1:
            raise InvalidArgumentError("n_renders must be >= 1")
        for name in ("th_grad", "th_norm"):
            th = getattr(self, name)
            if not 0 < th < self.n_renders:
                raise InvalidArgumentError(f"{name} must lie in (0, n_renders)")
        if min(self.jitter_tilt_deg, self.jitter_roll_deg, self.jitter_dist_mm) <= 0:
            raise InvalidArgumentError("jitter half-ranges must be positive")


@dataclass(eq=False)
class Template:
    """Sparse binary orientation template: offsets from the anchor, masks and weights."""

    x: np.ndarray  # int16
    y: np.ndarray  # int16
    ori: np.ndarray  # uint8
    w: np.ndarray  # uint16
    modality: str
    level: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int16)
        self.y = np.asarray(self.y, dtype=np.int16)
        self.ori = np.asarray(self.ori, dtype=np.uint8)
        self.w = np.asarray(self.w, dtype=np.uint16)

    def __len__(self):
        return len(self.x)

    @property
    def total_weight(self):
        return int(self.w.astype(np.int64).sum())

    def equals(self, other):
        return (
            self.modality == other.modality
            and self.level == other.level
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("x", "y", "ori", "w"))
        )


@dataclass(eq=False)
class TemplatePair:
    grad: Template
    norm: Template
    grad_points: np.ndarray | None = None  # (n_grad, 3) float32, model frame; leaves only
    norm_points: np.ndarray | None = None

    def equals(self, other):
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.grad.equals(other.grad)
            and self.norm.equals(other.norm)
            and same(self.grad_points, other.grad_points)
            and same(self.norm_points, other.norm_points)
        )


def anchor_pixel(K, level=0):
    """Pixel holding the projection of the model origin for an on-axis pose."""
    s = 2.0**level
    return int(math.floor(K.cx / s)), int(math.floor(K.cy / s))


def extract_template(H, th):
    """Threshold a histogram grid into a template.

    Bits are set for every bin strictly above ``th``; the weight is the
    rounded maximum bin.  Pixels without any dominant bin are dropped.
    Offsets are relative to ``H.anchor``.
    """
    if not 0 < th < H.count:
        raise InvalidArgumentError(f"threshold {th} must lie in (0, {H.count})")
    above = H.bins > th
    mask = np.zeros(H.shape, dtype=np.uint8)
    for k in range(H.bins.shape[2]):
        mask |= above[:, :, k].astype(np.uint8) << k
    weight = np.rint(H.bins.max(axis=2))
    keep = (mask != 0) & (weight > 0)
    rows, cols = np.nonzero(keep)
    if len(rows) == 0:
        raise EmptyTemplateError(f"no {H.modality} orientation exceeds threshold {th}")
    ax, ay = H.anchor
    x = cols + H.origin[0] - ax
    y = rows + H.origin[1] - ay
    return Template(x, y, mask[rows, cols], np.minimum(weight[rows, cols], 65535), H.modality, H.level)


def merge_and_downsample(children):
    """Average aligned child grids, then pool 2x2 blocks to half resolution.

    Both steps divide by the number of contributions (child count, then 4),
    so bin values stay on the same scale as the render count ``N`` and one
    threshold serves every tree depth.  Missing border cells of odd-sized
    grids count as empty.
    """
    if not children:
        raise InvalidArgumentError("need at least one child grid")
    first = children[0]
    for c in children[1:]:
        if (c.bins.shape != first.bins.shape or c.origin != first.origin or c.level != first.level
                or c.anchor != first.anchor):
            raise InvalidArgumentError("child grids must be aligned and share dimensions")
        if c.modality != first.modality:
            raise InvalidArgumentError("child grids must share a modality")
    if first.origin[0] % 2 or first.origin[1] % 2:
        raise InvalidArgumentError("grid origin must be even to pool 2x2")
    # sorting per element before summing makes the result independent of child order
    acc = np.sort(np.stack([c.bins for c in children]), axis=0).sum(axis=0) / len(children)
    h, w, b = acc.shape
    pad = np.zeros((h + h % 2, w + w % 2, b))
    pad[:h, :w] = acc
    pooled = pad.reshape(pad.shape[0] // 2, 2, pad.shape[1] // 2, 2, b).sum(axis=(1, 3)) / 4.0
    return OrientationHistogramGrid(pooled, first.modality, first.count,
                                    (first.origin[0] // 2, first.origin[1] // 2), first.level + 1,
                                    (first.anchor[0] // 2, first.anchor[1] // 2))


def training_window(mesh, K, prange, cfg):
    """Level-0 window (x0, y0, w, h) that contains every jittered render of the model."""
    radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
    dmin = prange.dist_min - cfg.jitter_dist_mm
    if dmin <= radius:
        raise RenderOutOfFrameError("object is too close to the camera for the pose range")
    half = max(K.fx, K.fy) * radius / (dmin - radius) + cfg.normal_window + 2
    ax, ay = anchor_pixel(K)
    a = WINDOW_ALIGN
    x0 = int(math.floor((ax - half) / a)) * a
    y0 = int(math.floor((ay - half) / a)) * a
    x1 = int(math.ceil((ax + half + 1) / a)) * a
    y1 = int(math.ceil((ay + half + 1) / a)) * a
    if x0 < 0 or y0 < 0 or x1 > K.width or y1 > K.height:
        raise RenderOutOfFrameError(
            f"object projects outside the {K.width}x{K.height} image (needs window x {x0}..{x1}, y {y0}..{y1})")
    return (x0, y0, x1 - x0, y1 - y0)


def jittered_pose(base, rng, cfg):
    dx, dy = rng.uniform(-cfg.jitter_tilt_deg, cfg.jitter_tilt_deg, 2)
    dr = rng.uniform(-cfg.jitter_roll_deg, cfg.jitter_roll_deg)
    dd = rng.uniform(-cfg.jitter_dist_mm, cfg.jitter_dist_mm)
    R = rot_z(dr) @ rot_y(dy) @ rot_x(dx) @ base.R
    return Pose6D(R, base.t + np.array([0.0, 0.0, dd]))


def _model_points(feature_x, feature_y, depth, window, anchor, pose, K):
    """Back-project feature pixels of the canonical render into the model frame.

    Feature pixels not covered by the canonical render borrow the depth of the
    nearest covered pixel, so every feature still gets a point on its pixel ray.
    """
    cols = feature_x.astype(np.int64) + anchor[0] - window[0]
    rows = feature_y.astype(np.int64) + anchor[1] - window[1]
    _, (ir, ic) = ndimage.distance_transform_edt(depth <= 0, return_indices=True)
    z = depth[ir[rows, cols], ic[rows, cols]].astype(np.float64)
    cam = backproject_pixels(cols + window[0] + 0.5, rows + window[1] + 0.5, z, K)
    return ((cam - pose.t) @ pose.R).astype(np.float32)


def accumulate_leaf(mesh, pose, K, cfg, window, rng, anchor=(0, 0)):
    """Render ``cfg.n_renders`` jittered views and return (gradient, normal) grids."""
    x0, y0, w, h = window
    hg = np.zeros((h, w, 8))
    hn = np.zeros((h, w, 8))
    for _ in range(cfg.n_renders):
        p = jittered_pose(pose, rng, cfg)
        depth = render_depth(mesh, p, K, window)
        ang, valid = depth_gradient_field(depth, cfg.max_jump_mm)
        vote(ang, valid, GRADIENT, hg)
        normals = normals_from_depth(depth, K, cfg.normal_window, cfg.max_jump_mm, offset=(x0, y0))
        az, nvalid = normal_azimuth_field(normals, cfg.frontal_cutoff_deg)
        vote(az, nvalid, NORMAL, hn)
    n = float(cfg.n_renders)
    return (OrientationHistogramGrid(hg, GRADIENT, n, (x0, y0), 0, tuple(anchor)),
            OrientationHistogramGrid(hn, NORMAL, n, (x0, y0), 0, tuple(anchor)))


def train_leaf_node(mesh, node, K, cfg, window=None, prange=None, rng=None, return_histograms=False):
    """Train the gradient/normal template pair of one leaf lattice node."""
    if window is None:
        if prange is None:
            raise InvalidArgumentError("need either a window or a pose range")
        window = training_window(mesh, K, prange, cfg)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, node.index])
    pose = lattice_node_to_pose(node)
    anchor = anchor_pixel(K, 0)
    hg, hn = accumulate_leaf(mesh, pose, K, cfg, window, rng, anchor)
    try:
        tg = extract_template(hg, cfg.th_grad)
        tn = extract_template(hn, cfg.th_norm)
    except EmptyTemplateError as e:
        raise EmptyTemplateError(f"leaf node {node.index} ({node}): {e}", node=node) from None
    canon = render_depth(mesh, pose, K, window)
    if not (canon > 0).any():
        raise RenderOutOfFrameError(f"canonical render of leaf {node.index} is empty")
    pair = TemplatePair(
        tg, tn,
        _model_points(tg.x, tg.y, canon, window, anchor, pose, K),
        _model_points(tn.x, tn.y, canon, window, anchor, pose, K),
    )
    if return_histograms:
        return pair, hg, hn
    return pair


@dataclass(eq=False)
class BalancedPoseTree:
    """Pose lattice with one template pair per node; depth ``k`` templates live at pyramid level ``3 - k``."""

    lattice: object
    pairs: list  # per depth: list[TemplatePair]
    intrinsics: object
    config: TrainingConfig
    diameter: float
    window: tuple
    mesh: object = None
    stats: dict = field(default_factory=dict)

    def level_of_depth(self, depth):
        return TREE_DEPTH - 1 - depth

    def anchor(self, level=0):
        return anchor_pixel(self.intrinsics, level)

    def node_pose(self, depth, i):
        return lattice_node_to_pose(self.lattice.node(depth, i))

    def equals(self, other):
        return (
            self.lattice.equals(other.lattice)
            and self.intrinsics == other.intrinsics
            and self.config == other.config
            and self.diameter == other.diameter
            and tuple(self.window) == tuple(other.window)
            and all(len(a) == len(b) and all(p.equals(q) for p, q in zip(a, b))
                    for a, b in zip(self.pairs, other.pairs))
        )


def build_bpt(mesh, lattice, K, cfg, threads=1, progress=None):
    """Train leaf templates and build every internal template bottom-up."""
    window = training_window(mesh, K, lattice.range, cfg)
    leaf = TREE_DEPTH - 1
    pairs = [[None] * lattice.num_nodes(d) for d in range(TREE_DEPTH)]
    done = [0]

    def train_leaf(i):
        node = lattice.node(leaf, i)
        pair, hg, hn = train_leaf_node(mesh, node, K, cfg, window,
                                       rng=np.random.default_rng([cfg.seed, i]), return_histograms=True)
        return i, pair, hg, hn

    def subtree(depth, i, pool):
        kids = list(lattice.children(depth, i))
        if depth + 1 == leaf:
            results = list(pool.map(train_leaf, kids)) if pool else [train_leaf(c) for c in kids]
            child_g, child_n = [], []
            for c, pair, hg, hn in results:
                pairs[leaf][c] = pair
                child_g.append(hg)
                child_n.append(hn)
            done[0] += len(kids)
            if progress:
                progress(done[0], lattice.num_leaves)
        else:
            child_g, child_n = [], []
            for c in kids:
                hg, hn = subtree(depth + 1, c, pool)
                child_g.append(hg)
                child_n.append(hn)
        hg = merge_and_downsample(child_g)
        hn = merge_and_downsample(child_n)
        try:
            pairs[depth][i] = TemplatePair(extract_template(hg, cfg.th_grad), extract_template(hn, cfg.th_norm))
        except EmptyTemplateError as e:
            node = lattice.node(depth, i)
            raise EmptyTemplateError(f"depth {depth} node {i} ({node}): {e}", node=node) from None
        return hg, hn

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for i in range(lattice.num_nodes(0)):
            subtree(0, i, pool)
    finally:
        if pool:
            pool.shutdown()

    tree = BalancedPoseTree(lattice, pairs, K, cfg, mesh.diameter(), window, mesh)
    tree.stats = tree_stats(tree)
    return tree


def tree_stats(tree):
    out = {}
    for d, level_pairs in enumerate(tree.pairs):
        g = [len(p.grad) for p in level_pairs]
        n = [len(p.norm) for p in level_pairs]
        out[d] = {
            "nodes": len(level_pairs),
            "grad_features": (min(g), float(np.mean(g)), max(g)) if g else (0, 0.0, 0),
            "norm_features": (min(n), float(np.mean(n)), max(n)) if n else (0, 0.0, 0),
        }
    return out
