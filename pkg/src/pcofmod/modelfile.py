"""Binary model file: header, node table, templates, leaf 3D points and the mesh.

All values are little-endian.  Layout::

    magic "PCOFMOD1" | version u32
    intrinsics   fx fy cx cy f64, width height u32
    pose range   cap roll_min roll_max dist_min dist_max f64, leaf roll/dist step f64
    training     n_renders u32, th_grad th_norm tilt roll dist f64, normal_window u32,
                 frontal_cutoff max_jump f64, seed u64
    diameter f64 | training window x0 y0 w h i32
    per depth    node count u32, per node: view i32, roll dist f64, parent i32, child_start child_count i32
    per node     gradient then normal template: count u32, features (x i16, y i16, ori u8, w u16);
                 leaves then hold 3 x f32 per gradient feature and per normal feature
    mesh         vertex count u32, face count u32, vertices f64, faces i32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ModelFormatError, TruncatedModelError, VersionMismatchError
from .features import GRADIENT, NORMAL
from .geometry import TREE_DEPTH, PoseLattice, PoseRange
from .render import CameraIntrinsics, TriangleMesh
from .templates import BalancedPoseTree, Template, TemplatePair, TrainingConfig, tree_stats

MAGIC = b"PCOFMOD1"
VERSION = 1

FEATURE_DTYPE = np.dtype([("x", "<i2"), ("y", "<i2"), ("ori", "u1"), ("w", "<u2")])
NODE_DTYPE = np.dtype([("view", "<i4"), ("roll", "<f8"), ("dist", "<f8"), ("parent", "<i4"),
                       ("child_start", "<i4"), ("child_count", "<i4")])

_INTR = struct.Struct("<4d2I")
_RANGE = struct.Struct("<7d")
_CFG = struct.Struct("<I5dI2dQ")
_META = struct.Struct("<d4i")


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, st, *vals):
        self.parts.append(st.pack(*vals))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def array(self, a):
        self.parts.append(np.ascontiguousarray(a).tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"model file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()


def _write_template(w, t):
    rec = np.empty(len(t), dtype=FEATURE_DTYPE)
    rec["x"], rec["y"], rec["ori"], rec["w"] = t.x, t.y, t.ori, t.w
    w.u32(len(t))
    w.array(rec)


def _read_template(r, modality, level):
    n = r.u32()
    rec = r.array(FEATURE_DTYPE, n)
    return Template(rec["x"], rec["y"], rec["ori"], rec["w"], modality, level)


def save_model(tree):
    """Serialize a tree (including its mesh) to bytes."""
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    K = tree.intrinsics
    w.pack(_INTR, K.fx, K.fy, K.cx, K.cy, K.width, K.height)
    L = tree.lattice
    p = L.range
    w.pack(_RANGE, p.cap_deg, p.roll_min, p.roll_max, p.dist_min, p.dist_max, L.leaf_roll_step, L.leaf_dist_step)
    c = tree.config
    w.pack(_CFG, c.n_renders, c.th_grad, c.th_norm, c.jitter_tilt_deg, c.jitter_roll_deg, c.jitter_dist_mm,
           c.normal_window, c.frontal_cutoff_deg, c.max_jump_mm, c.seed)
    w.pack(_META, tree.diameter, *tree.window)
    for d in range(TREE_DEPTH):
        n = L.num_nodes(d)
        rec = np.zeros(n, dtype=NODE_DTYPE)
        rec["view"], rec["roll"], rec["dist"], rec["parent"] = L.view[d], L.roll[d], L.dist[d], L.parent[d]
        if d < TREE_DEPTH - 1:
            rec["child_start"], rec["child_count"] = L.child_start[d], L.child_count[d]
        w.u32(n)
        w.array(rec)
    for d in range(TREE_DEPTH):
        for pair in tree.pairs[d]:
            _write_template(w, pair.grad)
            _write_template(w, pair.norm)
            if d == TREE_DEPTH - 1:
                w.array(np.asarray(pair.grad_points, dtype="<f4"))
                w.array(np.asarray(pair.norm_points, dtype="<f4"))
    mesh = tree.mesh
    nv, nf = (len(mesh.vertices), len(mesh.faces)) if mesh is not None else (0, 0)
    w.u32(nv)
    w.u32(nf)
    if mesh is not None:
        w.array(mesh.vertices.astype("<f8"))
        w.array(mesh.faces.astype("<i4"))
    return w.getvalue()


def load_model(data):
    """Inverse of :func:`save_model`; raises a :class:`ModelFormatError` subclass on bad input."""
    r = _Reader(data)
    if len(data) < len(MAGIC) or bytes(r.take(len(MAGIC))) != MAGIC:
        raise BadMagicError("not a PCOF-MOD model file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, this build reads version {VERSION}")
    try:
        fx, fy, cx, cy, width, height = r.unpack(_INTR)
        K = CameraIntrinsics(fx, fy, cx, cy, width, height)
        cap, rmin, rmax, dmin, dmax, rstep, dstep = r.unpack(_RANGE)
        prange = PoseRange(cap, rmin, rmax, dmin, dmax)
        v = r.unpack(_CFG)
        cfg = TrainingConfig(n_renders=v[0], th_grad=v[1], th_norm=v[2], jitter_tilt_deg=v[3], jitter_roll_deg=v[4],
                             jitter_dist_mm=v[5], normal_window=v[6], frontal_cutoff_deg=v[7], max_jump_mm=v[8],
                             seed=v[9])
        diameter, *window = r.unpack(_META)
    except (ValueError, TypeError) as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"invalid model header: {e}") from None
    cols = {k: [] for k in NODE_DTYPE.names}
    for d in range(TREE_DEPTH):
        rec = r.array(NODE_DTYPE, r.u32())
        for k in ("view", "parent"):
            cols[k].append(rec[k].astype(np.int64))
        for k in ("roll", "dist"):
            cols[k].append(rec[k].astype(np.float64))
        if d < TREE_DEPTH - 1:
            cols["child_start"].append(rec["child_start"].astype(np.int64))
            cols["child_count"].append(rec["child_count"].astype(np.int64))
    lattice = PoseLattice(prange, rstep, dstep, **cols)
    pairs = []
    for d in range(TREE_DEPTH):
        level = TREE_DEPTH - 1 - d
        row = []
        for _ in range(lattice.num_nodes(d)):
            tg = _read_template(r, GRADIENT, level)
            tn = _read_template(r, NORMAL, level)
            if d == TREE_DEPTH - 1:
                gp = r.array("<f4", 3 * len(tg)).reshape(-1, 3).astype(np.float32)
                npts = r.array("<f4", 3 * len(tn)).reshape(-1, 3).astype(np.float32)
                row.append(TemplatePair(tg, tn, gp, npts))
            else:
                row.append(TemplatePair(tg, tn))
        pairs.append(row)
    nv, nf = r.u32(), r.u32()
    mesh = None
    if nv:
        verts = r.array("<f8", 3 * nv).reshape(-1, 3)
        faces = r.array("<i4", 3 * nf).reshape(-1, 3).astype(np.int64)
        mesh = TriangleMesh(verts, faces)
    if r.pos != len(r.data):
        raise ModelFormatError(f"{len(r.data) - r.pos} unexpected trailing bytes in model file")
    tree = BalancedPoseTree(lattice, pairs, K, cfg, diameter, tuple(window), mesh)
    tree.stats = tree_stats(tree)
    return tree


def write_model(tree, path):
    Path(path).write_bytes(save_model(tree))


def read_model(path):
    return load_model(Path(path).read_bytes())
