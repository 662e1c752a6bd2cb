"""Viewpoint sphere sampling and the hierarchical pose lattice.

The lattice has four depths.  Depth ``k`` uses the viewpoints of the
icosphere subdivided ``k`` times, and roll / distance grids whose steps are
``leaf_step * 2**(3 - k)``.  Every node at depth ``k < 3`` owns the
viewpoint children of its vertex crossed with two roll and two distance
children, hence 12 or 16 children in total.

Viewpoint directions are optical-axis directions expressed in the model
frame: a camera looking along ``v`` sits at ``-distance * v``.  The pole of
the viewpoint cap is the model +z axis, which is itself a sphere vertex.
"""

from __future__ import annotations

import functools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import EmptyLatticeError, InvalidArgumentError
from .pose import Pose6D, rot_z, rotation_between

TREE_DEPTH = 4
_ANGLE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ViewSphere:
    level: int
    vertices: np.ndarray  # (n, 3) unit vectors
    edges: np.ndarray  # (m, 2) vertex index pairs
    faces: np.ndarray  # (f, 3)


def _icosahedron():
    # vertex 0 at +z, two staggered rings of five, vertex 11 at -z
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for i in range(5):
        a = np.deg2rad(72.0 * i)
        verts.append((r * np.cos(a), r * np.sin(a), z))
    for i in range(5):
        a = np.deg2rad(36.0 + 72.0 * i)
        verts.append((r * np.cos(a), r * np.sin(a), -z))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for i in range(5):
        u0, u1 = 1 + i, 1 + (i + 1) % 5
        l0, l1 = 6 + i, 6 + (i + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (11, l1, l0)]
    return np.array(verts), faces


@functools.lru_cache(maxsize=None)
def _sphere_levels():
    """All four subdivision levels plus, per level, the edge each new vertex bisects."""
    verts, faces = _icosahedron()
    verts = [np.asarray(v, dtype=np.float64) for v in verts]
    levels = [(np.array(verts), np.array(faces))]
    for _ in range(TREE_DEPTH - 1):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
        levels.append((np.array(verts), np.array(faces)))
    for v, f in levels:
        v.setflags(write=False)
        f.setflags(write=False)
    return levels


def _edges_of(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def subdivide_icosahedron(level):
    """Return the icosphere obtained by ``level`` rounds of edge halving."""
    if not isinstance(level, (int, np.integer)) or not 0 <= level < TREE_DEPTH:
        raise InvalidArgumentError(f"level must be in [0, {TREE_DEPTH - 1}], got {level!r}")
    return _view_sphere(int(level))


@functools.lru_cache(maxsize=None)
def _view_sphere(level):
    verts, faces = _sphere_levels()[level]
    edges = _edges_of(faces)
    edges.setflags(write=False)
    return ViewSphere(level, verts, edges, faces)


def _augment(load, owner, cand, source, sink):
    """Move one child along a BFS path from a ``source`` parent to a ``sink`` parent.

    Edges run parent -> owned child -> alternative candidate parent.  Returns
    False when no path exists.
    """
    n = len(load)
    prev = {}
    queue = deque()
    for p in range(n):
        if source(p):
            prev[p] = None
            queue.append(p)
    while queue:
        p = queue.popleft()
        for c in np.flatnonzero(owner == p):
            for q in cand[c]:
                if q in prev:
                    continue
                prev[q] = (p, c)
                if sink(q):
                    head = q
                    while prev[q] is not None:
                        p2, c2 = prev[q]
                        owner[c2] = q
                        q = p2
                    load[q] -= 1
                    load[head] += 1
                    return True
                queue.append(q)
    return False


@functools.lru_cache(maxsize=None)
def viewpoint_parents(level):
    """Parent (level-1 vertex index) of every vertex of ``level``.

    Each vertex is linked to its angularly nearest coarser vertex.  Edge
    midpoints are exactly equidistant from both edge ends; these ties are
    resolved so that every parent ends up with 3 or 4 children, by moving
    children along augmenting paths visited in index order (deterministic).
    """
    if not 1 <= level < TREE_DEPTH:
        raise InvalidArgumentError(f"level must be in [1, {TREE_DEPTH - 1}]")
    levels = _sphere_levels()
    fine = levels[level][0]
    coarse = levels[level - 1][0]
    ang = np.arccos(np.clip(fine @ coarse.T, -1.0, 1.0))
    best = ang.min(axis=1, keepdims=True)
    cand = [tuple(np.flatnonzero(row <= b + _ANGLE_TOL)) for row, b in zip(ang, best)]
    owner = np.array([c[0] for c in cand])
    n = len(coarse)
    lo = len(fine) // n
    hi = -(-len(fine) // n)
    load = np.bincount(owner, minlength=n)
    while _augment(load, owner, cand, lambda p: load[p] > hi, lambda q: load[q] < hi):
        pass
    while _augment(load, owner, cand, lambda p: load[p] > lo, lambda q: load[q] < lo):
        pass
    owner.setflags(write=False)
    return owner


@dataclass(frozen=True)
class PoseRange:
    """Training pose range: viewpoint cap about +z, roll and distance intervals."""

    cap_deg: float = 90.0
    roll_min: float = -45.0
    roll_max: float = 45.0
    dist_min: float = 650.0
    dist_max: float = 1150.0

    def __post_init__(self):
        if not 0.0 < self.cap_deg <= 180.0:
            raise InvalidArgumentError(f"cap_deg must be in (0, 180], got {self.cap_deg}")
        if not self.roll_min < self.roll_max:
            raise InvalidArgumentError("roll_min must be < roll_max")
        if not 0.0 < self.dist_min < self.dist_max:
            raise InvalidArgumentError("need 0 < dist_min < dist_max")

    def contains_view(self, v):
        """Cap membership; boundary vertices count only for azimuth in [0, 180)."""
        angle = np.arccos(np.clip(v[2], -1.0, 1.0))
        cap = np.deg2rad(self.cap_deg)
        if self.cap_deg >= 180.0 or angle < cap - _ANGLE_TOL:
            return True
        if angle > cap + _ANGLE_TOL:
            return False
        az = round(float(np.degrees(np.arctan2(v[1], v[0]))), 6) % 360.0
        return az < 180.0

    def contains_roll(self, r):
        return self.roll_min - 1e-9 <= r <= self.roll_max + 1e-9

    def contains_dist(self, d):
        return self.dist_min - 1e-9 <= d <= self.dist_max + 1e-9


@dataclass(frozen=True)
class LatticeNode:
    depth: int
    index: int
    view: int
    direction: tuple
    roll: float
    distance: float
    parent: int
    children: tuple


@dataclass(eq=False)
class PoseLattice:
    """Four-depth pose hierarchy stored as flat per-depth arrays.

    Children of a node are contiguous at the next depth:
    ``child_start[k][i] : child_start[k][i] + child_count[k][i]``.
    """

    range: PoseRange
    leaf_roll_step: float
    leaf_dist_step: float
    view: list
    roll: list
    dist: list
    parent: list
    child_start: list
    child_count: list

    def num_nodes(self, depth):
        return len(self.view[depth])

    @property
    def num_leaves(self):
        return self.num_nodes(TREE_DEPTH - 1)

    def roll_step(self, depth):
        return self.leaf_roll_step * 2 ** (TREE_DEPTH - 1 - depth)

    def dist_step(self, depth):
        return self.leaf_dist_step * 2 ** (TREE_DEPTH - 1 - depth)

    def children(self, depth, i):
        s = int(self.child_start[depth][i])
        return range(s, s + int(self.child_count[depth][i]))

    def direction(self, depth, i):
        return subdivide_icosahedron(depth).vertices[self.view[depth][i]]

    def node(self, depth, i):
        ch = tuple(self.children(depth, i)) if depth < TREE_DEPTH - 1 else ()
        return LatticeNode(
            depth=depth,
            index=int(i),
            view=int(self.view[depth][i]),
            direction=tuple(float(c) for c in self.direction(depth, i)),
            roll=float(self.roll[depth][i]),
            distance=float(self.dist[depth][i]),
            parent=int(self.parent[depth][i]),
            children=ch,
        )

    def nodes(self, depth):
        return [self.node(depth, i) for i in range(self.num_nodes(depth))]

    def equals(self, other):
        arrays = ("view", "roll", "dist", "parent", "child_start", "child_count")
        return (
            self.range == other.range
            and self.leaf_roll_step == other.leaf_roll_step
            and self.leaf_dist_step == other.leaf_dist_step
            and all(
                np.array_equal(a, b)
                for name in arrays
                for a, b in zip(getattr(self, name), getattr(other, name))
            )
        )


def _root_grid(lo, hi, leaf_step):
    """Depth-0 grid values for one scalar axis.

    Leaves always fall on ``mid + (k + 1/2) * leaf_step``.  Two depth-0
    phases are possible (the midpoint itself, or midpoint +/- half a root
    step); the one needing fewer roots to cover all in-range leaves wins,
    the midpoint phase on ties.
    """
    mid = 0.5 * (lo + hi)
    root_step = leaf_step * 2 ** (TREE_DEPTH - 1)
    half_span = 0.5 * (hi - lo)
    kmax = int(np.floor(half_span / leaf_step - 0.5 + 1e-9))
    if kmax < 0:
        return None
    offsets = (np.arange(2 * kmax + 2) - kmax - 1 + 0.5) * leaf_step  # in-range leaves
    best = None
    for phase in (0.0, 0.5):
        j = np.unique(np.floor(offsets / root_step - phase + 0.5).astype(int))
        roots = mid + (j + phase) * root_step
        if best is None or len(roots) < len(best):
            best = roots
    return best


def build_pose_lattice(prange, leaf_roll_step=6.0, leaf_dist_step=70.0, prune=True):
    """Build the four-depth pose lattice over ``prange``.

    With ``prune=False`` the full-sphere viewpoint lattice is returned (only
    the scalar root grids are restricted to the range), which is where the
    12/16 child invariant holds exactly.
    """
    if leaf_roll_step <= 0 or leaf_dist_step <= 0:
        raise InvalidArgumentError("lattice steps must be positive")
    rolls0 = _root_grid(prange.roll_min, prange.roll_max, leaf_roll_step)
    dists0 = _root_grid(prange.dist_min, prange.dist_max, leaf_dist_step)
    if rolls0 is None or dists0 is None:
        raise EmptyLatticeError("pose range is smaller than one leaf step")

    n0 = len(subdivide_icosahedron(0).vertices)
    vv, rr, dd = np.meshgrid(np.arange(n0), rolls0, dists0, indexing="ij")
    view = [vv.ravel()]
    roll = [rr.ravel().astype(np.float64)]
    dist = [dd.ravel().astype(np.float64)]
    parent = [np.full(len(view[0]), -1)]
    child_start, child_count = [], []

    for depth in range(TREE_DEPTH - 1):
        vparent = viewpoint_parents(depth + 1)
        vchildren = [np.flatnonzero(vparent == p) for p in range(len(subdivide_icosahedron(depth).vertices))]
        half_r = leaf_roll_step * 2 ** (TREE_DEPTH - 2 - depth) / 2.0
        half_d = leaf_dist_step * 2 ** (TREE_DEPTH - 2 - depth) / 2.0
        cv, cr, cd, cp, starts, counts = [], [], [], [], [], []
        for i, (v, r, d) in enumerate(zip(view[depth], roll[depth], dist[depth])):
            starts.append(len(cv))
            for c in vchildren[v]:
                for sr in (-half_r, half_r):
                    for sd in (-half_d, half_d):
                        cv.append(c)
                        cr.append(r + sr)
                        cd.append(d + sd)
                        cp.append(i)
            counts.append(len(cv) - starts[-1])
        child_start.append(np.array(starts))
        child_count.append(np.array(counts))
        view.append(np.array(cv))
        roll.append(np.array(cr, dtype=np.float64))
        dist.append(np.array(cd, dtype=np.float64))
        parent.append(np.array(cp))

    lattice = PoseLattice(prange, float(leaf_roll_step), float(leaf_dist_step), view, roll, dist, parent,
                          child_start, child_count)
    if prune:
        lattice = _prune(lattice)
    return lattice


def _prune(lat):
    leaf = TREE_DEPTH - 1
    dirs = subdivide_icosahedron(leaf).vertices
    view_ok = np.array([lat.range.contains_view(v) for v in dirs])
    keep = [None] * TREE_DEPTH
    keep[leaf] = (
        view_ok[lat.view[leaf]]
        & (lat.roll[leaf] >= lat.range.roll_min - 1e-9)
        & (lat.roll[leaf] <= lat.range.roll_max + 1e-9)
        & (lat.dist[leaf] >= lat.range.dist_min - 1e-9)
        & (lat.dist[leaf] <= lat.range.dist_max + 1e-9)
    )
    for depth in range(leaf - 1, -1, -1):
        kept_child = np.zeros(lat.num_nodes(depth), dtype=bool)
        np.logical_or.at(kept_child, lat.parent[depth + 1], keep[depth + 1])
        keep[depth] = kept_child
    if not keep[0].any():
        raise EmptyLatticeError("no lattice node lies inside the pose range")

    remap = []
    for depth in range(TREE_DEPTH):
        m = np.full(lat.num_nodes(depth), -1)
        m[keep[depth]] = np.arange(int(keep[depth].sum()))
        remap.append(m)
    view, roll, dist, parent, starts, counts = [], [], [], [], [], []
    for depth in range(TREE_DEPTH):
        k = keep[depth]
        view.append(lat.view[depth][k])
        roll.append(lat.roll[depth][k])
        dist.append(lat.dist[depth][k])
        if depth == 0:
            parent.append(lat.parent[0][k])
        else:
            parent.append(remap[depth - 1][lat.parent[depth][k]])
        if depth < leaf:
            # children stay contiguous because survivors keep their relative order
            c = np.bincount(remap[depth][lat.parent[depth + 1][keep[depth + 1]]], minlength=int(k.sum()))
            counts.append(c)
            starts.append(np.concatenate([[0], np.cumsum(c)[:-1]]))
    return PoseLattice(lat.range, lat.leaf_roll_step, lat.leaf_dist_step, view, roll, dist, parent, starts, counts)


def lattice_node_to_pose(node, prange=None):
    """Camera-from-model pose of a lattice node (object on the optical axis)."""
    v = np.asarray(node.direction, dtype=np.float64)
    R = rot_z(node.roll) @ rotation_between(v, np.array([0.0, 0.0, 1.0]))
    return Pose6D(R, np.array([0.0, 0.0, node.distance]))


def view_pose(direction, roll_deg, distance):
    """Same as :func:`lattice_node_to_pose` for an arbitrary direction."""
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    R = rot_z(roll_deg) @ rotation_between(v, np.array([0.0, 0.0, 1.0]))
    return Pose6D(R, np.array([0.0, 0.0, float(distance)]))
