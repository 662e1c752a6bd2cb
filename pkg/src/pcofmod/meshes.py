"""Mesh loaders (ASCII PLY, OBJ) and procedural toy meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .render import TriangleMesh


def box(sx, sy, sz, center=(0.0, 0.0, 0.0)):
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)]) + center
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(faces))


def cylinder(radius, length, segments=32, axis="x", center=(0.0, 0.0, 0.0)):
    """Closed cylinder along ``axis``; caps are triangle fans."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius
    lo = np.column_stack([np.full(segments, -length / 2), ring])
    hi = np.column_stack([np.full(segments, length / 2), ring])
    v = np.vstack([lo, hi, [[-length / 2, 0, 0], [length / 2, 0, 0]]])
    n = segments
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [(i, j, n + j), (i, n + j, n + i)]
        faces.append((2 * n, j, i))
        faces.append((2 * n + 1, n + i, n + j))
    perm = {"x": [0, 1, 2], "y": [2, 0, 1], "z": [1, 2, 0]}[axis]
    v = v[:, perm] + center
    return TriangleMesh(v, np.array(faces))


def merge(*meshes):
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def toy_object():
    """Asymmetric desk-scale test object: a 70 mm cube with a cylinder lying on its front face.

    The cylinder sits off-centre on the -z face (the face seen from the pole
    viewpoint), which removes every rotational symmetry of the cube.
    """
    cube = box(70.0, 70.0, 70.0)
    cyl = cylinder(14.0, 50.0, segments=24, axis="x", center=(-8.0, 14.0, -35.0 - 14.0 + 4.0))
    return merge(cube, cyl)


def load_mesh(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix == ".obj":
        return load_obj(path)
    raise InvalidArgumentError(f"unsupported mesh format: {suffix}")


def load_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_ply(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise InvalidArgumentError("not a PLY file")
    if not any(ln.startswith("format ascii") for ln in lines[:5]):
        raise InvalidArgumentError("only ASCII PLY is supported")
    n_vert = n_face = 0
    vprops = []
    current = None
    body = 0
    for i, ln in enumerate(lines):
        p = ln.split()
        if not p:
            continue
        if p[0] == "element":
            current = p[1]
            if current == "vertex":
                n_vert = int(p[2])
            elif current == "face":
                n_face = int(p[2])
        elif p[0] == "property" and current == "vertex":
            vprops.append(p[-1])
        elif p[0] == "end_header":
            body = i + 1
            break
    xi, yi, zi = vprops.index("x"), vprops.index("y"), vprops.index("z")
    rows = lines[body:body + n_vert]
    verts = np.array([[float(r.split()[k]) for k in (xi, yi, zi)] for r in rows])
    faces = []
    for r in lines[body + n_vert:body + n_vert + n_face]:
        p = [int(x) for x in r.split()]
        idx = p[1:1 + p[0]]
        for k in range(1, len(idx) - 1):
            faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_ply(mesh, path):
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(out) + "\n")


def save_obj(mesh, path):
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(out) + "\n")
