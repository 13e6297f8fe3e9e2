"""Procedural meshes used by fixtures and tests."""

import numpy as np

from .geometry import TriangleMesh, vertex_normals


def _mesh(v, f, normals=None):
    v = np.asarray(v, dtype=np.float64)
    f = np.asarray(f, dtype=np.int64)
    n = vertex_normals(v, f) if normals is None else normals
    return TriangleMesh(v, f, n)


def cube(center=(0.0, 0.0, 0.0), size=1.0):
    c = np.asarray(center, dtype=np.float64)
    v = (np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64) - 0.5) * size + c
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return _mesh(v, f)


def uv_sphere(radius=1.0, segments=32, rings=16):
    """Latitude/longitude sphere with analytic normals and single pole vertices."""
    verts = [[0.0, radius, 0.0]]
    for r in range(1, rings):
        th = np.pi * r / rings
        for s in range(segments):
            ph = 2 * np.pi * s / segments
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.cos(th), radius * np.sin(th) * np.sin(ph)])
    verts.append([0.0, -radius, 0.0])
    v = np.array(verts)
    bottom = len(verts) - 1

    def ring(r, s):
        return 1 + (r - 1) * segments + (s % segments)

    f = []
    for s in range(segments):
        f.append([0, ring(1, s + 1), ring(1, s)])
        f.append([bottom, ring(rings - 1, s), ring(rings - 1, s + 1)])
    for r in range(1, rings - 1):
        for s in range(segments):
            a, b = ring(r, s), ring(r, s + 1)
            c, d = ring(r + 1, s), ring(r + 1, s + 1)
            f.append([a, b, d])
            f.append([a, d, c])
    return _mesh(v, f, v / radius)


def revolved(profile, segments=32):
    """Surface of revolution about +Y from (radius, height) profile points.

    Profile ends with radius 0 collapse to a single pole vertex.
    """
    profile = np.asarray(profile, dtype=np.float64)
    verts, rows = [], []
    for r, y in profile:
        if r == 0:
            rows.append([len(verts)] * segments)
            verts.append([0.0, y, 0.0])
        else:
            row = []
            for s in range(segments):
                ph = 2 * np.pi * s / segments
                row.append(len(verts))
                verts.append([r * np.cos(ph), y, r * np.sin(ph)])
            rows.append(row)
    f = []
    for k in range(len(rows) - 1):
        for s in range(segments):
            a, b = rows[k][s], rows[k][(s + 1) % segments]
            c, d = rows[k + 1][s], rows[k + 1][(s + 1) % segments]
            # profile ordered top to bottom so these wind outward
            if a != b:
                f.append([a, b, d])
            if c != d:
                f.append([a, d, c])
    return _mesh(np.array(verts), f)


def grid(nx=4, ny=4, size=1.0, z=0.0):
    """Flat square in the XY plane facing +Z."""
    xs = np.linspace(-size / 2, size / 2, nx + 1)
    ys = np.linspace(-size / 2, size / 2, ny + 1)
    v = np.array([[x, y, z] for y in ys for x in xs])
    f = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            f.append([a, a + 1, a + nx + 2])
            f.append([a, a + nx + 2, a + nx + 1])
    return _mesh(v, f, np.tile([0.0, 0.0, 1.0], (len(v), 1)))


def cylinder_strip(radius=1.0, angle=np.pi / 2, n_around=12, n_along=4, length=1.0):
    """Open cylindrical patch spanning ``angle`` radians around the Y axis."""
    v = []
    for j in range(n_along + 1):
        for i in range(n_around + 1):
            ph = angle * i / n_around
            v.append([radius * np.cos(ph), length * j / n_along, radius * np.sin(ph)])
    f = []
    w = n_around + 1
    for j in range(n_along):
        for i in range(n_around):
            a = j * w + i
            f.append([a, a + w, a + w + 1])
            f.append([a, a + w + 1, a + 1])
    return _mesh(v, f)


def merge(*meshes):
    vs, fs, ns = [], [], []
    off = 0
    for m in meshes:
        vs.append(m.vertices)
        fs.append(m.faces + off)
        ns.append(m.normals)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(vs), np.concatenate(fs), np.concatenate(ns))
