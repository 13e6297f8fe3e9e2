"""Triangle mesh ingestion, degenerate cleanup, BVH and ray queries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ._jit import jit

log = logging.getLogger(__name__)

ZERO_AREA_REL = 1e-12
LEAF_SIZE = 4
STACK_SIZE = 64


class MeshFormatError(ValueError):
    """OBJ text that cannot be parsed."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class DegenerateMeshError(ValueError):
    """Nothing left after degenerate faces were dissolved."""


@dataclass
class CleanupReport:
    removed_faces: int = 0
    removed_vertices: int = 0
    components: int = 0

    def summary(self) -> str:
        return (f"cleanup: removed {self.removed_faces} degenerate faces, "
                f"{self.removed_vertices} unreferenced vertices; "
                f"{self.components} connected components")


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    ``uvs`` holds one coordinate per triangle corner, shape (F, 3, 2), and is
    ``None`` until an atlas has been baked. ``chart_ids`` likewise.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    uvs: Optional[np.ndarray] = None
    chart_ids: Optional[np.ndarray] = None
    report: CleanupReport = field(default_factory=CleanupReport)
    _bvh: Optional["BVH"] = field(default=None, repr=False, compare=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def scale(self) -> float:
        """Bounding-box diagonal; used to scale ray offsets."""
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    @property
    def n_components(self) -> int:
        return int(face_components(self.faces)[0])

    @property
    def bvh(self) -> "BVH":
        if self._bvh is None:
            self._bvh = BVH.build(self)
        return self._bvh

    def with_uvs(self, uvs, chart_ids) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces, self.normals,
                            np.asarray(uvs, dtype=np.float64),
                            np.asarray(chart_ids, dtype=np.int64), self.report)


# ---------------------------------------------------------------------------
# OBJ input / output


def _obj_index(tok, n, path, lineno):
    try:
        i = int(tok)
    except ValueError:
        raise MeshFormatError(path, lineno, f"bad index {tok!r}") from None
    if i < 0:
        i += n
    else:
        i -= 1
    if not 0 <= i < n:
        raise MeshFormatError(path, lineno, f"index {tok} out of range")
    return i


def parse_obj(text: str, path="<string>"):
    """Parse OBJ text into raw arrays.

    Returns positions, faces, per-corner normal indices, per-corner uv
    indices, the normal list and the uv list. Polygons are fan triangulated.
    """
    pos, nrm, tex = [], [], []
    faces, fn, ft = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "v":
                pos.append([float(x) for x in parts[1:4]])
                if len(pos[-1]) != 3:
                    raise ValueError
            elif key == "vn":
                nrm.append([float(x) for x in parts[1:4]])
                if len(nrm[-1]) != 3:
                    raise ValueError
            elif key == "vt":
                tex.append([float(x) for x in parts[1:3]])
                if len(tex[-1]) != 2:
                    raise ValueError
        except ValueError:
            raise MeshFormatError(path, lineno, f"malformed {key} record") from None
        if key != "f":
            continue
        if len(parts) < 4:
            raise MeshFormatError(path, lineno, "face with fewer than 3 vertices")
        vi, ti, ni = [], [], []
        for tok in parts[1:]:
            sub = tok.split("/")
            vi.append(_obj_index(sub[0], len(pos), path, lineno))
            ti.append(_obj_index(sub[1], len(tex), path, lineno) if len(sub) > 1 and sub[1] else -1)
            ni.append(_obj_index(sub[2], len(nrm), path, lineno) if len(sub) > 2 and sub[2] else -1)
        for k in range(1, len(vi) - 1):
            faces.append([vi[0], vi[k], vi[k + 1]])
            ft.append([ti[0], ti[k], ti[k + 1]])
            fn.append([ni[0], ni[k], ni[k + 1]])
    return (np.asarray(pos, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3),
            np.asarray(fn, dtype=np.int64).reshape(-1, 3),
            np.asarray(ft, dtype=np.int64).reshape(-1, 3),
            np.asarray(nrm, dtype=np.float64).reshape(-1, 3),
            np.asarray(tex, dtype=np.float64).reshape(-1, 2))


def degenerate_faces(vertices, faces) -> np.ndarray:
    """Boolean mask of faces with a repeated index, a zero-length edge or zero area."""
    repeated = ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2]))
    c = vertices[faces]
    e = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
    longest2 = (e ** 2).sum(-1).max(1)
    cross = np.linalg.norm(np.cross(e[:, 0], -e[:, 2]), axis=1)
    return repeated | (longest2 == 0) | (cross <= ZERO_AREA_REL * longest2)


def vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted average of incident face normals."""
    c = vertices[faces]
    fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # length = 2 * area
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1), [0.0, 0.0, 1.0])


def face_components(faces):
    """Edge-connected components of the face graph: (count, labels)."""
    nf = len(faces)
    if nf == 0:
        return 0, np.zeros(0, dtype=np.int64)
    e = np.sort(np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], 1), axis=2)
    e = e.reshape(-1, 2)
    owner = np.repeat(np.arange(nf), 3)
    _, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    # faces sharing an edge id are linked through a bipartite face/edge graph
    ne = inv.max() + 1
    g = sp.coo_matrix((np.ones(len(owner)), (owner, nf + inv)), shape=(nf + ne, nf + ne))
    n, labels = connected_components(g, directed=False)
    labels = labels[:nf]
    _, labels = np.unique(labels, return_inverse=True)
    return int(labels.max() + 1), labels.astype(np.int64)


def cleanup(vertices, faces, normals=None, uvs=None, chart_ids=None):
    """Dissolve degenerate faces and drop unreferenced vertices."""
    bad = degenerate_faces(vertices, faces)
    keep = ~bad
    faces = faces[keep]
    if uvs is not None:
        uvs = uvs[keep]
    if chart_ids is not None:
        chart_ids = chart_ids[keep]
    used = np.zeros(len(vertices), dtype=bool)
    used[faces.ravel()] = True
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    faces = remap[faces]
    vertices = vertices[used]
    if normals is not None:
        normals = normals[used]
    if len(faces) == 0:
        raise DegenerateMeshError("mesh is empty after degenerate dissolve")
    report = CleanupReport(int(bad.sum()), int((~used).sum()), face_components(faces)[0])
    return vertices, faces, normals, uvs, chart_ids, report


def load_mesh(path) -> TriangleMesh:
    """Read a Wavefront OBJ file and return the cleaned mesh.

    Faces with repeated indices, zero-length edges or zero area are removed.
    Missing normals are rebuilt by area weighting; supplied ``vn`` records are
    averaged per position. Corner UVs are kept only when every corner has one.
    """
    path = Path(path)
    pos, faces, fn, ft, nrm, tex = parse_obj(path.read_text(), str(path))
    if len(faces) == 0:
        raise DegenerateMeshError(f"{path}: no faces")
    uvs = tex[ft] if len(tex) and (ft >= 0).all() else None
    chart_ids = _read_chart_sidecar(path, len(faces))
    vertices, faces_c, _, uvs, chart_ids, report = cleanup(pos, faces, None, uvs, chart_ids)
    if len(nrm) and (fn >= 0).all():
        keep = ~degenerate_faces(pos, faces)
        acc = np.zeros((len(pos), 3))
        for k in range(3):
            np.add.at(acc, faces[keep][:, k], nrm[fn[keep][:, k]])
        used = np.zeros(len(pos), dtype=bool)
        used[faces[keep].ravel()] = True
        acc = acc[used]
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        normals = np.where(norm > 1e-12, acc / np.maximum(norm, 1e-300), 0.0)
        fallback = vertex_normals(vertices, faces_c)
        normals = np.where(norm > 1e-12, normals, fallback)
    else:
        normals = vertex_normals(vertices, faces_c)
    log.info("%s: %s", path.name, report.summary())
    return TriangleMesh(vertices, faces_c, normals, uvs, chart_ids, report)


def _read_chart_sidecar(path: Path, n_faces):
    from .uv_atlas import read_chart_sidecar

    side = read_chart_sidecar(path)
    if side is None or len(side["chart_ids"]) != n_faces:
        return None
    return np.asarray(side["chart_ids"], dtype=np.int64)


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write v/vn records and, when present, one vt record per triangle corner."""
    lines = ["# invrender mesh"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
    if mesh.uvs is not None:
        lines += [f"vt {u:.17g} {v:.17g}" for u, v in mesh.uvs.reshape(-1, 2)]
        for i, f in enumerate(mesh.faces + 1):
            t = 3 * i + 1
            lines.append(f"f {f[0]}/{t}/{f[0]} {f[1]}/{t + 1}/{f[1]} {f[2]}/{t + 2}/{f[2]}")
    else:
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Rays and hits


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)
        if not 0 <= self.t_min < self.t_max:
            raise ValueError("ray requires 0 <= t_min < t_max")


@dataclass
class Hit:
    triangle: int
    t: float
    barycentric: np.ndarray
    geometric_normal: np.ndarray
    shading_normal: np.ndarray
    uv: Optional[np.ndarray]
    position: np.ndarray


class MeshArrays(NamedTuple):
    """Flat arrays consumed by the compiled kernels."""

    tri: np.ndarray       # (F, 3, 3) corner positions
    tri_n: np.ndarray     # (F, 3, 3) corner shading normals
    tri_uv: np.ndarray    # (F, 3, 2) corner uvs (zeros when absent)
    tri_ng: np.ndarray    # (F, 3) unit geometric normals
    bmin: np.ndarray      # (N, 3)
    bmax: np.ndarray      # (N, 3)
    info: np.ndarray      # (N, 3) int: [first prim | right child, count, axis]
    order: np.ndarray     # (F,) prim ids in leaf order


@dataclass
class BVH:
    """Median-split bounding volume hierarchy, flattened in depth-first order."""

    arrays: MeshArrays

    @classmethod
    def build(cls, mesh: TriangleMesh) -> "BVH":
        tri = np.ascontiguousarray(mesh.corners, dtype=np.float64)
        lo = tri.min(1)
        hi = tri.max(1)
        cen = 0.5 * (lo + hi)
        order = np.arange(len(tri), dtype=np.int64)
        bmin, bmax, info = [], [], []

        def node(start, end):
            idx = len(info)
            ids = order[start:end]
            bmin.append(lo[ids].min(0))
            bmax.append(hi[ids].max(0))
            info.append([start, end - start, 0])
            if end - start <= LEAF_SIZE:
                return idx
            c = cen[ids]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            mid = (end - start) // 2
            part = np.argpartition(c[:, axis], mid, kind="introselect")
            order[start:end] = ids[part]
            node(start, start + mid)
            right = node(start + mid, end)
            info[idx] = [right, 0, axis]
            return idx

        import sys
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10000))
        try:
            node(0, len(tri))
        finally:
            sys.setrecursionlimit(limit)
        ng = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        ng /= np.linalg.norm(ng, axis=1, keepdims=True)
        tri_n = np.ascontiguousarray(mesh.normals[mesh.faces], dtype=np.float64)
        tri_uv = (np.zeros((len(tri), 3, 2)) if mesh.uvs is None
                  else np.ascontiguousarray(mesh.uvs, dtype=np.float64))
        arrays = MeshArrays(tri, tri_n, tri_uv, ng,
                            np.asarray(bmin, dtype=np.float64), np.asarray(bmax, dtype=np.float64),
                            np.asarray(info, dtype=np.int64), order)
        return cls(arrays)

    def closest(self, origins, directions, t_min=0.0, t_max=np.inf):
        """Vectorised closest-hit query: returns (tri ids, t, b1, b2); tri = -1 on miss."""
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
        return _closest_many(self.arrays, o, d, float(t_min), float(t_max))


@jit
def intersect_triangle(p0, p1, p2, o, d, kx, ky, kz, sx, sy, sz, t_min, t_max):
    """Watertight ray/triangle test; returns (hit, t, b0, b1, b2)."""
    ax = p0[kx] - o[kx]
    ay = p0[ky] - o[ky]
    az = p0[kz] - o[kz]
    bx = p1[kx] - o[kx]
    by = p1[ky] - o[ky]
    bz = p1[kz] - o[kz]
    cx = p2[kx] - o[kx]
    cy = p2[ky] - o[ky]
    cz = p2[kz] - o[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return False, 0.0, 0.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    t = (u * sz * az + v * sz * bz + w * sz * cz) / det
    if not (t > t_min and t < t_max):
        return False, 0.0, 0.0, 0.0, 0.0
    return True, t, u / det, v / det, w / det


@jit
def _ray_setup(d):
    ax = abs(d[0])
    ay = abs(d[1])
    az = abs(d[2])
    kz = 0
    if ay > ax and ay >= az:
        kz = 1
    elif az > ax and az > ay:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@jit
def _slab(bmin, bmax, o, inv, t_min, t_max):
    t0 = t_min
    t1 = t_max
    for a in range(3):
        ta = (bmin[a] - o[a]) * inv[a]
        tb = (bmax[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        # nan from 0 * inf leaves the interval untouched
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False, t0
    return True, t0


@jit
def _inv_dir(d):
    inv = np.empty(3)
    for a in range(3):
        inv[a] = 1.0 / d[a] if d[a] != 0.0 else (1e300 if not math.copysign(1.0, d[a]) < 0 else -1e300)
    return inv


@jit
def closest_hit(m, o, d, t_min, t_max):
    """Nearest hit in (t_min, t_max): (tri, t, b0, b1, b2); tri = -1 on miss."""
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    inv = _inv_dir(d)
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp_ = 0
    stack[0] = 0
    sp_ = 1
    best = -1
    bt = t_max
    b0 = 0.0
    b1 = 0.0
    b2 = 0.0
    while sp_ > 0:
        sp_ -= 1
        n = stack[sp_]
        ok, _ = _slab(m.bmin[n], m.bmax[n], o, inv, t_min, bt)
        if not ok:
            continue
        cnt = m.info[n, 1]
        if cnt > 0:
            first = m.info[n, 0]
            for k in range(first, first + cnt):
                f = m.order[k]
                hit, t, u, v, w = intersect_triangle(m.tri[f, 0], m.tri[f, 1], m.tri[f, 2], o, d,
                                                     kx, ky, kz, sx, sy, sz, t_min, bt)
                # ties resolved toward the lower triangle id for order independence
                if hit and (t < bt or (t == bt and f < best)):
                    best = f
                    bt = t
                    b0 = u
                    b1 = v
                    b2 = w
        else:
            left = n + 1
            right = m.info[n, 0]
            if d[m.info[n, 2]] < 0.0:
                stack[sp_] = left
                stack[sp_ + 1] = right
            else:
                stack[sp_] = right
                stack[sp_ + 1] = left
            sp_ += 2
    return best, bt, b0, b1, b2


@jit
def any_hit(m, o, d, t_min, t_max):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    inv = _inv_dir(d)
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    stack[0] = 0
    sp_ = 1
    while sp_ > 0:
        sp_ -= 1
        n = stack[sp_]
        ok, _ = _slab(m.bmin[n], m.bmax[n], o, inv, t_min, t_max)
        if not ok:
            continue
        cnt = m.info[n, 1]
        if cnt > 0:
            first = m.info[n, 0]
            for k in range(first, first + cnt):
                f = m.order[k]
                hit, t, u, v, w = intersect_triangle(m.tri[f, 0], m.tri[f, 1], m.tri[f, 2], o, d,
                                                     kx, ky, kz, sx, sy, sz, t_min, t_max)
                if hit:
                    return True
        else:
            stack[sp_] = n + 1
            stack[sp_ + 1] = m.info[n, 0]
            sp_ += 2
    return False


@jit
def closest_hit_brute(m, o, d, t_min, t_max):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    best = -1
    bt = t_max
    b0 = 0.0
    b1 = 0.0
    b2 = 0.0
    for f in range(m.tri.shape[0]):
        hit, t, u, v, w = intersect_triangle(m.tri[f, 0], m.tri[f, 1], m.tri[f, 2], o, d,
                                             kx, ky, kz, sx, sy, sz, t_min, bt)
        if hit and (t < bt or (t == bt and f < best)):
            best = f
            bt = t
            b0 = u
            b1 = v
            b2 = w
    return best, bt, b0, b1, b2


@jit
def _closest_many(m, o, d, t_min, t_max):
    n = d.shape[0]
    tri = np.empty(n, dtype=np.int64)
    ts = np.empty(n)
    bary = np.empty((n, 3))
    for i in range(n):
        oi = o[i] if o.shape[0] == n else o[0]
        f, t, b0, b1, b2 = closest_hit(m, oi, d[i], t_min, t_max)
        tri[i] = f
        ts[i] = t
        bary[i, 0] = b0
        bary[i, 1] = b1
        bary[i, 2] = b2
    return tri, ts, bary


@jit
def _brute_many(m, o, d, t_min, t_max):
    n = d.shape[0]
    tri = np.empty(n, dtype=np.int64)
    ts = np.empty(n)
    for i in range(n):
        oi = o[i] if o.shape[0] == n else o[0]
        f, t, b0, b1, b2 = closest_hit_brute(m, oi, d[i], t_min, t_max)
        tri[i] = f
        ts[i] = t
    return tri, ts


def make_hit(mesh: TriangleMesh, o, d, tri: int, t: float, bary) -> Hit:
    a = mesh.bvh.arrays
    bary = np.asarray(bary, dtype=np.float64)
    pos = bary @ a.tri[tri]
    sn = bary @ a.tri_n[tri]
    uv = None if mesh.uvs is None else bary @ mesh.uvs[tri]
    return Hit(int(tri), float(t), bary, a.tri_ng[tri].copy(), sn, uv, pos)


def build_and_intersect(mesh: TriangleMesh, ray: Ray) -> Optional[Hit]:
    """Nearest intersection of ``ray`` with ``mesh`` (BVH built lazily, once)."""
    f, t, b0, b1, b2 = closest_hit(mesh.bvh.arrays, ray.origin, ray.direction,
                                   float(ray.t_min), float(ray.t_max))
    if f < 0:
        return None
    return make_hit(mesh, ray.origin, ray.direction, f, t, (b0, b1, b2))


@jit
def frame_from_normal(n):
    """Right-handed orthonormal (tangent, bitangent) for unit ``n`` (Duff et al. branchless)."""
    sign = 1.0 if n[2] >= 0.0 else -1.0
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t = np.empty(3)
    s = np.empty(3)
    t[0] = 1.0 + sign * n[0] * n[0] * a
    t[1] = sign * b
    t[2] = -sign * n[0]
    s[0] = b
    s[1] = sign + n[1] * n[1] * a
    s[2] = -n[1]
    return t, s


def shading_frame(hit: Hit):
    """Orthonormal (normal, tangent, bitangent) at a hit.

    The interpolated normal is flipped into the geometric normal's hemisphere;
    a near-zero interpolated normal falls back to the geometric normal.
    """
    ng = np.asarray(hit.geometric_normal, dtype=np.float64)
    n = np.asarray(hit.shading_normal, dtype=np.float64)
    length = np.linalg.norm(n)
    if length < 1e-8:
        n = ng.copy()
    else:
        n = n / length
        if n @ ng < 0:
            n = -n
    t, b = frame_from_normal(n)
    return n, t, b
