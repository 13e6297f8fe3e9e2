"""Chart segmentation, least-squares conformal maps and shelf atlas packing."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from ._jit import jit
from .geometry import TriangleMesh, face_components

log = logging.getLogger(__name__)

CG_TOL = 1e-10


class ParameterizationError(RuntimeError):
    pass


class PackingError(RuntimeError):
    pass


@dataclass
class Chart:
    """A connected patch of triangles flattened independently.

    ``faces`` are global triangle ids, ``vertices`` global vertex ids,
    ``local_faces`` index into ``vertices``. ``uv`` is filled by
    :func:`lscm_parameterize`.
    """

    faces: np.ndarray
    vertices: np.ndarray
    local_faces: np.ndarray
    positions: np.ndarray
    uv: Optional[np.ndarray] = None
    pins: tuple = (0, 0)
    pin_positions: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.0], [1.0, 0.0]]))
    index: int = 0

    @classmethod
    def from_faces(cls, mesh: TriangleMesh, face_ids, index=0) -> "Chart":
        face_ids = np.asarray(face_ids, dtype=np.int64)
        verts, local = np.unique(mesh.faces[face_ids], return_inverse=True)
        return cls(face_ids, verts, local.reshape(-1, 3), mesh.vertices[verts], index=index)

    def area3d(self) -> float:
        c = self.positions[self.local_faces]
        return 0.5 * float(np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1).sum())

    def signed_areas(self) -> np.ndarray:
        c = self.uv[self.local_faces]
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


# ---------------------------------------------------------------------------
# topology helpers


def _edges(local_faces):
    e = np.concatenate([local_faces[:, [0, 1]], local_faces[:, [1, 2]], local_faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def boundary_edges(local_faces) -> np.ndarray:
    uniq, counts = np.unique(_edges(local_faces), axis=0, return_counts=True)
    return uniq[counts == 1]


def is_disk(local_faces) -> bool:
    """True when the triangles form a manifold topological disk."""
    uniq, counts = np.unique(_edges(local_faces), axis=0, return_counts=True)
    if (counts > 2).any():
        return False
    bnd = uniq[counts == 1]
    if len(bnd) == 0:
        return False
    nv = len(np.unique(local_faces))
    if nv - len(uniq) + len(local_faces) != 1:
        return False
    deg = np.bincount(bnd.ravel())
    if (deg[deg > 0] != 2).any():
        return False
    # one boundary loop
    verts = np.unique(bnd)
    g = sp.coo_matrix((np.ones(len(bnd)), (np.searchsorted(verts, bnd[:, 0]),
                                          np.searchsorted(verts, bnd[:, 1]))),
                      shape=(len(verts), len(verts)))
    from scipy.sparse.csgraph import connected_components
    return connected_components(g, directed=False)[0] == 1


def face_adjacency(faces) -> List[List[int]]:
    e = np.sort(np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], 1), axis=2).reshape(-1, 2)
    owner = np.repeat(np.arange(len(faces)), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e = e[order]
    owner = owner[order]
    adj = [[] for _ in range(len(faces))]
    same = (e[1:] == e[:-1]).all(1)
    for k in np.nonzero(same)[0]:
        a, b = owner[k], owner[k + 1]
        if a != b:
            adj[a].append(b)
            adj[b].append(a)
    return adj


def _bisect(mesh, face_ids):
    """Split faces at the median along their principal axis, then by connectivity."""
    c = mesh.corners[face_ids].mean(1)
    c = c - c.mean(0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    proj = c @ vt[0]
    order = np.argsort(proj, kind="stable")
    half = len(order) // 2
    parts = []
    for sub in (face_ids[order[:half]], face_ids[order[half:]]):
        n, labels = face_components(mesh.faces[sub])
        parts += [np.sort(sub[labels == k]) for k in range(n)]
    return parts


def segment_charts(mesh: TriangleMesh, max_normal_cone_deg: float = 120.0) -> List[Chart]:
    """Partition the mesh into disk-topology charts.

    Faces are grown breadth-first from a seed while their normals stay within
    half the cone angle of the seed normal; any region that is still not a
    disk is bisected until it is.
    """
    normals = mesh.face_normals()
    adj = face_adjacency(mesh.faces)
    cos_half = math.cos(math.radians(max_normal_cone_deg) / 2)
    label = -np.ones(mesh.n_faces, dtype=np.int64)
    regions = []
    for seed in range(mesh.n_faces):
        if label[seed] >= 0:
            continue
        rid = len(regions)
        label[seed] = rid
        members = [seed]
        queue = deque([seed])
        ns = normals[seed]
        while queue:
            f = queue.popleft()
            for g in adj[f]:
                if label[g] < 0 and normals[g] @ ns >= cos_half:
                    label[g] = rid
                    members.append(g)
                    queue.append(g)
        regions.append(np.sort(np.asarray(members, dtype=np.int64)))

    charts = []
    stack = regions[::-1]
    while stack:
        ids = stack.pop()
        chart = Chart.from_faces(mesh, ids)
        if len(ids) == 1 or is_disk(chart.local_faces):
            chart.index = len(charts)
            charts.append(chart)
        else:
            stack.extend(_bisect(mesh, ids)[::-1])
    return charts


# ---------------------------------------------------------------------------
# LSCM


def _local_triangle_coords(positions, local_faces):
    p = positions[local_faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    l1 = np.linalg.norm(e1, axis=1)
    n = np.cross(e1, e2)
    dbl_area = np.linalg.norm(n, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        x = e1 / l1[:, None]
        y = np.cross(n / dbl_area[:, None], x)
    z = np.zeros((len(local_faces), 3), dtype=np.complex128)
    z[:, 1] = l1
    z[:, 2] = (e2 * x).sum(1) + 1j * (e2 * y).sum(1)
    return z, dbl_area


def lscm_matrix(chart: Chart) -> sp.csr_matrix:
    """Real (2F x 2V) matrix whose squared residual is the conformal energy.

    Columns are [U_0..U_{V-1}, V_0..V_{V-1}].
    """
    z, dbl_area = _local_triangle_coords(chart.positions, chart.local_faces)
    if (~np.isfinite(dbl_area)).any() or (dbl_area <= 0).any():
        raise ParameterizationError(f"chart {chart.index}: degenerate triangle, system is singular")
    w = np.stack([z[:, 2] - z[:, 1], z[:, 0] - z[:, 2], z[:, 1] - z[:, 0]], 1) / np.sqrt(dbl_area)[:, None]
    nf = len(chart.local_faces)
    nv = len(chart.vertices)
    rows_re = np.repeat(2 * np.arange(nf), 3)
    rows_im = rows_re + 1
    cols = chart.local_faces.ravel()
    a = w.real.ravel()
    b = w.imag.ravel()
    # Re(W u) = aU - bV ; Im(W u) = bU + aV
    r = np.concatenate([rows_re, rows_re, rows_im, rows_im])
    c = np.concatenate([cols, cols + nv, cols, cols + nv])
    v = np.concatenate([a, -b, b, a])
    return sp.csr_matrix((v, (r, c)), shape=(2 * nf, 2 * nv))


def conformal_energy(chart: Chart, uv=None) -> float:
    uv = chart.uv if uv is None else uv
    x = np.concatenate([uv[:, 0], uv[:, 1]])
    r = lscm_matrix(chart) @ x
    return float(r @ r)


def choose_pins(chart: Chart):
    """The two boundary vertices farthest apart in 3D."""
    bnd = np.unique(boundary_edges(chart.local_faces))
    if len(bnd) < 2:
        bnd = np.arange(len(chart.vertices))
    p = chart.positions[bnd]
    best = (-1.0, 0, 1)
    for s in range(0, len(bnd), 512):
        d2 = ((p[s:s + 512, None, :] - p[None, :, :]) ** 2).sum(-1)
        k = int(np.argmax(d2))
        i, j = divmod(k, len(bnd))
        if d2[i, j] > best[0]:
            best = (float(d2[i, j]), s + i, j)
    return int(bnd[best[1]]), int(bnd[best[2]])


def lscm_parameterize(chart: Chart, pins=None) -> Chart:
    """Flatten ``chart`` by minimising the least-squares Cauchy-Riemann residual.

    Two pinned vertices are fixed at (0, 0) and (1, 0); the normal equations
    of the remaining unknowns are solved by Jacobi-preconditioned conjugate
    gradients. The solved coordinates are written to ``chart.uv``.
    """
    nv = len(chart.vertices)
    a = lscm_matrix(chart)
    pins = choose_pins(chart) if pins is None else tuple(pins)
    if pins[0] == pins[1] or np.allclose(chart.positions[pins[0]], chart.positions[pins[1]]):
        raise ParameterizationError(f"chart {chart.index}: pinned vertices coincide")
    pin_pos = chart.pin_positions
    fixed = np.array([pins[0], pins[1], pins[0] + nv, pins[1] + nv])
    fixed_val = np.array([pin_pos[0, 0], pin_pos[1, 0], pin_pos[0, 1], pin_pos[1, 1]])
    free = np.setdiff1d(np.arange(2 * nv), fixed)
    af = a[:, free]
    rhs = -(a[:, fixed] @ fixed_val)
    x = np.zeros(2 * nv)
    x[fixed] = fixed_val
    if len(free):
        normal = (af.T @ af).tocsr()
        b = af.T @ rhs
        diag = normal.diagonal()
        if (diag <= 0).any():
            raise ParameterizationError(f"chart {chart.index}: singular system")
        precond = sp.diags(1.0 / diag)
        sol, info = cg(normal, b, rtol=CG_TOL, atol=0.0, maxiter=20 * len(free) + 100, M=precond)
        if info != 0 or not np.isfinite(sol).all():
            raise ParameterizationError(f"chart {chart.index}: conjugate gradient did not converge")
        x[free] = sol
    uv = np.stack([x[:nv], x[nv:]], 1)
    chart.uv = uv
    chart.pins = pins
    if chart.signed_areas().sum() < 0:
        uv[:, 1] *= -1.0
    return chart


def angle_distortion(chart: Chart) -> np.ndarray:
    """Per-triangle mean absolute difference between 3D and 2D corner angles (radians)."""

    def angles(p):
        out = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return np.stack(out, 1)

    a3 = angles(chart.positions[chart.local_faces])
    a2 = angles(chart.uv[chart.local_faces])
    return np.abs(a3 - a2).mean(1)


# ---------------------------------------------------------------------------
# packing


@dataclass
class Atlas:
    charts: List[Chart]
    width: int
    height: int
    padding: int
    boxes: np.ndarray         # (C, 4) texel boxes [x0, y0, x1, y1), end exclusive
    chart_scale: np.ndarray   # (C,) uv units -> texels
    chart_offset: np.ndarray  # (C, 2) texel offset of each chart's min corner

    def chart_uv(self, c: int) -> np.ndarray:
        ch = self.charts[c]
        p = ch.uv - ch.uv.min(0)
        t = self.chart_offset[c] + p * self.chart_scale[c]
        return t / np.array([self.width, self.height])

    def corner_uvs(self, n_faces: int):
        uvs = np.zeros((n_faces, 3, 2))
        ids = -np.ones(n_faces, dtype=np.int64)
        for c, ch in enumerate(self.charts):
            uvs[ch.faces] = self.chart_uv(c)[ch.local_faces]
            ids[ch.faces] = c
        return uvs, ids

    def texel_chart_map(self) -> np.ndarray:
        m = -np.ones((self.height, self.width), dtype=np.int64)
        for c, (x0, y0, x1, y1) in enumerate(self.boxes):
            m[y0:y1, x0:x1] = c
        return m


def _shelf(sizes, order, usable_w, usable_h, pad):
    pos = np.zeros((len(sizes), 2), dtype=np.int64)
    x = y = shelf_h = 0
    for k in order:
        w, h = sizes[k]
        if w > usable_w:
            return None
        if x > 0 and x + w > usable_w:
            y += shelf_h + pad
            x = shelf_h = 0
        if y + h > usable_h:
            return None
        pos[k] = (x, y)
        x += w + pad
        shelf_h = max(shelf_h, h)
    return pos


def pack_atlas(charts: List[Chart], resolution, padding: int = 2) -> Atlas:
    """Scale charts by a common texel density and shelf-pack them.

    Each chart is first rescaled so its 2D area equals its 3D area, then a
    single density is found by bisection so that boxes, sorted by decreasing
    area, fit in the atlas with ``padding`` texels between boxes and around
    the border. Every box keeps a one-texel inner margin so bilinear lookups
    of any point in a chart stay inside that chart's box.
    """
    if np.isscalar(resolution):
        width = height = int(resolution)
    else:
        width, height = (int(r) for r in resolution)
    pad = int(padding)
    usable_w = width - 2 * pad
    usable_h = height - 2 * pad
    extents = []
    for ch in charts:
        if ch.uv is None:
            raise PackingError(f"chart {ch.index} has not been parameterized")
        uv = ch.uv - ch.uv.min(0)
        a2 = np.abs(ch.signed_areas()).sum()
        s = math.sqrt(ch.area3d() / a2) if a2 > 0 else 1.0
        extents.append((uv.max(0) * s, s))
    ext = np.array([e[0] for e in extents])
    area_scale = np.array([e[1] for e in extents])
    order = np.argsort(-(ext[:, 0] * ext[:, 1]), kind="stable")

    def sizes_at(density):
        return (np.ceil(ext * density).astype(np.int64) + 2).clip(min=3)

    def fits(density):
        return _shelf(sizes_at(density), order, usable_w, usable_h, pad)

    if fits(0.0) is None:
        raise PackingError(f"{len(charts)} charts do not fit at {width}x{height}; increase the resolution")
    lo, hi = 0.0, max(usable_w, usable_h) / max(ext.max(), 1e-12)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if fits(mid) is not None:
            lo = mid
        else:
            hi = mid
    density = lo
    sizes = sizes_at(density)
    pos = fits(density) + pad
    boxes = np.concatenate([pos, pos + sizes], 1)
    return Atlas(list(charts), width, height, pad, boxes, area_scale * density,
                 pos.astype(np.float64) + 1.0)


def bake_atlas(mesh: TriangleMesh, resolution=256, padding=2, cone_deg=120.0):
    """Segment, flatten and pack; returns (mesh with corner uvs, atlas)."""
    charts = segment_charts(mesh, cone_deg)
    for ch in charts:
        lscm_parameterize(ch)
    atlas = pack_atlas(charts, resolution, padding)
    uvs, ids = atlas.corner_uvs(mesh.n_faces)
    log.info("atlas: %d charts at %dx%d", len(charts), atlas.width, atlas.height)
    return mesh.with_uvs(uvs, ids), atlas


# ---------------------------------------------------------------------------
# texel footprints


@jit
def bilinear_footprint(u, v, width, height, wrap_u):
    """Four (flat texel id, weight) pairs for a bilinear lookup.

    Texel (i, j) is centred at ((i + 0.5)/W, (j + 0.5)/H); flat id = j*W + i.
    Horizontal indices wrap when ``wrap_u``; otherwise both axes clamp.
    Returns ids, weights and whether the coordinate had to be clamped.
    """
    clamped = False
    if not wrap_u and (u < 0.0 or u > 1.0):
        clamped = True
    if v < 0.0 or v > 1.0:
        clamped = True
    x = u * width - 0.5
    y = v * height - 0.5
    i0 = math.floor(x)
    j0 = math.floor(y)
    fx = x - i0
    fy = y - j0
    if fx < 0.0:
        fx = 0.0
    if fy < 0.0:
        fy = 0.0
    if not wrap_u and x < 0.0:
        i0, fx = 0, 0.0
    if y < 0.0:
        j0, fy = 0, 0.0
    i1 = i0 + 1
    j1 = j0 + 1
    if wrap_u:
        i0 = i0 % width
        i1 = i1 % width
    else:
        i0 = min(max(i0, 0), width - 1)
        i1 = min(max(i1, 0), width - 1)
    j0 = min(max(j0, 0), height - 1)
    j1 = min(max(j1, 0), height - 1)
    ids = np.empty(4, dtype=np.int64)
    w = np.empty(4)
    ids[0] = j0 * width + i0
    ids[1] = j0 * width + i1
    ids[2] = j1 * width + i0
    ids[3] = j1 * width + i1
    w[0] = (1.0 - fx) * (1.0 - fy)
    w[1] = fx * (1.0 - fy)
    w[2] = (1.0 - fx) * fy
    w[3] = fx * fy
    return ids, w, clamped


class FootprintCounter:
    """Tally of out-of-range lookups clamped by :func:`texel_footprint`."""

    clamped = 0


def texel_footprint(atlas, uv):
    """Texel ids (as (i, j) pairs) and bilinear weights for a uv coordinate.

    ``atlas`` may be an :class:`Atlas` or a ``(width, height)`` pair.
    """
    if isinstance(atlas, Atlas):
        width, height = atlas.width, atlas.height
    else:
        width, height = atlas
    ids, w, clamped = bilinear_footprint(float(uv[0]), float(uv[1]), int(width), int(height), False)
    if clamped:
        FootprintCounter.clamped += 1
    ij = np.stack([ids % width, ids // width], 1)
    return ij, w


# ---------------------------------------------------------------------------
# atlas rasterisation and sidecars


def rasterize_atlas(mesh: TriangleMesh, width: int, height: int):
    """Map texel centres back onto the surface.

    Returns (triangle id per texel or -1, barycentrics (H, W, 3), positions
    (H, W, 3)). Texels whose centre lies in no uv triangle get -1.
    """
    tri_map = -np.ones((height, width), dtype=np.int64)
    bary = np.zeros((height, width, 3))
    uv = mesh.uvs * np.array([width, height])
    for f in range(mesh.n_faces):
        p = uv[f]
        lo = np.floor(p.min(0) - 0.5).astype(int)
        hi = np.ceil(p.max(0) - 0.5).astype(int)
        xs = np.arange(max(lo[0], 0), min(hi[0], width - 1) + 1)
        ys = np.arange(max(lo[1], 0), min(hi[1], height - 1) + 1)
        if len(xs) == 0 or len(ys) == 0:
            continue
        gx, gy = np.meshgrid(xs + 0.5, ys + 0.5)
        e1 = p[1] - p[0]
        e2 = p[2] - p[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if det == 0:
            continue
        dx = gx - p[0, 0]
        dy = gy - p[0, 1]
        b1 = (dx * e2[1] - dy * e2[0]) / det
        b2 = (e1[0] * dy - e1[1] * dx) / det
        b0 = 1 - b1 - b2
        inside = (b0 >= -1e-9) & (b1 >= -1e-9) & (b2 >= -1e-9)
        yy = (gy[inside] - 0.5).astype(int)
        xx = (gx[inside] - 0.5).astype(int)
        tri_map[yy, xx] = f
        bary[yy, xx] = np.stack([b0[inside], b1[inside], b2[inside]], 1)
    pos = np.einsum("hwk,hwkc->hwc", bary, mesh.corners[tri_map.clip(0)])
    pos[tri_map < 0] = 0.0
    return tri_map, bary, pos


def sidecar_path(obj_path) -> Path:
    p = Path(obj_path)
    return p.with_suffix(".charts.json")


def write_chart_sidecar(obj_path, atlas: Atlas, chart_ids) -> Path:
    path = sidecar_path(obj_path)
    doc = {
        "version": 1,
        "width": atlas.width,
        "height": atlas.height,
        "padding": atlas.padding,
        "boxes": atlas.boxes.tolist(),
        "chart_ids": [int(c) for c in chart_ids],
    }
    path.write_text(json.dumps(doc))
    return path


def read_chart_sidecar(obj_path):
    path = sidecar_path(obj_path)
    if not path.exists():
        return None
    return json.loads(path.read_text())
