"""Triangulated surfaces, tetrahedral volumes, and mesh operations.

Meshes are immutable value objects over float64 millimetre coordinates.
Tetrahedra are stored with positive signed volume (the constructor swaps
two vertices where needed), triangles keep their given winding, and all
derived quantities (areas, volumes, solid angles, graph distances) are
computed from the arrays on demand.

Region labels on tetrahedra partition the volume; label 1 is the heart
by convention (`HEART_REGION`).  Per-vertex integer labels on surfaces
mark electrodes (label >= 0) with -1 meaning unlabelled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .errors import UserInputError

HEART_REGION = 1

# Triangles thinner than this (mm^2) are treated as degenerate.
_MIN_AREA = 1e-9
# Tetrahedra smaller than this (mm^3) are treated as degenerate.
_MIN_VOLUME = 1e-12
# Points closer than this (mm) to a triangle's plane subtend angle zero.
_PLANE_TOL = 1e-12


def _as_points(a, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise UserInputError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UserInputError(f"{name} contains non-finite coordinates")
    return arr


def _as_cells(a, width: int, n_vertices: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise UserInputError(f"{name} must have shape (n, {width}), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_vertices):
        bad = int(np.argmax((arr < 0) | (arr >= n_vertices)).item() // width)
        raise UserInputError(
            f"{name}[{bad}] references a vertex outside [0, {n_vertices})"
        )
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TriMesh:
    """Oriented triangle surface.

    vertices: (V, 3) float64 positions in mm.
    triangles: (F, 3) vertex indices, winding defines the normal.
    point_labels: optional (V,) ints; electrodes are >= 0, -1 is none.
    closed: whether the surface was validated as a closed boundary.
    parent_vertices: optional (V,) indices into an originating volume mesh.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    point_labels: np.ndarray | None = None
    closed: bool = False
    parent_vertices: np.ndarray | None = None

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        t = _as_cells(self.triangles, 3, len(v), "triangles")
        areas = _triangle_areas(v, t)
        if areas.size and areas.min() < _MIN_AREA:
            bad = int(np.argmin(areas))
            raise UserInputError(
                f"triangle {bad} is degenerate (area {areas.min():.3e} mm^2)"
            )
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "triangles", _freeze(t))
        if self.point_labels is not None:
            lab = np.ascontiguousarray(self.point_labels, dtype=np.int64)
            if lab.shape != (len(v),):
                raise UserInputError(
                    f"point_labels must have shape ({len(v)},), got {lab.shape}"
                )
            object.__setattr__(self, "point_labels", _freeze(lab))
        if self.parent_vertices is not None:
            par = np.ascontiguousarray(self.parent_vertices, dtype=np.int64)
            object.__setattr__(self, "parent_vertices", _freeze(par))
        if self.closed and not _is_closed(t):
            raise UserInputError(
                "surface marked closed but its directed edges do not pair up"
            )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    def triangle_normals(self) -> np.ndarray:
        """Unit normals following the stored winding."""
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def vertex_areas(self) -> np.ndarray:
        """Lumped per-vertex area: one third of each incident triangle."""
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.triangles.ravel(), np.repeat(self.triangle_areas() / 3.0, 3))
        return w

    def electrode_vertices(self) -> np.ndarray:
        """Vertex indices with a non-negative label, ordered by label."""
        if self.point_labels is None:
            return np.empty(0, dtype=np.int64)
        idx = np.flatnonzero(self.point_labels >= 0)
        return idx[np.argsort(self.point_labels[idx], kind="stable")]


@dataclass(frozen=True)
class TetMesh:
    """Tetrahedral volume mesh with per-cell region labels.

    vertices: (V, 3) float64 positions in mm.
    tets: (T, 4) vertex indices, reoriented to positive signed volume.
    region: (T,) int labels; HEART_REGION (1) marks heart tissue.
    """

    vertices: np.ndarray
    tets: np.ndarray
    region: np.ndarray | None = None

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        t = _as_cells(self.tets, 4, len(v), "tets").copy()
        vol = _tet_signed_volumes(v, t)
        flip = vol < 0
        if np.any(flip):
            t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()
            vol = np.abs(vol)
        if vol.size and vol.min() < _MIN_VOLUME:
            bad = int(np.argmin(vol))
            raise UserInputError(
                f"tet {bad} is degenerate (volume {vol.min():.3e} mm^3)"
            )
        if self.region is None:
            reg = np.zeros(len(t), dtype=np.int64)
        else:
            reg = np.ascontiguousarray(self.region, dtype=np.int64)
            if reg.shape != (len(t),):
                raise UserInputError(
                    f"region must have shape ({len(t)},), got {reg.shape}"
                )
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "tets", _freeze(t))
        object.__setattr__(self, "region", _freeze(reg))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def tet_volumes(self) -> np.ndarray:
        return _tet_signed_volumes(self.vertices, self.tets)

    def region_tets(self, region: int | None) -> np.ndarray:
        """Indices of tets in the given region (None selects all)."""
        if region is None:
            return np.arange(self.n_tets, dtype=np.int64)
        return np.flatnonzero(self.region == region)

    def region_nodes(self, region: int | None) -> np.ndarray:
        """Sorted vertex indices incident to at least one selected tet."""
        sel = self.region_tets(region)
        return np.unique(self.tets[sel])

    def heart_nodes(self) -> np.ndarray:
        return self.region_nodes(HEART_REGION)


def _triangle_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    c = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(c, axis=1)


def _tet_signed_volumes(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a = v[t[:, 0]]
    d1 = v[t[:, 1]] - a
    d2 = v[t[:, 2]] - a
    d3 = v[t[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(d1, d2), d3) / 6.0


def _is_closed(tris: np.ndarray) -> bool:
    """True when every directed edge is matched by its reverse.

    This accepts pinched-but-watertight surfaces (an edge shared by four
    triangles, two each way), which staircase voxel boundaries produce.
    """
    if len(tris) == 0:
        return False
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    fwd = {}
    for a, b in e:
        key = (int(a), int(b)) if a < b else (int(b), int(a))
        fwd[key] = fwd.get(key, 0) + (1 if a < b else -1)
    return all(count == 0 for count in fwd.values())


def solid_angle(triangle: np.ndarray, point: np.ndarray) -> float:
    """Signed solid angle (sr) a triangle subtends at a point.

    Positive when the winding normal faces away from the point, so a
    closed outward-oriented surface sums to +4*pi from inside.  Points
    within 1e-12 mm of the triangle's plane return 0 by convention.
    """
    tri = np.asarray(triangle, dtype=np.float64).reshape(1, 3, 3)
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    return float(triangle_solid_angles(tri, p)[0, 0])


def triangle_solid_angles(tri_xyz: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Signed solid angles of many triangles at many points.

    tri_xyz: (F, 3, 3) triangle vertex coordinates.
    points: (P, 3) observation points.
    Returns (P, F).  Uses the tangent half-angle form, which is exact for
    arbitrary triangles and avoids the spherical-excess branch cuts.
    """
    tri = np.asarray(tri_xyz, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    r1 = tri[None, :, 0, :] - pts[:, None, :]
    r2 = tri[None, :, 1, :] - pts[:, None, :]
    r3 = tri[None, :, 2, :] - pts[:, None, :]
    d1 = np.linalg.norm(r1, axis=-1)
    d2 = np.linalg.norm(r2, axis=-1)
    d3 = np.linalg.norm(r3, axis=-1)
    numer = np.einsum("pfi,pfi->pf", np.cross(r1, r2), r3)
    denom = (
        d1 * d2 * d3
        + np.einsum("pfi,pfi->pf", r1, r2) * d3
        + np.einsum("pfi,pfi->pf", r2, r3) * d1
        + np.einsum("pfi,pfi->pf", r3, r1) * d2
    )
    omega = 2.0 * np.arctan2(numer, denom)
    # In-plane points: the triple product vanishes but atan2(0, x<0) would
    # report a spurious +/-2*pi, so zero them explicitly.
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nn = np.linalg.norm(normal, axis=1)
    height = np.abs(np.einsum("pfi,fi->pf", r1, normal)) / np.maximum(nn, 1e-300)
    omega[height < _PLANE_TOL] = 0.0
    return omega


def surface_solid_angle(mesh: TriMesh, points: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Total solid angle of a surface at each point, evaluated in chunks."""
    pts = _as_points(np.atleast_2d(points), "points")
    tri = mesh.vertices[mesh.triangles]
    out = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        hi = min(lo + chunk, len(pts))
        out[lo:hi] = triangle_solid_angles(tri, pts[lo:hi]).sum(axis=1)
    return out


def enclosed_volume(mesh: TriMesh) -> float:
    """Volume enclosed by a closed outward-oriented surface (mm^3)."""
    v = mesh.vertices
    t = mesh.triangles
    return float(
        np.einsum("ij,ij->i", np.cross(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]]).sum() / 6.0
    )


# Faces of a positively oriented tet (a, b, c, d), wound outward.
_TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)


def boundary_surface(mesh: TetMesh, region: int | None = None) -> TriMesh:
    """Extract the closed boundary of a tet region as an oriented surface.

    Faces interior to the selection appear twice with opposite winding
    and cancel; the survivors form the outward-oriented boundary.  The
    result's `parent_vertices` maps surface vertices back to the volume
    mesh.
    """
    sel = mesh.region_tets(region)
    if len(sel) == 0:
        raise UserInputError(f"region {region!r} selects no tetrahedra")
    tets = mesh.tets[sel]
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    key_sorted = key[order]
    new_group = np.ones(len(key_sorted), dtype=bool)
    new_group[1:] = np.any(key_sorted[1:] != key_sorted[:-1], axis=1)
    group_id = np.cumsum(new_group) - 1
    counts = np.bincount(group_id)
    boundary = order[np.flatnonzero(counts[group_id] == 1)]
    faces = faces[boundary]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(
        vertices=mesh.vertices[used],
        triangles=remap[faces],
        closed=True,
        parent_vertices=used,
    )


def lumped_volumes(mesh: TetMesh, region: int | None = HEART_REGION) -> np.ndarray:
    """Per-vertex volume weights (mm^3): a quarter of each incident tet.

    Returned over all mesh vertices, zero outside the selected region;
    the weights sum to the selected region's total volume.
    """
    sel = mesh.region_tets(region)
    if len(sel) == 0:
        raise UserInputError(f"region {region!r} selects no tetrahedra")
    w = np.zeros(mesh.n_vertices)
    vols = _tet_signed_volumes(mesh.vertices, mesh.tets[sel])
    np.add.at(w, mesh.tets[sel].ravel(), np.repeat(vols / 4.0, 4))
    return w


def _simplex_edges(cells: np.ndarray) -> np.ndarray:
    if cells.shape[1] == 4:
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    else:
        pairs = [(0, 1), (1, 2), (2, 0)]
    e = np.concatenate([cells[:, [a, b]] for a, b in pairs])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_graph(
    mesh: TriMesh | TetMesh, region: int | None = None
) -> sp.csr_matrix:
    """Sparse symmetric graph of simplex edges weighted by length (mm).

    Covers all mesh vertices; vertices outside the selection are
    isolated.  For surfaces the region argument is ignored.
    """
    if isinstance(mesh, TetMesh):
        cells = mesh.tets[mesh.region_tets(region)]
    else:
        cells = mesh.triangles
    edges = _simplex_edges(cells)
    lengths = np.linalg.norm(
        mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1
    )
    n = mesh.n_vertices
    g = sp.coo_matrix(
        (
            np.concatenate([lengths, lengths]),
            (
                np.concatenate([edges[:, 0], edges[:, 1]]),
                np.concatenate([edges[:, 1], edges[:, 0]]),
            ),
        ),
        shape=(n, n),
    )
    return g.tocsr()


def geodesic_distances(
    graph: sp.csr_matrix, sources: int | Sequence[int]
) -> np.ndarray:
    """Shortest-path distance from source vertices to every vertex.

    Multiple sources give the pointwise minimum.  Unreachable vertices
    are +inf.
    """
    idx = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    d = _dijkstra(graph, directed=False, indices=idx, min_only=len(idx) > 1)
    return d if d.ndim == 1 else d[0] if len(idx) == 1 else d.min(axis=0)


def geodesic_distance(graph: sp.csr_matrix, a: int, b: int) -> float:
    """Edge-graph geodesic distance between two vertices (mm)."""
    if a == b:
        return 0.0
    return float(geodesic_distances(graph, a)[b])


@dataclass(frozen=True)
class SegmentModel:
    """A 17-segment partition of the heart nodes.

    Ring boundaries run base (t=0) to apex (t=1) along the long axis at
    1/3, 2/3 and 0.95; the final cap is the apex segment 17.  Sector
    zero-angle points toward the right ventricle direction projected
    off the long axis.
    """

    apex: np.ndarray
    base_centroid: np.ndarray
    rv_direction: np.ndarray
    node_ids: np.ndarray
    node_segments: np.ndarray

    def segment_of(self, node_id: int) -> int:
        pos = np.searchsorted(self.node_ids, node_id)
        if pos >= len(self.node_ids) or self.node_ids[pos] != node_id:
            raise UserInputError(f"node {node_id} is not a heart node")
        return int(self.node_segments[pos])

    def nodes_in_segment(self, segment: int) -> np.ndarray:
        return self.node_ids[self.node_segments == segment]


def _segment_points(points: np.ndarray, apex, base_centroid, rv_direction) -> np.ndarray:
    apex = np.asarray(apex, dtype=np.float64)
    base = np.asarray(base_centroid, dtype=np.float64)
    rv = np.asarray(rv_direction, dtype=np.float64)
    axis = apex - base
    length = np.linalg.norm(axis)
    if length < 1e-9:
        raise UserInputError("apex and base centroid coincide; axis undefined")
    u = axis / length
    rv_perp = rv - (rv @ u) * u
    if np.linalg.norm(rv_perp) < 1e-9:
        raise UserInputError("rv direction is parallel to the long axis")
    e1 = rv_perp / np.linalg.norm(rv_perp)
    e2 = np.cross(u, e1)

    rel = points - base
    t = np.clip((rel @ u) / length, 0.0, 1.0)
    planar = rel - np.outer(rel @ u, u)
    theta = np.arctan2(planar @ e2, planar @ e1)

    seg = np.full(len(points), 17, dtype=np.int64)
    six = (np.floor(((theta + np.pi / 6.0) % (2.0 * np.pi)) / (np.pi / 3.0))).astype(np.int64) % 6
    four = (np.floor(((theta + np.pi / 4.0) % (2.0 * np.pi)) / (np.pi / 2.0))).astype(np.int64) % 4
    basal = t < 1.0 / 3.0
    mid = (t >= 1.0 / 3.0) & (t < 2.0 / 3.0)
    apical = (t >= 2.0 / 3.0) & (t < 0.95)
    seg[basal] = 1 + six[basal]
    seg[mid] = 7 + six[mid]
    seg[apical] = 13 + four[apical]
    return seg


def aha17_segments(
    mesh: TetMesh,
    apex,
    base_centroid,
    rv_direction,
    region: int = HEART_REGION,
) -> SegmentModel:
    """Assign every heart node to one of 17 long-axis/angular segments.

    The assignment uses only dot and cross products of differences, so
    it commutes with rigid motion applied to mesh and landmarks alike.
    Axial positions are clamped to [0, 1]: every node gets a segment.
    """
    nodes = mesh.region_nodes(region)
    if len(nodes) == 0:
        raise UserInputError(f"region {region!r} has no nodes")
    seg = _segment_points(mesh.vertices[nodes], apex, base_centroid, rv_direction)
    return SegmentModel(
        apex=_freeze(np.asarray(apex, dtype=np.float64).copy()),
        base_centroid=_freeze(np.asarray(base_centroid, dtype=np.float64).copy()),
        rv_direction=_freeze(np.asarray(rv_direction, dtype=np.float64).copy()),
        node_ids=_freeze(nodes),
        node_segments=_freeze(seg),
    )


def nearest_vertex(vertices: np.ndarray, point) -> int:
    """Index of the vertex closest to a point (first on ties)."""
    p = np.asarray(point, dtype=np.float64)
    return int(np.argmin(np.linalg.norm(vertices - p, axis=1)))


def mesh_content_hash(mesh: TriMesh | TetMesh) -> str:
    """SHA-256 over the defining arrays; stable across sessions."""
    import hashlib

    h = hashlib.sha256()
    if isinstance(mesh, TetMesh):
        h.update(b"tet")
        h.update(np.ascontiguousarray(mesh.vertices).tobytes())
        h.update(np.ascontiguousarray(mesh.tets).tobytes())
        h.update(np.ascontiguousarray(mesh.region).tobytes())
    else:
        h.update(b"tri")
        h.update(np.ascontiguousarray(mesh.vertices).tobytes())
        h.update(np.ascontiguousarray(mesh.triangles).tobytes())
        if mesh.point_labels is not None:
            h.update(np.ascontiguousarray(mesh.point_labels).tobytes())
    return h.hexdigest()
