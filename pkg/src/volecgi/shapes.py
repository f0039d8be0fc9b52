"""Parametric mesh constructors used by fixtures and the phantom.

Everything here is deterministic: icospheres by recursive subdivision,
closed balls from concentric icosphere layers stitched with prisms, and
voxel boxes split into five tetrahedra per cube with alternating parity
so shared faces match.
"""

from __future__ import annotations

import numpy as np

from .errors import UserInputError
from .geometry import TetMesh, TriMesh

# Unit icosahedron (circumradius 1).
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ],
    dtype=np.float64,
) / np.sqrt(1.0 + _PHI ** 2)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def icosphere(radius: float, subdivisions: int, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed outward-oriented sphere: 20 * 4^s triangles.

    Subdivision splits each triangle in four and projects new vertices
    to the sphere; midpoint vertices are shared between neighbours.
    """
    if radius <= 0:
        raise UserInputError(f"radius must be positive, got {radius}")
    if subdivisions < 0:
        raise UserInputError("subdivisions must be >= 0")
    verts = [tuple(v) for v in _ICO_VERTS]
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = np.asarray(verts[a]) + np.asarray(verts[b])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.asarray(new_faces, dtype=np.int64)
    v = np.asarray(verts, dtype=np.float64) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(vertices=v, triangles=faces, closed=True)


def _prism_tets(bottom: np.ndarray, top: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Split a prism into three tets; quad diagonals through the
    globally smallest index of each quad, so shared faces agree."""
    corners = [int(bottom[0]), int(bottom[1]), int(bottom[2]),
               int(top[0]), int(top[1]), int(top[2])]
    # Rotate so the smallest corner index sits at position 0.
    small = int(np.argmin(corners))
    if small >= 3:
        corners = corners[3:] + corners[:3]
        small -= 3
    for _ in range(small):
        corners = [corners[1], corners[2], corners[0], corners[4], corners[5], corners[3]]
    v0, v1, v2, v3, v4, v5 = corners
    # The far quad (v1, v2, v5, v4) is the only free diagonal.
    if min(v1, v5) < min(v2, v4):
        return [(v0, v1, v2, v5), (v0, v1, v5, v4), (v0, v4, v5, v3)]
    return [(v0, v1, v2, v4), (v0, v4, v2, v5), (v0, v4, v5, v3)]


def ball_mesh(radius: float, subdivisions: int, n_layers: int) -> TetMesh:
    """Tetrahedral ball from concentric icosphere layers.

    Layer radii follow a geometric progression so prism heights track
    the shrinking triangle edges; the innermost shell closes with a fan
    to the centre vertex.  The boundary equals the outer icosphere.
    """
    if n_layers < 2:
        raise UserInputError("ball_mesh needs at least 2 layers")
    shell = icosphere(1.0, subdivisions)
    n_shell = shell.n_vertices
    # Geometric spacing: ratio chosen so the innermost radius is a small
    # fraction of the outer one without collapsing the centre fan.
    ratios = np.geomspace(1.0, 0.12, n_layers)
    verts = [shell.vertices * (radius * r) for r in ratios]
    vertices = np.concatenate(verts + [np.zeros((1, 3))])
    center = n_layers * n_shell

    tets: list[tuple[int, int, int, int]] = []
    for layer in range(n_layers - 1):
        off_out = layer * n_shell
        off_in = (layer + 1) * n_shell
        for tri in shell.triangles:
            bottom = tri + off_in
            top = tri + off_out
            tets.extend(_prism_tets(bottom, top))
    off_in = (n_layers - 1) * n_shell
    for tri in shell.triangles:
        tets.append((int(tri[0]) + off_in, int(tri[1]) + off_in, int(tri[2]) + off_in, center))
    return TetMesh(vertices=vertices, tets=np.asarray(tets, dtype=np.int64))


# Cube corner offsets indexed by bit pattern x + 2y + 4z.
_CUBE_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
     (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)],
    dtype=np.int64,
)
# Five-tet split, even parity: central tet on odd corners.
_FIVE_EVEN = np.array(
    [(1, 2, 4, 7), (0, 1, 2, 4), (3, 1, 2, 7), (5, 1, 4, 7), (6, 2, 4, 7)],
    dtype=np.int64,
)
# Mirrored split for odd parity: central tet on even corners.
_FIVE_ODD = np.array(
    [(0, 3, 5, 6), (1, 0, 3, 5), (2, 0, 3, 6), (4, 0, 5, 6), (7, 3, 5, 6)],
    dtype=np.int64,
)


def voxel_tet_mesh(
    origin,
    pitch: float,
    inside: np.ndarray,
) -> tuple[TetMesh, np.ndarray]:
    """Five-tet mesh over the cubes where `inside` is True.

    origin: coordinates of grid node (0, 0, 0) in mm.
    pitch: cube edge in mm.
    inside: (nx, ny, nz) bool array of cube occupancy.

    Neighbouring cubes get mirrored splits (parity of i+j+k), which
    makes the shared-face diagonals coincide, so the mesh is conforming.
    Returns the mesh and the (T,) index of the owning cube (flattened
    occupancy order) for region labelling.
    """
    inside = np.asarray(inside, dtype=bool)
    if inside.ndim != 3:
        raise UserInputError("inside must be a 3-d boolean array")
    if not inside.any():
        raise UserInputError("no cubes selected")
    nx, ny, nz = inside.shape
    ii, jj, kk = np.nonzero(inside)

    # Grid-node linear ids for the 8 corners of every cube.
    def node_id(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    corners = np.empty((len(ii), 8), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(_CUBE_CORNERS):
        corners[:, c] = node_id(ii + dx, jj + dy, kk + dz)

    parity = (ii + jj + kk) % 2
    tets = np.empty((len(ii), 5, 4), dtype=np.int64)
    even = parity == 0
    tets[even] = corners[even][:, _FIVE_EVEN]
    tets[~even] = corners[~even][:, _FIVE_ODD]
    tets = tets.reshape(-1, 4)
    owner = np.repeat(np.arange(len(ii), dtype=np.int64), 5)

    used = np.unique(tets)
    remap = np.full((nx + 1) * (ny + 1) * (nz + 1), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    k_idx = used % (nz + 1)
    j_idx = (used // (nz + 1)) % (ny + 1)
    i_idx = used // ((nz + 1) * (ny + 1))
    vertices = np.asarray(origin, dtype=np.float64) + pitch * np.stack(
        [i_idx, j_idx, k_idx], axis=1
    ).astype(np.float64)
    return TetMesh(vertices=vertices, tets=remap[tets]), owner


def unit_cube_tets() -> TetMesh:
    """The even-parity five-tet unit cube, handy as a tiny fixture."""
    mesh, _ = voxel_tet_mesh((0.0, 0.0, 0.0), 1.0, np.ones((1, 1, 1), dtype=bool))
    return mesh


def cube_grid(n: int, size: float = 1.0) -> TetMesh:
    """An n x n x n cube of edge `size` split into 5 n^3 tets."""
    if n < 1:
        raise UserInputError("n must be >= 1")
    mesh, _ = voxel_tet_mesh(
        (0.0, 0.0, 0.0), size / n, np.ones((n, n, n), dtype=bool)
    )
    return mesh
