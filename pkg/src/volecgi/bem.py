"""Epicardial forward model by boundary elements.

The potential in the source-free region between the epicardial surface
H and the insulated torso surface T satisfies Laplace's equation, so
torso potentials are a linear image of epicardial potentials.  The
transfer matrix comes from collocating Green's representation formula
at every surface vertex:

    c_i phi_i + sum_j W_ij phi_j = sum_j S_ij q_j

with W the double-layer (signed solid angle) matrix, S the single-layer
matrix over H, and q the normal gradient on H.  The diagonal term c_i
is never computed geometrically: the closure identity c_i = -sum_j W_ij
(a constant potential with zero flux solves the problem) supplies it,
which makes constants map to constants exactly and handles corners of
staircase surfaces automatically.

Eliminating q between the H-rows and T-rows yields the dense transfer
matrix.  Only electrode rows are retained, so the elimination solves
the transposed system for the electrode selector (a few right-hand
sides) instead of inverting against every heart column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, UserInputError
from .fields import EPICARDIAL_SURFACE, SourceField
from .geometry import TriMesh, mesh_content_hash, triangle_solid_angles
from .signals import SignalBlock, _center_rows

log = logging.getLogger(__name__)

_FOUR_PI = 4.0 * np.pi
# Edge terms with |t0| below this times the triangle scale are on an
# edge line; their contribution vanishes with t0 * log -> 0.
_EDGE_TOL = 1e-12


def _checked_lu(a: np.ndarray, what: str, overwrite: bool = False):
    """LU factorization that fails loudly on singular blocks."""
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, overwrite_a=overwrite)
    d = np.abs(np.diag(lu))
    if d.min() == 0.0 or not np.all(np.isfinite(d)):
        raise NumericalError(f"{what} is singular (zero pivot in LU)")
    return lu, piv


def triangle_inv_r_integrals(tri_xyz: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Exact integrals of 1/r over flat triangles, per observation point.

    tri_xyz: (F, 3, 3); points: (P, 3); returns (P, F) in mm.  Uses the
    standard edge decomposition: sum of t0 * log((R+s) ratios) along the
    edges minus the height times the subtended solid angle, with the
    log switched to its reflected form where the argument degenerates.
    """
    tri = np.asarray(tri_xyz, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nn = np.linalg.norm(normal, axis=1, keepdims=True)
    n_hat = normal / nn
    scale = np.sqrt(nn[:, 0])

    total = np.zeros((len(pts), len(tri)))
    for a_idx, b_idx in ((0, 1), (1, 2), (2, 0)):
        a = tri[:, a_idx]
        b = tri[:, b_idx]
        edge = b - a
        s_hat = edge / np.linalg.norm(edge, axis=1, keepdims=True)
        m_hat = np.cross(s_hat, n_hat)
        ra = a[None, :, :] - pts[:, None, :]
        rb = b[None, :, :] - pts[:, None, :]
        t0 = np.einsum("pfi,fi->pf", ra, m_hat)
        sa = np.einsum("pfi,fi->pf", ra, s_hat)
        sb = np.einsum("pfi,fi->pf", rb, s_hat)
        na = np.linalg.norm(ra, axis=-1)
        nb = np.linalg.norm(rb, axis=-1)
        # log((Rb+sb)/(Ra+sa)) == log((Ra-sa)/(Rb-sb)); pick the branch
        # whose terms stay away from zero.
        use_plus = (sa + sb) >= 0.0
        num = np.where(use_plus, nb + sb, na - sa)
        den = np.where(use_plus, na + sa, nb - sb)
        f = np.log(np.maximum(num, 1e-300) / np.maximum(den, 1e-300))
        on_line = np.abs(t0) < _EDGE_TOL * scale[None, :]
        total += np.where(on_line, 0.0, t0 * f)
    omega = triangle_solid_angles(tri, pts)
    r1 = tri[None, :, 0, :] - pts[:, None, :]
    w0 = np.einsum("pfi,fi->pf", r1, n_hat)
    total -= np.abs(w0) * np.abs(omega)
    return total


@dataclass(frozen=True)
class EpicardialOperator:
    """Dense electrode transfer matrix for epicardial potentials.

    matrix: (M, N) centred map; columns have zero electrode mean, so the
        image matches common-referenced measurements and constants on H
        map to (numerical) zero.
    matrix_raw: (M, N) uncentred map; rows sum to 1 up to collocation
        rounding (constants map to constants).
    electrode_vertices: torso-surface vertex indices of the rows.
    """

    matrix: np.ndarray
    matrix_raw: np.ndarray
    electrode_vertices: np.ndarray
    torso_hash: str
    heart_hash: str
    condition: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def _third_attribution(surface: TriMesh):
    """Sparse (F, V) matrix spreading a per-triangle value in thirds."""
    import scipy.sparse as sp

    f = surface.n_triangles
    return sp.csr_matrix(
        (
            np.full(3 * f, 1.0 / 3.0),
            (np.repeat(np.arange(f), 3), surface.triangles.ravel()),
        ),
        shape=(f, surface.n_vertices),
    )


def _attributed_blocks(
    colloc: np.ndarray,
    surface: TriMesh,
    sign: float,
    want_single_layer: bool,
    chunk: int,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertex-attributed double-layer (and optional single-layer) blocks.

    Triangle kernels are attributed in equal thirds to the triangle's
    vertices.  Double layer: sign * (-Omega / 4 pi) / 3 summed into the
    vertex columns; single layer: (integral / 4 pi) / 3.
    """
    tri_xyz = surface.vertices[surface.triangles]
    attr = _third_attribution(surface)
    n_pts = len(colloc)
    w = np.empty((n_pts, surface.n_vertices))
    s = np.empty((n_pts, surface.n_vertices)) if want_single_layer else None
    for lo in range(0, n_pts, chunk):
        hi = min(lo + chunk, n_pts)
        omega = triangle_solid_angles(tri_xyz, colloc[lo:hi])
        w[lo:hi] = (omega @ attr) * (-sign / _FOUR_PI)
        if want_single_layer:
            inv_r = triangle_inv_r_integrals(tri_xyz, colloc[lo:hi])
            s[lo:hi] = (inv_r @ attr) / _FOUR_PI
    return w, s


def assemble_epicardial(
    torso: TriMesh,
    heart: TriMesh,
    electrode_vertices: np.ndarray | None = None,
    chunk: int = 64,
) -> EpicardialOperator:
    """Assemble the epicardial-to-electrode transfer matrix.

    torso: closed outward-oriented surface, insulated.
    heart: closed outward-oriented surface strictly inside the torso
        (verified from the assembled solid angles).
    electrode_vertices: torso vertex indices to keep as rows; defaults
        to the torso's labelled electrodes.
    """
    if not torso.closed or not heart.closed:
        raise UserInputError("both surfaces must be closed")
    if electrode_vertices is None:
        electrode_vertices = torso.electrode_vertices()
    electrodes = np.atleast_1d(np.asarray(electrode_vertices, dtype=np.int64))
    if len(electrodes) < 2:
        raise UserInputError("need at least 2 electrode vertices")
    if np.any(electrodes < 0) or np.any(electrodes >= torso.n_vertices):
        raise UserInputError("electrode vertex index out of range")
    n_t = torso.n_vertices
    n_h = heart.n_vertices

    # Double layer over the torso columns: Omega_B's outward normal is
    # the torso winding, sign +1.  Heart columns: outward from Omega_B
    # is opposite the heart winding, sign -1.
    w_tt, _ = _attributed_blocks(torso.vertices, torso, +1.0, False, chunk)
    w_ht, _ = _attributed_blocks(heart.vertices, torso, +1.0, False, chunk)
    # Interior check: torso solid angle at heart vertices must be 4 pi.
    heart_inside = -w_ht.sum(axis=1)
    bad = np.abs(heart_inside - 1.0) > 1e-2
    if np.any(bad):
        raise UserInputError(
            f"{int(bad.sum())} heart vertices are not strictly inside the torso "
            f"surface (first: vertex {int(np.argmax(bad))})"
        )
    w_th, s_t = _attributed_blocks(torso.vertices, heart, -1.0, True, chunk)
    w_hh, s_h = _attributed_blocks(heart.vertices, heart, -1.0, True, chunk)

    # Closure diagonals: constants with zero flux must solve the system.
    diag_t = -(w_tt.sum(axis=1) + w_th.sum(axis=1))
    diag_h = -(w_ht.sum(axis=1) + w_hh.sum(axis=1))
    w_tt[np.arange(n_t), np.arange(n_t)] += diag_t
    w_hh[np.arange(n_h), np.arange(n_h)] += diag_h

    # Eliminate q = S_h^{-1} (W_ht phi_t + W_hh phi_h).
    lu_sh = _checked_lu(s_h, "single-layer block")
    w1 = sla.lu_solve(lu_sh, w_ht)
    w2 = sla.lu_solve(lu_sh, w_hh)
    del s_h, lu_sh, w_ht, w_hh

    # LHS = W_tt - S_t W1 accumulated in place, in column strips.
    strip = max(1, (1 << 24) // max(n_t, 1))
    for lo in range(0, n_t, strip):
        hi = min(lo + strip, n_t)
        w_tt[:, lo:hi] -= s_t @ w1[:, lo:hi]
    del w1
    rhs = s_t @ w2 - w_th
    del s_t, w2, w_th

    selector = np.zeros((n_t, len(electrodes)))
    selector[electrodes, np.arange(len(electrodes))] = 1.0
    lu = _checked_lu(w_tt, "torso collocation block", overwrite=True)
    y = sla.lu_solve(lu, selector, trans=1)
    del lu, w_tt
    a_raw = y.T @ rhs
    del y, rhs
    if not np.all(np.isfinite(a_raw)):
        raise NumericalError("transfer matrix contains non-finite entries")

    row_err = float(np.abs(a_raw.sum(axis=1) - 1.0).max())
    sv = np.linalg.svd(a_raw, compute_uv=False)
    if sv.min() <= 0:
        raise NumericalError("transfer matrix has a zero singular value")
    condition = float(sv.max() / sv.min())
    log.info(
        "epicardial operator %dx%d: row-sum error %.2e, cond %.3e",
        *a_raw.shape, row_err, condition,
    )
    return EpicardialOperator(
        matrix=_center_rows(a_raw.copy()),
        matrix_raw=a_raw,
        electrode_vertices=electrodes,
        torso_hash=mesh_content_hash(torso),
        heart_hash=mesh_content_hash(heart),
        condition=condition,
    )


def forward_epicardial(op: EpicardialOperator, h: SourceField) -> SignalBlock:
    """Torso electrode traces for epicardial potentials h."""
    if h.domain != EPICARDIAL_SURFACE:
        raise UserInputError(f"expected an epicardial-surface field, got {h.domain!r}")
    if h.n_nodes != op.shape[1]:
        raise UserInputError(
            f"operator expects {op.shape[1]} surface nodes, field has {h.n_nodes}"
        )
    return SignalBlock(
        samples=op.matrix @ h.values,
        sample_rate=h.sample_rate,
        channel_ids=np.arange(op.shape[0]),
        time_zero=h.time_zero,
    )
