"""Volumetric forward model: Poisson sources in an insulated torso.

The torso volume conducts with piecewise-constant conductivity per
region.  Linear tetrahedral elements give the stiffness matrix K; the
insulated boundary makes K singular with the constant vector as null
space, so solutions are pinned during factorization and re-gauged
afterwards.

Transfer operators come from discrete Green fields: for electrode node
y_i, the load is a unit source at y_i balanced by a uniform boundary
sink (area-lumped, summing to exactly zero).  Sampling Green fields on
heart nodes and weighting columns by the lumped node volumes yields the
electrode transfer matrix B with the property that B f reproduces,
exactly up to solver tolerance, the common-referenced electrode trace
of a direct volume solve driven by f.  The compatibility functional is
the same weight vector: feasible sources satisfy m^T f = 0.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, UserInputError
from .fields import HEART_VOLUME, SourceField
from .geometry import (
    HEART_REGION,
    TetMesh,
    boundary_surface,
    lumped_volumes,
    mesh_content_hash,
)
from .signals import SignalBlock, _center_rows

log = logging.getLogger(__name__)

# Default relative tolerance on |sum(rhs)| for Neumann solvability.
_COMPAT_RTOL = 1e-9
# Relative residual demanded of each linear solve.
_RESID_RTOL = 1e-10


@dataclass(frozen=True)
class ConductivityMap:
    """Conductivity in S/m per region label."""

    values: dict

    def __post_init__(self):
        for label, sigma in self.values.items():
            if not sigma > 0:
                raise UserInputError(
                    f"conductivity for region {label} must be positive, got {sigma}"
                )

    @classmethod
    def homogeneous(cls, sigma: float = 1.0) -> "ConductivityMap":
        return cls(values={None: float(sigma)})

    def per_tet(self, mesh: TetMesh) -> np.ndarray:
        if set(self.values) == {None}:
            return np.full(mesh.n_tets, self.values[None])
        missing = set(np.unique(mesh.region)) - set(self.values)
        if missing:
            raise UserInputError(
                f"no conductivity given for region labels {sorted(missing)}"
            )
        out = np.empty(mesh.n_tets)
        for label, sigma in self.values.items():
            out[mesh.region == label] = sigma
        return out

    def describe(self) -> str:
        if set(self.values) == {None}:
            return f"homogeneous:{self.values[None]!r}"
        return ",".join(f"{k}:{v!r}" for k, v in sorted(self.values.items()))


def assemble_stiffness(mesh: TetMesh, sigma: ConductivityMap) -> sp.csr_matrix:
    """P1 tetrahedral stiffness matrix for div(sigma grad phi).

    Element diagonals are assembled as the negated off-diagonal row sum,
    so constants are annihilated to rounding error and the matrix is
    exactly symmetric.
    """
    sig = sigma.per_tet(mesh)
    v = mesh.vertices
    t = mesh.tets
    p0 = v[t[:, 0]]
    edges = np.stack([v[t[:, 1]] - p0, v[t[:, 2]] - p0, v[t[:, 3]] - p0], axis=1)
    det = np.linalg.det(edges)
    if np.any(det <= 6.0 * 1e-12):
        bad = int(np.argmin(det))
        raise NumericalError(
            f"tet {bad} is inverted or degenerate (signed volume {det[bad] / 6.0:.3e})"
        )
    vol = det / 6.0
    # Barycentric gradients: rows of inv(edges); gradient of the first
    # vertex balances the others exactly.
    inv = np.linalg.inv(edges)
    grads = np.empty((mesh.n_tets, 4, 3))
    grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)

    coeff = sig * vol
    rows, cols, vals = [], [], []
    diag = np.zeros((mesh.n_tets, 4))
    for i in range(4):
        for j in range(i + 1, 4):
            kij = coeff * np.einsum("nk,nk->n", grads[:, i], grads[:, j])
            rows.append(t[:, i]); cols.append(t[:, j]); vals.append(kij)
            rows.append(t[:, j]); cols.append(t[:, i]); vals.append(kij)
            diag[:, i] -= kij
            diag[:, j] -= kij
    for i in range(4):
        rows.append(t[:, i]); cols.append(t[:, i]); vals.append(diag[:, i])
    k = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    # Duplicate summation order can differ between (i, j) and (j, i);
    # averaging with the transpose restores bitwise symmetry (a + b is
    # commutative and the halving is exact).
    return ((k + k.T) * 0.5).tocsr()


@dataclass(frozen=True)
class PotentialField:
    """Potential over all mesh nodes at one instant, volume-mean-zero gauge."""

    values: np.ndarray
    gauge: str = "volume-mean-zero"


@dataclass(frozen=True)
class GreenField:
    """Discrete Green field for one electrode, boundary-mean-zero gauge.

    The boundary gauge (area-weighted zero mean over the torso surface)
    makes the fields reciprocal: G_i(y_j) == G_j(y_i).
    """

    electrode_node: int
    values: np.ndarray
    gauge: str = "boundary-mean-zero"


class NeumannSolver:
    """Factorized singular Neumann system with gauge handling.

    One node is pinned to make the factorization regular; solutions are
    shifted afterwards to the requested gauge, which removes any trace
    of the pinning choice.  Right-hand sides must sum to zero (the
    insulated boundary admits no net source); incompatible loads are
    mean-shifted with a logged warning.
    """

    def __init__(self, stiffness: sp.spmatrix, volume_weights: np.ndarray,
                 method: str = "direct"):
        k = stiffness.tocsr()
        n = k.shape[0]
        if k.shape != (n, n):
            raise UserInputError("stiffness matrix must be square")
        w = np.asarray(volume_weights, dtype=np.float64)
        if w.shape != (n,) or not np.all(w >= 0) or w.sum() <= 0:
            raise UserInputError("volume weights must be non-negative with positive sum")
        self.n = n
        self.k = k
        self.weights = w
        self.weight_sum = float(w.sum())
        self.method = method
        self.incompatible_count = 0
        # SuperLU solves are not documented thread-safe; callers sharing
        # one factorization across threads go through this lock.
        self._lock = threading.Lock()
        if method == "direct":
            reduced = k[1:, 1:].tocsc()
            try:
                self._lu = spla.splu(reduced)
            except RuntimeError as exc:
                raise NumericalError(f"stiffness factorization failed: {exc}")
        elif method == "cg":
            self._scale = k.diagonal()
            if np.any(self._scale <= 0):
                raise NumericalError("stiffness diagonal is not positive")
        else:
            raise UserInputError(f"unknown solve method {method!r}")

    def _solve_pinned(self, rhs: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rhs)
        if self.method == "direct":
            with self._lock:
                out[1:] = self._lu.solve(np.ascontiguousarray(rhs[1:]))
            return out
        for j in range(rhs.shape[1]):
            x, info = spla.cg(
                self.k[1:, 1:], rhs[1:, j], rtol=1e-12, atol=0.0,
                M=sp.diags(1.0 / self._scale[1:]), maxiter=20 * self.n,
            )
            if info != 0:
                raise NumericalError(f"cg did not converge (info={info})")
            out[1:, j] = x
        return out

    def gauge_shift(self, phi: np.ndarray) -> np.ndarray:
        """Shift columns to volume-weighted zero mean."""
        shift = self.weights @ phi / self.weight_sum
        return phi - shift

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve K phi = rhs (columns independent), volume-mean-zero gauge.

        Applies one step of iterative refinement and enforces a relative
        residual of 1e-10 per column.
        """
        rhs = np.asarray(rhs, dtype=np.float64)
        squeeze = rhs.ndim == 1
        b = rhs.reshape(self.n, -1).copy()
        norms = np.linalg.norm(b, axis=0)
        sums = b.sum(axis=0)
        bad = np.abs(sums) > _COMPAT_RTOL * np.maximum(norms, 1e-300)
        if np.any(bad):
            self.incompatible_count += int(bad.sum())
            log.warning(
                "neumann rhs violates compatibility in %d column(s); mean-shifted",
                int(bad.sum()),
            )
            b[:, bad] -= sums[bad] / self.n
        phi = self._solve_pinned(b)
        bnorm = np.maximum(np.linalg.norm(b, axis=0), 1e-300)
        resid = b - self.k @ phi
        rel = np.linalg.norm(resid, axis=0) / bnorm
        if np.any(rel > _RESID_RTOL):
            # One step of iterative refinement on the offending columns.
            poor = rel > _RESID_RTOL
            phi[:, poor] += self._solve_pinned(np.ascontiguousarray(resid[:, poor]))
            resid = b - self.k @ phi
            rel = np.linalg.norm(resid, axis=0) / bnorm
            if np.any(rel > _RESID_RTOL):
                raise NumericalError(
                    f"neumann solve residual {rel.max():.3e} exceeds "
                    f"{_RESID_RTOL:.0e} after refinement"
                )
        phi = self.gauge_shift(phi)
        return phi[:, 0] if squeeze else phi


def solve_neumann(
    mesh: TetMesh,
    sigma: ConductivityMap,
    rhs: np.ndarray,
    solver: NeumannSolver | None = None,
) -> PotentialField:
    """One-call Neumann solve returning a gauged PotentialField."""
    if solver is None:
        solver = NeumannSolver(
            assemble_stiffness(mesh, sigma), lumped_volumes(mesh, region=None)
        )
    return PotentialField(values=solver.solve(rhs))


def _fold_to_target(v: np.ndarray, target: float) -> np.ndarray:
    """Nudge the largest-magnitude entry until the sum is exactly target."""
    for _ in range(4):
        resid = v.sum() - target
        if resid == 0.0:
            break
        v[int(np.argmax(np.abs(v)))] -= resid
    return v


def boundary_sink(mesh: TetMesh) -> np.ndarray:
    """Area-lumped uniform boundary sink, normalized to sum exactly 1.

    The residue of the normalization is folded back into the largest
    entry so the discrete total is exactly 1.0 in float64.
    """
    surf = boundary_surface(mesh, region=None)
    w = np.zeros(mesh.n_vertices)
    w[surf.parent_vertices] = surf.vertex_areas()
    w /= w.sum()
    return _fold_to_target(w, 1.0)


def green_field(
    solver: NeumannSolver,
    electrode_nodes: np.ndarray,
    sink: np.ndarray,
) -> list[GreenField]:
    """Green fields for unit sources at electrode nodes.

    Loads are e_i - sink with the sink normalized to total exactly 1, so
    each column sums to exactly zero.  Fields are re-gauged to zero
    area-weighted boundary mean, the gauge in which reciprocity
    G_i(y_j) == G_j(y_i) is an algebraic identity of the symmetric
    factorization.
    """
    nodes = np.atleast_1d(np.asarray(electrode_nodes, dtype=np.int64))
    if np.any(nodes < 0) or np.any(nodes >= solver.n):
        raise UserInputError("electrode node index out of range")
    rhs = np.repeat(-sink[:, None], len(nodes), axis=1)
    rhs[nodes, np.arange(len(nodes))] += 1.0
    for j in range(rhs.shape[1]):
        _fold_to_target(rhs[:, j], 0.0)
    phi = solver.solve(rhs)
    # Boundary gauge: sink weights double as the boundary area measure.
    phi = phi - sink @ phi
    return [
        GreenField(electrode_node=int(nodes[i]), values=phi[:, i])
        for i in range(len(nodes))
    ]


@dataclass(frozen=True)
class VolumetricOperator:
    """Electrode transfer matrix for volumetric sources.

    matrix: (M, P) centred transfer matrix; columns have zero electrode
        mean, rows act on heart-node source values.
    constraint: (P,) weight vector m with m^T f = 0 for feasible sources
        (the lumped heart node volumes).
    heart_nodes: (P,) mesh vertex indices the columns correspond to.
    electrode_nodes: (M,) mesh vertex indices of the electrodes.
    quadrature_weighted: whether columns carry the lumped volume weights
        (the default; required for B f to match a direct solve).
    """

    matrix: np.ndarray
    constraint: np.ndarray
    heart_nodes: np.ndarray
    electrode_nodes: np.ndarray
    mesh_hash: str
    sigma: str
    quadrature_weighted: bool = True
    gauge: str = "common-reference"

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def assemble_volumetric(
    mesh: TetMesh,
    sigma: ConductivityMap,
    electrode_nodes: np.ndarray,
    solver: NeumannSolver | None = None,
    quadrature_weighted: bool = True,
) -> VolumetricOperator:
    """Build the electrode transfer matrix from Green fields.

    B[i, j] = G_i(x_j) * v_j with v the lumped heart node volumes (the
    weighting makes B f the exact quadrature adjoint of the direct
    solve); columns are then centred to zero electrode mean, matching
    common-referenced measurements.
    """
    heart = mesh.heart_nodes()
    if len(heart) == 0:
        raise UserInputError("mesh has no heart region (label 1) tets")
    electrode_nodes = np.atleast_1d(np.asarray(electrode_nodes, dtype=np.int64))
    if len(electrode_nodes) < 2:
        raise UserInputError("need at least 2 electrodes")
    if solver is None:
        solver = NeumannSolver(
            assemble_stiffness(mesh, sigma), lumped_volumes(mesh, region=None)
        )
    sink = boundary_sink(mesh)
    if np.any(sink[electrode_nodes] == 0.0):
        bad = electrode_nodes[sink[electrode_nodes] == 0.0]
        raise UserInputError(
            f"electrode nodes {bad.tolist()} are not on the torso boundary"
        )
    fields = green_field(solver, electrode_nodes, sink)
    m = lumped_volumes(mesh, region=HEART_REGION)[heart]
    b = np.stack([f.values[heart] for f in fields])
    if quadrature_weighted:
        b = b * m[None, :]
    b = _center_rows(b)
    return VolumetricOperator(
        matrix=b,
        constraint=m,
        heart_nodes=heart,
        electrode_nodes=electrode_nodes,
        mesh_hash=mesh_content_hash(mesh),
        sigma=sigma.describe(),
        quadrature_weighted=quadrature_weighted,
    )


def forward_volumetric(op: VolumetricOperator, f: SourceField) -> SignalBlock:
    """Apply the transfer matrix to a source field."""
    if f.domain != HEART_VOLUME:
        raise UserInputError(f"expected a heart-volume field, got {f.domain!r}")
    if f.n_nodes != op.shape[1]:
        raise UserInputError(
            f"operator expects {op.shape[1]} source nodes, field has {f.n_nodes}"
        )
    return SignalBlock(
        samples=op.matrix @ f.values,
        sample_rate=f.sample_rate,
        channel_ids=np.arange(op.shape[0]),
        time_zero=f.time_zero,
    )


def forward_direct(
    mesh: TetMesh,
    sigma: ConductivityMap,
    f: SourceField,
    electrode_nodes: np.ndarray,
    solver: NeumannSolver | None = None,
    batch: int = 64,
) -> SignalBlock:
    """Reference forward route: volume solves sampled at electrodes.

    Each time sample is a full Neumann solve with the lumped source
    load; electrode traces are common-average referenced.  Sources must
    satisfy the compatibility condition m^T f = 0 per sample to 1e-9
    relative.
    """
    if f.domain != HEART_VOLUME:
        raise UserInputError(f"expected a heart-volume field, got {f.domain!r}")
    heart = mesh.heart_nodes()
    if f.n_nodes != len(heart) or not np.array_equal(f.node_ids, heart):
        raise UserInputError("field node ids do not match the mesh heart nodes")
    electrode_nodes = np.atleast_1d(np.asarray(electrode_nodes, dtype=np.int64))
    if solver is None:
        solver = NeumannSolver(
            assemble_stiffness(mesh, sigma), lumped_volumes(mesh, region=None)
        )
    m = lumped_volumes(mesh, region=HEART_REGION)[heart]
    mismatch = np.abs(m @ f.values)
    scale = np.linalg.norm(m) * np.maximum(
        np.linalg.norm(f.values, axis=0), 1e-300
    )
    if np.any(mismatch > _COMPAT_RTOL * scale):
        worst = int(np.argmax(mismatch / scale))
        raise UserInputError(
            f"source sample {worst} violates compatibility: |m^T f| = "
            f"{mismatch[worst]:.3e} (relative {mismatch[worst] / scale[worst]:.3e})"
        )
    out = np.empty((len(electrode_nodes), f.n_samples))
    for lo in range(0, f.n_samples, batch):
        hi = min(lo + batch, f.n_samples)
        rhs = np.zeros((mesh.n_vertices, hi - lo))
        rhs[heart] = m[:, None] * f.values[:, lo:hi]
        phi = solver.solve(rhs)
        out[:, lo:hi] = phi[electrode_nodes]
    out = _center_rows(out)
    return SignalBlock(
        samples=out,
        sample_rate=f.sample_rate,
        channel_ids=np.arange(len(electrode_nodes)),
        time_zero=f.time_zero,
    )
