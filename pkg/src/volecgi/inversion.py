"""Tikhonov-regularized inversion with L-curve parameter selection.

Both inverse formulations minimize ||A x - g||^2 + lambda^2 ||x||^2.
The solution is evaluated through the SVD of the operator, where the
filter factors sigma_k^2 / (sigma_k^2 + lambda^2) make sweeping a
60-point lambda grid essentially free once the decomposition exists.

The volumetric variant restricts the solution to the feasible subspace
m^T f = 0 by deflating the operator columns with the projector
P = I - m m^T / ||m||^2 before the SVD and re-projecting the solution,
so the constraint holds to machine precision for every lambda.

The L-curve criterion picks the corner of (log rho, log eta): the point
of extreme signed curvature for the descending-lambda parameterization.
Ties resolve to the smaller lambda and corners at the grid boundary are
flagged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UserInputError
from .fields import EPICARDIAL_SURFACE, HEART_VOLUME, SourceField
from .signals import SignalBlock

log = logging.getLogger(__name__)

_GRID_POINTS = 60
_GRID_FLOOR = 1e-8


@dataclass(frozen=True)
class RegularizationParams:
    """Inversion controls.

    lam: fixed regularization parameter; None selects via the L-curve.
    grid: explicit strictly decreasing lambda grid; None builds the
        default 60-point log grid from sigma_max down to
        max(sigma_min, 1e-8 sigma_max).
    """

    lam: float | None = None
    grid: np.ndarray | None = None

    def __post_init__(self):
        if self.lam is not None and not self.lam >= 0:
            raise UserInputError(f"lambda must be >= 0, got {self.lam}")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if g.ndim != 1 or len(g) < 3:
                raise UserInputError("lambda grid needs at least 3 values")
            if np.any(g <= 0) or np.any(np.diff(g) >= 0):
                raise UserInputError("lambda grid must be positive, strictly decreasing")
            object.__setattr__(self, "grid", g)


@dataclass(frozen=True)
class LCurve:
    """Residual/seminorm trace of a lambda sweep."""

    lambdas: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    curvature: np.ndarray
    chosen_index: int
    corner_at_boundary: bool
    degenerate: bool


@dataclass(frozen=True)
class InverseSolution:
    """Regularized reconstruction with its selection diagnostics."""

    solution: SourceField
    lam: float
    rho: float
    eta: float
    curve: LCurve | None


def default_grid(sigma_max: float, sigma_min: float) -> np.ndarray:
    """60 log-spaced lambdas, sigma_max down to max(sigma_min, 1e-8 s_max)."""
    if not sigma_max > 0:
        raise NumericalError("operator has no positive singular values")
    lo = max(sigma_min, _GRID_FLOOR * sigma_max)
    if lo >= sigma_max:
        lo = _GRID_FLOOR * sigma_max
    return np.geomspace(sigma_max, lo, _GRID_POINTS)


class _SvdInverter:
    """Shared filter-factor machinery over a fixed SVD."""

    def __init__(self, a: np.ndarray, g: np.ndarray):
        if a.ndim != 2:
            raise UserInputError("operator must be a matrix")
        if g.shape[0] != a.shape[0]:
            raise UserInputError(
                f"operator has {a.shape[0]} rows but data has {g.shape[0]} channels"
            )
        try:
            u, s, vt = np.linalg.svd(a, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"svd of the operator failed: {exc}")
        self.u, self.s, self.vt = u, s, vt
        # Components below working rank are truncated, not amplified.
        self.live = s > s[0] * np.finfo(float).eps * max(a.shape) if s.size else s
        self.c = u.T @ g
        # Residual component outside the operator's column space.
        self.rho_floor_sq = float(max(np.sum(g * g) - np.sum(self.c * self.c), 0.0))

    def coefficients(self, lam: float) -> np.ndarray:
        s = self.s
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(self.live, s / (s * s + lam * lam), 0.0)
        return w[:, None] * self.c

    def solve(self, lam: float) -> np.ndarray:
        return self.vt.T @ self.coefficients(lam)

    def rho_eta(self, lam: float) -> tuple[float, float]:
        s = self.s
        coef = self.coefficients(lam)
        with np.errstate(divide="ignore", invalid="ignore"):
            filt = np.where(self.live, (lam * lam) / (s * s + lam * lam), 1.0)
        rho_sq = self.rho_floor_sq + float(np.sum((filt[:, None] * self.c) ** 2))
        eta_sq = float(np.sum(coef * coef))
        return np.sqrt(rho_sq), np.sqrt(eta_sq)


def lcurve_select(
    lambdas: np.ndarray, rho: np.ndarray, eta: np.ndarray
) -> tuple[int, np.ndarray, bool, bool]:
    """Pick the L-curve corner on a strictly decreasing lambda grid.

    Returns (index, curvature, at_boundary, degenerate).  Curvature is
    the signed curvature of (log rho, log eta) by central differences;
    the corner is its most negative point (the path turns right there
    when traversed with decreasing lambda).  Exact ties resolve to the
    smallest lambda.  A collinear trace has no corner: the middle grid
    point is returned with the degenerate flag set.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    r = np.asarray(rho, dtype=np.float64)
    e = np.asarray(eta, dtype=np.float64)
    if not (len(lam) == len(r) == len(e)) or len(lam) < 3:
        raise UserInputError("l-curve needs >= 3 matching (lambda, rho, eta) samples")
    if np.any(np.diff(lam) >= 0):
        raise UserInputError("lambda grid must be strictly decreasing")
    if np.any(r <= 0) or np.any(e <= 0):
        raise NumericalError("l-curve requires positive residual and seminorm")
    x = np.log(r)
    y = np.log(e)
    dx = np.gradient(x)
    dy = np.gradient(y)
    ddx = np.gradient(dx)
    ddy = np.gradient(dy)
    speed_sq = dx * dx + dy * dy
    tiny = np.finfo(float).tiny
    curvature = (dx * ddy - dy * ddx) / np.maximum(speed_sq, tiny) ** 1.5

    # Collinearity: the trace fits a straight line to machine precision.
    span = max(x.max() - x.min(), y.max() - y.min(), 1.0)
    gx = x - x.mean()
    gy = y - y.mean()
    cov = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
    evals = np.linalg.eigvalsh(cov)
    degenerate = bool(evals[0] <= 1e-24 * max(evals[1], span * span))
    if degenerate:
        log.warning("l-curve is collinear; no corner, using the mid-grid lambda")
        return len(lam) // 2, curvature, False, True

    score = -curvature
    best = float(score.max())
    # Ties go to the smallest lambda: the grid decreases, so take the
    # last index among the maximizers.
    idx = int(np.flatnonzero(score >= best - 1e-12 * abs(best))[-1])
    at_boundary = idx in (0, len(lam) - 1)
    if at_boundary:
        log.warning("l-curve corner sits at the grid boundary (lambda=%g)", lam[idx])
    return idx, curvature, at_boundary, degenerate


def _sweep(inv: _SvdInverter, params: RegularizationParams):
    if params.grid is not None:
        grid = params.grid
    else:
        live_s = inv.s[inv.live]
        if live_s.size == 0:
            raise NumericalError("operator is numerically zero")
        grid = default_grid(float(live_s.max()), float(live_s.min()))
    pairs = [inv.rho_eta(l) for l in grid]
    rho = np.array([p[0] for p in pairs])
    eta = np.array([p[1] for p in pairs])
    if params.lam is not None:
        r, e = inv.rho_eta(params.lam)
        return params.lam, r, e, None
    idx, curvature, at_boundary, degenerate = lcurve_select(grid, rho, eta)
    curve = LCurve(
        lambdas=grid,
        rho=rho,
        eta=eta,
        curvature=curvature,
        chosen_index=idx,
        corner_at_boundary=at_boundary,
        degenerate=degenerate,
    )
    return float(grid[idx]), float(rho[idx]), float(eta[idx]), curve


def tikhonov(
    op,
    g: SignalBlock,
    params: RegularizationParams = RegularizationParams(),
) -> InverseSolution:
    """Epicardial potentials from torso signals.

    op: EpicardialOperator (its centred matrix is used).
    g: common-referenced torso signals, channels matching the rows.
    """
    a = op.matrix
    inv = _SvdInverter(a, g.samples)
    lam, rho, eta, curve = _sweep(inv, params)
    sol = inv.solve(lam)
    return InverseSolution(
        solution=SourceField(
            values=sol,
            sample_rate=g.sample_rate,
            node_ids=np.arange(a.shape[1]),
            domain=EPICARDIAL_SURFACE,
            time_zero=g.time_zero,
        ),
        lam=lam, rho=rho, eta=eta, curve=curve,
    )


def constrained_tikhonov(
    op,
    g: SignalBlock,
    params: RegularizationParams = RegularizationParams(),
) -> InverseSolution:
    """Volumetric sources from torso signals, restricted to m^T f = 0.

    op: VolumetricOperator with constraint vector m.
    The operator is deflated by the projector onto the constraint's
    orthogonal complement; the reconstruction is re-projected, so the
    constraint holds for every sample to rounding error.
    """
    m = np.asarray(op.constraint, dtype=np.float64)
    norm_sq = float(m @ m)
    if norm_sq <= 0:
        raise UserInputError("constraint vector must be nonzero")
    a = op.matrix - np.outer(op.matrix @ m, m) / norm_sq
    inv = _SvdInverter(a, g.samples)
    lam, rho, eta, curve = _sweep(inv, params)
    sol = inv.solve(lam)
    sol -= np.outer(m, m @ sol) / norm_sq
    return InverseSolution(
        solution=SourceField(
            values=sol,
            sample_rate=g.sample_rate,
            node_ids=op.heart_nodes,
            domain=HEART_VOLUME,
            time_zero=g.time_zero,
        ),
        lam=lam, rho=rho, eta=eta, curve=curve,
    )


def write_lcurve_csv(path: str, curve: LCurve):
    """Dump a lambda sweep as `lambda,rho,eta,curvature` rows."""
    with open(path, "w") as fh:
        fh.write("lambda,rho,eta,curvature\n")
        for k in range(len(curve.lambdas)):
            fh.write(
                "%.17g,%.17g,%.17g,%.17g\n"
                % (curve.lambdas[k], curve.rho[k], curve.eta[k], curve.curvature[k])
            )
