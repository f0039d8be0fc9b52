"""Synthetic torso/heart phantom with known activation ground truth.

The torso is an ellipsoid voxelized into five-tet cubes; the heart is a
truncated ellipsoidal shell (a cup: outer ellipsoid minus a wall-offset
inner one, cut above a base plane) marked as region 1.  Electrodes are
spread over the torso surface by farthest-point sampling.  Activation
spreads from seed nodes at a fixed conduction velocity along the heart
edge graph; each node then fires a biphasic waveform centred at its
activation time, the whole field is balanced to the compatibility
constraint, and electrode traces come from direct volume solves with an
optionally mismatched conductivity so the inverse never sees its own
forward model bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import NumericalError, UserInputError
from .fields import HEART_VOLUME, SourceField
from .fem import ConductivityMap, NeumannSolver, assemble_stiffness, forward_direct
from .geometry import (
    HEART_REGION,
    TetMesh,
    TriMesh,
    boundary_surface,
    edge_graph,
    geodesic_distances,
    lumped_volumes,
)
from .shapes import voxel_tet_mesh
from .signals import SignalBlock, add_gaussian_noise, lowpass_array

SEED_CLASSES = ("base-rim", "inner-wall", "outer-wall")

# Conductivity presets (S/m, relative scale): the mismatched forward
# uses distinct heart/torso values so reconstruction through the
# homogeneous operator is honest about model error.
FORWARD_SIGMA = {
    "homogeneous": ConductivityMap.homogeneous(1.0),
    "mismatched": ConductivityMap(values={0: 0.8, HEART_REGION: 0.7}),
}


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom geometry and simulation parameters.

    Lengths in mm, velocities in m/s (numerically equal to mm/ms).
    window_ms None sizes the window to cover the full activation plus
    waveform support automatically.
    """

    torso_semi_axes: tuple = (150.0, 100.0, 200.0)
    heart_center: tuple = (25.0, 0.0, 40.0)
    heart_outer_semi_axes: tuple = (50.0, 50.0, 70.0)
    wall_mm: float = 14.0
    base_cut_fraction: float = 0.35
    pitch_mm: float = 6.0
    n_electrodes: int = 128
    seed_class: str = "outer-wall"
    n_seeds: int = 1
    conduction_m_per_s: float = 0.7
    sigma_w_ms: float = 8.0
    sample_rate_hz: float = 500.0
    window_ms: float | None = None
    snr_db: float = 20.0
    noise_lowpass_hz: float = 50.0
    noise_lowpass_order: int = 10
    forward_sigma: str = "mismatched"
    seed: int = 2026

    def __post_init__(self):
        if self.pitch_mm <= 0:
            raise UserInputError("pitch must be positive")
        if self.wall_mm <= 0:
            raise UserInputError("wall thickness must be positive")
        if min(self.heart_outer_semi_axes) <= self.wall_mm:
            raise UserInputError("wall thickness swallows the inner cavity")
        if not 0 < self.base_cut_fraction < 1:
            raise UserInputError("base_cut_fraction must be in (0, 1)")
        if self.seed_class not in SEED_CLASSES:
            raise UserInputError(
                f"seed_class must be one of {SEED_CLASSES}, got {self.seed_class!r}"
            )
        if self.n_seeds < 1:
            raise UserInputError("n_seeds must be >= 1")
        if self.conduction_m_per_s <= 0:
            raise UserInputError("conduction velocity must be positive")
        if self.sigma_w_ms <= 0:
            raise UserInputError("waveform width must be positive")
        if self.n_electrodes < 2:
            raise UserInputError("need at least 2 electrodes")
        if self.forward_sigma not in FORWARD_SIGMA:
            raise UserInputError(
                f"forward_sigma must be one of {sorted(FORWARD_SIGMA)}"
            )


@dataclass(frozen=True)
class PhantomGeometry:
    """Meshes and electrode bookkeeping built from a PhantomSpec."""

    mesh: TetMesh
    torso_surface: TriMesh
    heart_surface: TriMesh
    electrode_surface_vertices: np.ndarray
    electrode_mesh_nodes: np.ndarray


def _inside_ellipsoid(points: np.ndarray, center, semi_axes) -> np.ndarray:
    rel = (points - np.asarray(center)) / np.asarray(semi_axes)
    return np.einsum("ij,ij->i", rel, rel) <= 1.0


def build_geometry(spec: PhantomSpec) -> PhantomGeometry:
    """Voxelize the torso, label the heart cup, place the electrodes."""
    a = np.asarray(spec.torso_semi_axes, dtype=np.float64)
    p = spec.pitch_mm
    counts = np.maximum((np.ceil(2.0 * a / p)).astype(int), 1)
    origin = -0.5 * counts * p
    axes = [origin[k] + p * (0.5 + np.arange(counts[k])) for k in range(3)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)
    inside = _inside_ellipsoid(centers, (0.0, 0.0, 0.0), a).reshape(tuple(counts))
    if not inside.any():
        raise UserInputError("pitch too coarse: no voxel centres inside the torso")
    mesh, owner = voxel_tet_mesh(origin, p, inside)

    # Heart region: tets whose centroid falls inside the cup.
    centroids = mesh.vertices[mesh.tets].mean(axis=1)
    heart_c = np.asarray(spec.heart_center, dtype=np.float64)
    outer = np.asarray(spec.heart_outer_semi_axes, dtype=np.float64)
    inner = outer - spec.wall_mm
    in_outer = _inside_ellipsoid(centroids, heart_c, outer)
    in_inner = _inside_ellipsoid(centroids, heart_c, inner)
    below_cut = (centroids[:, 2] - heart_c[2]) <= spec.base_cut_fraction * outer[2]
    region = np.where(in_outer & ~in_inner & below_cut, HEART_REGION, 0)
    if not np.any(region == HEART_REGION):
        raise UserInputError("heart shell contains no tets; refine the pitch")
    mesh = TetMesh(vertices=mesh.vertices, tets=mesh.tets, region=region)

    torso_surface = boundary_surface(mesh, region=None)
    heart_surface = boundary_surface(mesh, region=HEART_REGION)
    if spec.n_electrodes > torso_surface.n_vertices:
        raise UserInputError(
            f"{spec.n_electrodes} electrodes exceed the {torso_surface.n_vertices} "
            "torso surface vertices"
        )
    elec = _farthest_point_sample(
        torso_surface.vertices, spec.n_electrodes, rng.generator(spec.seed, 0xE1EC)
    )
    labels = np.full(torso_surface.n_vertices, -1, dtype=np.int64)
    labels[elec] = np.arange(spec.n_electrodes)
    torso_surface = TriMesh(
        vertices=torso_surface.vertices,
        triangles=torso_surface.triangles,
        point_labels=labels,
        closed=True,
        parent_vertices=torso_surface.parent_vertices,
    )
    return PhantomGeometry(
        mesh=mesh,
        torso_surface=torso_surface,
        heart_surface=heart_surface,
        electrode_surface_vertices=elec,
        electrode_mesh_nodes=torso_surface.parent_vertices[elec],
    )


def _farthest_point_sample(
    points: np.ndarray, k: int, gen: np.random.Generator
) -> np.ndarray:
    """Greedy max-min Euclidean sampling; the first point is random."""
    n = len(points)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(gen.integers(0, n))
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1), out=dist)
    return chosen


def _seed_candidates(spec: PhantomSpec, geo: PhantomGeometry, cls: str) -> np.ndarray:
    """Heart nodes eligible as activation origins for a seed class.

    base-rim: nodes near the cut plane; inner-wall: nodes on the cavity
    side of the mid-wall; outer-wall: nodes on the epicardial side.
    All classes require the node to lie on the heart boundary surface.
    """
    heart = geo.mesh.heart_nodes()
    on_surface = np.intersect1d(heart, geo.heart_surface.parent_vertices)
    pts = geo.mesh.vertices[on_surface]
    heart_c = np.asarray(spec.heart_center)
    outer = np.asarray(spec.heart_outer_semi_axes, dtype=np.float64)
    inner = outer - spec.wall_mm
    z_cut = heart_c[2] + spec.base_cut_fraction * outer[2]
    rel_z = pts[:, 2]
    near_rim = rel_z >= z_cut - 1.01 * spec.pitch_mm
    # Ellipsoidal radius (1 on the outer shell, <1 inside it).
    r_outer = np.linalg.norm((pts - heart_c) / outer, axis=1)
    r_inner = np.linalg.norm((pts - heart_c) / inner, axis=1)
    # Mid-wall in normalized coordinates: closer to the inner surface
    # (r_inner near 1) than the outer one.
    inner_side = np.abs(r_inner - 1.0) < np.abs(r_outer - 1.0)
    if cls == "base-rim":
        mask = near_rim
    elif cls == "inner-wall":
        mask = inner_side & ~near_rim
    else:
        mask = ~inner_side & ~near_rim
    cand = on_surface[mask]
    if len(cand) == 0:
        raise NumericalError(f"no candidate seed nodes for class {cls!r}")
    return cand


def simulate_activation(
    mesh: TetMesh, seed_nodes: np.ndarray, conduction_m_per_s: float
) -> np.ndarray:
    """Activation times (ms) on heart nodes: graph distance / velocity.

    Returns times aligned with mesh.heart_nodes(); the earliest seed
    dominates where wavefronts meet.  Disconnected heart nodes are an
    error.
    """
    if conduction_m_per_s <= 0:
        raise UserInputError("conduction velocity must be positive")
    heart = mesh.heart_nodes()
    seeds = np.atleast_1d(np.asarray(seed_nodes, dtype=np.int64))
    if not np.all(np.isin(seeds, heart)):
        raise UserInputError("seed nodes must be heart nodes")
    graph = edge_graph(mesh, region=HEART_REGION)
    dist = geodesic_distances(graph, seeds)[heart]
    if np.any(np.isinf(dist)):
        n_bad = int(np.isinf(dist).sum())
        raise NumericalError(
            f"{n_bad} heart nodes are unreachable from the seeds; "
            "the heart region is disconnected"
        )
    # mm / (m/s) == ms numerically.
    return dist / conduction_m_per_s


def source_waveform(tau_ms: np.ndarray, sigma_w_ms: float) -> np.ndarray:
    """Biphasic pulse with its steepest rise exactly at tau = 0.

    u(tau) = (tau/sigma) * exp((1 - tau^2/sigma^2) / 2); the derivative
    peaks at tau = 0 with value 1/sigma * e^{1/2} * ... normalized so
    the peak amplitude is 1 at tau = sigma.
    """
    t = np.asarray(tau_ms, dtype=np.float64) / sigma_w_ms
    return t * np.exp(0.5 * (1.0 - t * t))


def synthesize_sources(
    lat_ms: np.ndarray,
    node_ids: np.ndarray,
    volumes: np.ndarray,
    spec: PhantomSpec,
) -> SourceField:
    """Per-node waveforms centred at activation, balanced to m^T f = 0.

    The window starts 4 sigma_w before the first activation and must
    cover the last activation plus 5 sigma_w.  Balancing subtracts the
    volume-weighted mean per sample, a spatially uniform offset that
    carries no dipolar content.
    """
    lat = np.asarray(lat_ms, dtype=np.float64)
    v = np.asarray(volumes, dtype=np.float64)
    if lat.shape != v.shape or lat.shape != np.asarray(node_ids).shape:
        raise UserInputError("lat, node_ids and volumes must have matching shapes")
    pre_ms = 4.0 * spec.sigma_w_ms
    need_ms = pre_ms + float(lat.max()) + 5.0 * spec.sigma_w_ms
    window_ms = spec.window_ms if spec.window_ms is not None else need_ms
    if window_ms < need_ms - 1e-9:
        raise UserInputError(
            f"window {window_ms:.1f} ms cannot cover activation spread plus "
            f"waveform support ({need_ms:.1f} ms)"
        )
    dt_ms = 1000.0 / spec.sample_rate_hz
    n = int(math.floor(window_ms / dt_ms)) + 1
    t = np.arange(n) * dt_ms
    f = source_waveform(t[None, :] - (lat[:, None] + pre_ms), spec.sigma_w_ms)
    # Balance: remove the weighted spatial mean at every sample.
    total = v.sum()
    f -= (v @ f)[None, :] / total
    f -= (v @ f)[None, :] / total
    return SourceField(
        values=f,
        sample_rate=spec.sample_rate_hz,
        node_ids=np.asarray(node_ids, dtype=np.int64),
        domain=HEART_VOLUME,
    )


@dataclass(frozen=True)
class GroundTruth:
    """Everything a benchmark case knows about itself."""

    spec: PhantomSpec
    seed_nodes: np.ndarray
    origin_mm: np.ndarray
    lat_true_ms: np.ndarray
    heart_nodes: np.ndarray
    sources: SourceField
    clean: SignalBlock
    noisy: SignalBlock


def degrade_signals(block: SignalBlock, spec: PhantomSpec, noise_seed: int) -> SignalBlock:
    """Measurement-chain surrogate: add noise, then low-pass.

    Gaussian noise at spec.snr_db followed by a Butterworth low-pass,
    the same order of operations an acquisition front end applies.
    """
    noisy = add_gaussian_noise(block, spec.snr_db, noise_seed)
    if spec.noise_lowpass_hz is None:
        return noisy
    filtered = lowpass_array(
        noisy.samples, noisy.sample_rate, spec.noise_lowpass_hz,
        spec.noise_lowpass_order,
    )
    return noisy.with_samples(filtered)


def generate_case(
    spec: PhantomSpec,
    geometry: PhantomGeometry | None = None,
    solver: NeumannSolver | None = None,
    case_index: int = 0,
) -> GroundTruth:
    """Build one benchmark case: truth activation, sources, signals.

    geometry and solver may be shared across cases built from specs
    that differ only in seed class / indices; the per-case randomness
    derives from (spec.seed, case_index).
    """
    if geometry is None:
        geometry = build_geometry(spec)
    mesh = geometry.mesh
    heart = mesh.heart_nodes()
    gen = rng.generator(spec.seed, 0x5EED, case_index)
    candidates = _seed_candidates(spec, geometry, spec.seed_class)
    picks = gen.choice(len(candidates), size=min(spec.n_seeds, len(candidates)),
                       replace=False)
    seeds = np.sort(candidates[np.atleast_1d(picks)])
    lat_true = simulate_activation(mesh, seeds, spec.conduction_m_per_s)
    volumes = lumped_volumes(mesh, region=HEART_REGION)[heart]
    sources = synthesize_sources(lat_true, heart, volumes, spec)
    sigma = FORWARD_SIGMA[spec.forward_sigma]
    if solver is None:
        solver = NeumannSolver(
            assemble_stiffness(mesh, sigma), lumped_volumes(mesh, region=None)
        )
    clean = forward_direct(
        mesh, sigma, sources, geometry.electrode_mesh_nodes, solver=solver
    )
    clean = replace(
        clean, channel_ids=np.arange(spec.n_electrodes, dtype=np.int64)
    )
    noisy = degrade_signals(clean, spec, rng.stream_key(spec.seed, 0x0415E, case_index))
    origin = mesh.vertices[seeds].mean(axis=0)
    return GroundTruth(
        spec=spec,
        seed_nodes=seeds,
        origin_mm=origin,
        lat_true_ms=lat_true,
        heart_nodes=heart,
        sources=sources,
        clean=clean,
        noisy=noisy,
    )


def write_case_dir(truth: GroundTruth, geometry: PhantomGeometry, out_dir: str):
    """Materialize one case as files.

    Layout: mesh.vtk, torso.vtk, electrodes.csv (id,x,y,z),
    bspm_clean.csv, bspm_noisy.csv (+ .meta.toml sidecars),
    truth_lat.vtk (lat_ms point data, NaN outside the heart), spec.toml.
    """
    import os

    from . import configio, vtkio
    from .signals import write_signals_csv

    os.makedirs(out_dir, exist_ok=True)
    mesh = geometry.mesh
    vtkio.write_volume_mesh(os.path.join(out_dir, "mesh.vtk"), mesh)
    vtkio.write_surface_mesh(os.path.join(out_dir, "torso.vtk"), geometry.torso_surface)

    nodes = geometry.electrode_mesh_nodes
    with open(os.path.join(out_dir, "electrodes.csv"), "w") as fh:
        fh.write("id,x,y,z\n")
        for i, node in enumerate(nodes):
            x, y, z = mesh.vertices[node]
            fh.write("%d,%.17g,%.17g,%.17g\n" % (i, x, y, z))

    for name, block in (("bspm_clean", truth.clean), ("bspm_noisy", truth.noisy)):
        write_signals_csv(os.path.join(out_dir, f"{name}.csv"), block)
        meta = {
            "sample_rate_hz": block.sample_rate,
            "time_zero_s": block.time_zero,
            "excluded": [int(c) for c in block.channel_ids[block.excluded]],
            "provenance": f"phantom case, seed {truth.spec.seed}",
        }
        with open(os.path.join(out_dir, f"{name}.meta.toml"), "w") as fh:
            fh.write(configio.emit_toml(meta))

    lat_full = np.full(mesh.n_vertices, np.nan)
    lat_full[truth.heart_nodes] = truth.lat_true_ms
    vtkio.write_volume_mesh(
        os.path.join(out_dir, "truth_lat.vtk"), mesh,
        point_data={"lat_ms": lat_full}, title="true activation times",
    )
    with open(os.path.join(out_dir, "spec.toml"), "w") as fh:
        fh.write(configio.emit_toml(configio.dataclass_to_dict(truth.spec)))
