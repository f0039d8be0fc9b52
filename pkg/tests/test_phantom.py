"""Phantom construction, truth activation, signal degradation."""

from dataclasses import replace

import numpy as np
import pytest

from volecgi import (
    HEART_REGION,
    HEART_VOLUME,
    NumericalError,
    PhantomSpec,
    TetMesh,
    UserInputError,
    build_geometry,
    generate_case,
    lumped_volumes,
    simulate_activation,
    source_waveform,
    synthesize_sources,
    write_case_dir,
)
from volecgi.phantom import SEED_CLASSES, _seed_candidates, degrade_signals


def test_default_geometry_sizes():
    geo = build_geometry(PhantomSpec())
    heart = geo.mesh.heart_nodes()
    assert 1500 <= len(heart) <= 6000
    bbox = geo.mesh.vertices[heart]
    diag = np.linalg.norm(bbox.max(axis=0) - bbox.min(axis=0))
    assert 150.0 <= diag <= 220.0
    labels = geo.torso_surface.point_labels
    assert (labels >= 0).sum() == 128
    # electrodes sit on the torso surface and map to real mesh nodes
    assert np.array_equal(
        np.sort(labels[geo.electrode_surface_vertices]), np.arange(128)
    )


def test_pitch_refinement_grows_mesh(small_spec, small_geometry):
    finer = build_geometry(replace(small_spec, pitch_mm=9.0))
    assert finer.mesh.n_vertices > small_geometry.mesh.n_vertices
    assert len(finer.mesh.heart_nodes()) > len(small_geometry.mesh.heart_nodes())


def test_geometry_is_deterministic(small_spec, small_geometry):
    again = build_geometry(small_spec)
    assert np.array_equal(again.mesh.vertices, small_geometry.mesh.vertices)
    assert np.array_equal(again.mesh.tets, small_geometry.mesh.tets)
    assert np.array_equal(
        again.electrode_mesh_nodes, small_geometry.electrode_mesh_nodes
    )


def test_seed_classes_partition_surface(small_spec, small_geometry):
    sets = [
        set(_seed_candidates(small_spec, small_geometry, cls).tolist())
        for cls in SEED_CLASSES
    ]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not (sets[i] & sets[j])
    for s in sets:
        assert s  # every class has candidates on the small phantom


def test_conduction_velocity_scales_times(small_geometry):
    mesh = small_geometry.mesh
    seed = mesh.heart_nodes()[:1]
    slow = simulate_activation(mesh, seed, 0.5)
    fast = simulate_activation(mesh, seed, 1.0)
    # velocity doubling exactly halves every time (one float division)
    assert np.array_equal(slow, 2.0 * fast)
    assert slow.min() == 0.0


def test_activation_rejects_disconnected_region():
    verts = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
        [5.0, 5.0, 5.0], [6.0, 5.0, 5.0], [5.0, 6.0, 5.0], [5.0, 5.0, 6.0],
    ])
    tets = np.array([[0, 1, 2, 3], [4, 5, 6, 7]])
    mesh = TetMesh(vertices=verts, tets=tets,
                   region=np.full(2, HEART_REGION, dtype=np.int64))
    with pytest.raises(NumericalError, match="disconnected"):
        simulate_activation(mesh, np.array([0]), 0.7)


def test_activation_validation(small_geometry):
    mesh = small_geometry.mesh
    not_heart = np.setdiff1d(np.arange(mesh.n_vertices), mesh.heart_nodes())[:1]
    with pytest.raises(UserInputError, match="heart nodes"):
        simulate_activation(mesh, not_heart, 0.7)
    with pytest.raises(UserInputError, match="velocity"):
        simulate_activation(mesh, mesh.heart_nodes()[:1], 0.0)


def test_waveform_shape():
    sigma = 8.0
    tau = np.linspace(-40.0, 40.0, 20001)
    u = source_waveform(tau, sigma)
    # peak amplitude 1 exactly at tau = sigma, antisymmetric
    assert source_waveform(np.array([sigma]), sigma)[0] == 1.0
    assert abs(u).max() <= 1.0 + 1e-12
    assert np.allclose(source_waveform(-tau, sigma), -u)  # odd pulse
    # steepest rise at tau = 0
    slope = np.gradient(u, tau)
    assert abs(tau[np.argmax(slope)]) <= tau[1] - tau[0]
    assert source_waveform(np.array([0.0]), sigma)[0] == 0.0


def test_sources_balanced_and_windowed(small_spec, small_geometry):
    mesh = small_geometry.mesh
    heart = mesh.heart_nodes()
    lat = simulate_activation(mesh, heart[:1], small_spec.conduction_m_per_s)
    volumes = lumped_volumes(mesh, region=HEART_REGION)[heart]
    field = synthesize_sources(lat, heart, volumes, small_spec)
    assert field.domain == HEART_VOLUME
    scale = np.abs(field.values).max()
    assert np.abs(volumes @ field.values).max() <= 1e-12 * scale * volumes.sum()
    # window covers 4 sigma of lead-in plus the last activation + 5 sigma
    need_ms = 9.0 * small_spec.sigma_w_ms + lat.max()
    assert field.n_samples >= need_ms / 1000.0 * small_spec.sample_rate_hz
    with pytest.raises(UserInputError, match="cannot cover"):
        synthesize_sources(lat, heart, volumes, replace(small_spec, window_ms=10.0))


def test_degrade_deterministic_and_seed_sensitive(small_truth, small_spec):
    a = degrade_signals(small_truth.clean, small_spec, 7)
    b = degrade_signals(small_truth.clean, small_spec, 7)
    c = degrade_signals(small_truth.clean, small_spec, 8)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_generate_case_consistency(small_truth, small_spec, small_geometry):
    t = small_truth
    assert np.array_equal(t.heart_nodes, small_geometry.mesh.heart_nodes())
    assert len(t.lat_true_ms) == len(t.heart_nodes)
    assert np.all(np.isin(t.seed_nodes, t.heart_nodes))
    assert t.lat_true_ms.min() == 0.0
    assert t.origin_mm == pytest.approx(
        small_geometry.mesh.vertices[t.seed_nodes].mean(axis=0)
    )
    assert t.clean.samples.shape == (small_spec.n_electrodes, t.sources.n_samples)
    assert t.noisy.samples.shape == t.clean.samples.shape
    assert not np.array_equal(t.noisy.samples, t.clean.samples)
    # rerun from scratch is bit-identical
    again = generate_case(small_spec, geometry=small_geometry, case_index=0)
    assert np.array_equal(again.noisy.samples, t.noisy.samples)
    assert np.array_equal(again.seed_nodes, t.seed_nodes)
    # a different case index picks different seeds or noise
    other = generate_case(small_spec, geometry=small_geometry, case_index=1)
    assert (not np.array_equal(other.seed_nodes, t.seed_nodes)) or (
        not np.array_equal(other.noisy.samples, t.noisy.samples)
    )


def test_seed_class_steers_candidates(small_spec, small_geometry):
    picks = {}
    for cls in SEED_CLASSES:
        spec = replace(small_spec, seed_class=cls)
        truth = generate_case(spec, geometry=small_geometry, case_index=0)
        cand = _seed_candidates(spec, small_geometry, cls)
        assert np.all(np.isin(truth.seed_nodes, cand))
        picks[cls] = truth.seed_nodes
    assert len({tuple(v.tolist()) for v in picks.values()}) == 3


def test_spec_validation():
    with pytest.raises(UserInputError, match="pitch"):
        PhantomSpec(pitch_mm=0.0)
    with pytest.raises(UserInputError, match="wall"):
        PhantomSpec(wall_mm=60.0)
    with pytest.raises(UserInputError, match="seed_class"):
        PhantomSpec(seed_class="septal")
    with pytest.raises(UserInputError, match="electrodes"):
        PhantomSpec(n_electrodes=1)
    with pytest.raises(UserInputError, match="forward_sigma"):
        PhantomSpec(forward_sigma="exotic")
    with pytest.raises(UserInputError, match="heart shell"):
        build_geometry(PhantomSpec(pitch_mm=900.0))


def test_write_case_dir(tmp_path, small_truth, small_geometry):
    out = tmp_path / "case0"
    write_case_dir(small_truth, small_geometry, str(out))
    names = {p.name for p in out.iterdir()}
    assert names >= {
        "mesh.vtk", "torso.vtk", "electrodes.csv", "bspm_clean.csv",
        "bspm_noisy.csv", "bspm_clean.meta.toml", "bspm_noisy.meta.toml",
        "truth_lat.vtk", "spec.toml",
    }
    rows = (out / "electrodes.csv").read_text().strip().split("\n")
    assert rows[0] == "id,x,y,z"
    assert len(rows) == 1 + 32
    from volecgi import read_vtk
    raw = read_vtk(str(out / "truth_lat.vtk"))
    lat = raw["point_data"]["lat_ms"]
    heart = small_geometry.mesh.heart_nodes()
    assert np.array_equal(lat[heart], small_truth.lat_true_ms)
    outside = np.setdiff1d(np.arange(len(raw["points"])), heart)
    assert np.all(np.isnan(lat[outside]))
