"""Command-line pipeline: chain smoke, provenance replay, exit codes."""

import numpy as np
import pytest
import tomli

from volecgi import SignalBlock, load_volume_mesh, read_signals_csv, write_signals_csv
from volecgi.cli import main

PHANTOM_ARGS = ["--phantom.pitch-mm", "12.0", "--phantom.n-electrodes", "32"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def case_dir(workdir):
    out = workdir / "case"
    assert main(["phantom", "--out", str(out)] + PHANTOM_ARGS) == 0
    return out


def test_phantom_writes_case(case_dir):
    for name in ("mesh.vtk", "torso.vtk", "electrodes.csv", "bspm_clean.csv",
                 "bspm_noisy.csv", "truth_lat.vtk", "spec.toml", "run.toml"):
        assert (case_dir / name).exists()
    run = tomli.loads((case_dir / "run.toml").read_text())
    assert run["provenance"]["subcommand"] == "phantom"
    assert run["phantom"]["pitch_mm"] == 12.0
    assert run["phantom"]["n_electrodes"] == 32


def test_phantom_rerun_is_byte_identical(case_dir, workdir):
    again = workdir / "case_again"
    assert main(["phantom", "--out", str(again)] + PHANTOM_ARGS) == 0
    for name in ("mesh.vtk", "torso.vtk", "electrodes.csv", "bspm_clean.csv",
                 "bspm_noisy.csv", "bspm_noisy.meta.toml", "truth_lat.vtk",
                 "spec.toml"):
        assert (again / name).read_bytes() == (case_dir / name).read_bytes(), name
    # run.toml carries wall-clock timings and is allowed to differ


def test_phantom_seed_flag_changes_signals(case_dir, workdir):
    other = workdir / "case_seed9"
    assert main(["phantom", "--out", str(other), "--seed", "9"] + PHANTOM_ARGS) == 0
    assert (other / "bspm_noisy.csv").read_bytes() != (case_dir / "bspm_noisy.csv").read_bytes()


@pytest.fixture(scope="module")
def pre_dir(case_dir, workdir):
    out = workdir / "pre"
    code = main([
        "preprocess", "--signals", str(case_dir / "bspm_noisy.csv"),
        "--out", str(out),
    ])
    assert code == 0
    return out


def test_preprocess_outputs(pre_dir):
    block = read_signals_csv(str(pre_dir / "preprocessed.csv"))
    assert block.samples.shape[0] == 32
    assert block.sample_rate == pytest.approx(500.0)
    # common reference applied downstream leaves the block usable as-is
    meta = tomli.loads((pre_dir / "preprocessed.meta.toml").read_text())
    assert meta["sample_rate_hz"] == pytest.approx(500.0)


def test_run_toml_replays_bitwise(pre_dir, workdir):
    replay = workdir / "pre_replay"
    code = main([
        "preprocess", "--config", str(pre_dir / "run.toml"), "--out", str(replay),
    ])
    assert code == 0
    assert (replay / "preprocessed.csv").read_bytes() == (
        pre_dir / "preprocessed.csv"
    ).read_bytes()


@pytest.fixture(scope="module")
def toy_sources(case_dir, workdir):
    from volecgi import HEART_REGION, lumped_volumes

    mesh = load_volume_mesh(str(case_dir / "mesh.vtk"))
    heart = mesh.heart_nodes()
    rng = np.random.default_rng(12)
    values = rng.normal(size=(len(heart), 5))
    # forward solves require volume-balanced sources (m^T f = 0)
    m = lumped_volumes(mesh, region=HEART_REGION)[heart]
    values -= np.outer(m, m @ values) / (m @ m)
    path = workdir / "toy_sources.csv"
    write_signals_csv(str(path), SignalBlock(
        samples=values, sample_rate=500.0, channel_ids=heart,
    ))
    return path


@pytest.fixture(scope="module")
def forward_runs(case_dir, workdir, toy_sources):
    direct = workdir / "fwd_direct"
    operator = workdir / "fwd_operator"
    cache = workdir / "vol.op"
    base = [
        "forward-vol", "--mesh", str(case_dir / "mesh.vtk"),
        "--sources", str(toy_sources),
        "--electrodes", str(case_dir / "electrodes.csv"),
    ]
    assert main(base + ["--out", str(direct), "--method", "direct"]) == 0
    assert main(base + [
        "--out", str(operator), "--method", "operator",
        "--operator-cache", str(cache),
    ]) == 0
    return direct, operator, cache


def test_forward_vol_direct_matches_operator(forward_runs):
    direct, operator, _ = forward_runs
    a = read_signals_csv(str(direct / "electrodes.csv"))
    b = read_signals_csv(str(operator / "electrodes.csv"))
    scale = np.abs(a.samples).max()
    assert np.abs(a.samples - b.samples).max() <= 1e-8 * scale


def test_forward_vol_reuses_cache(forward_runs, case_dir, toy_sources, workdir):
    _, operator, cache = forward_runs
    assert cache.exists()
    rerun = workdir / "fwd_cached"
    code = main([
        "forward-vol", "--mesh", str(case_dir / "mesh.vtk"),
        "--sources", str(toy_sources),
        "--electrodes", str(case_dir / "electrodes.csv"),
        "--out", str(rerun), "--method", "operator",
        "--operator-cache", str(cache),
    ])
    assert code == 0
    assert (rerun / "electrodes.csv").read_bytes() == (
        operator / "electrodes.csv"
    ).read_bytes()
    run = tomli.loads((rerun / "run.toml").read_text())
    assert str(cache) in run["provenance"]["inputs"]


@pytest.fixture(scope="module")
def invert_dir(pre_dir, forward_runs, workdir):
    _, _, cache = forward_runs
    out = workdir / "inv"
    code = main([
        "invert", "--operator", str(cache),
        "--signals", str(pre_dir / "preprocessed.csv"),
        "--out", str(out),
    ])
    assert code == 0
    return out


def test_invert_outputs(invert_dir):
    sol = tomli.loads((invert_dir / "solution.toml").read_text())
    assert sol["lambda"] > 0
    assert sol["domain"] == "heart-volume"
    assert (invert_dir / "lcurve.csv").read_text().startswith("lambda,rho,eta,curvature")
    sources = read_signals_csv(str(invert_dir / "sources.csv"))
    assert sources.samples.shape[1] > 0


def test_invert_dims_mismatch_exits_1(forward_runs, workdir, capsys):
    _, _, cache = forward_runs
    short = workdir / "short.csv"
    write_signals_csv(str(short), SignalBlock(
        samples=np.random.default_rng(0).normal(size=(5, 40)),
        sample_rate=500.0, channel_ids=np.arange(5),
    ))
    code = main([
        "invert", "--operator", str(cache), "--signals", str(short),
        "--out", str(workdir / "inv_bad"),
    ])
    assert code == 1
    err = capsys.readouterr().err
    assert "error:" in err
    assert "32 rows but data has 5 channels" in err


@pytest.fixture(scope="module")
def lat_dir(invert_dir, case_dir, workdir):
    out = workdir / "lat"
    code = main([
        "lat", "--sources", str(invert_dir / "sources.csv"),
        "--mesh", str(case_dir / "mesh.vtk"), "--out", str(out),
    ])
    assert code == 0
    return out


def test_lat_outputs(lat_dir, case_dir):
    text = (lat_dir / "lat.csv").read_text()
    assert text.startswith("node_id,lat_ms,valid")
    mesh = load_volume_mesh(str(case_dir / "mesh.vtk"))
    rows = text.strip().split("\n")[1:]
    assert len(rows) == len(mesh.heart_nodes())
    assert (lat_dir / "lat.vtk").exists()


def test_lat_flat_sources_exit_2(workdir, capsys):
    flat = workdir / "flat.csv"
    write_signals_csv(str(flat), SignalBlock(
        samples=np.zeros((4, 50)), sample_rate=500.0, channel_ids=np.arange(4),
    ))
    code = main(["lat", "--sources", str(flat), "--out", str(workdir / "lat_flat")])
    assert code == 2
    assert "numerical failure:" in capsys.readouterr().err


def test_localize_finds_origin_inside_heart(lat_dir, case_dir, workdir):
    out = workdir / "loc"
    code = main([
        "localize", "--lat", str(lat_dir / "lat.csv"),
        "--mesh", str(case_dir / "mesh.vtk"), "--out", str(out),
    ])
    assert code == 0
    origin = tomli.loads((out / "origin.toml").read_text())
    mesh = load_volume_mesh(str(case_dir / "mesh.vtk"))
    pts = mesh.vertices[mesh.heart_nodes()]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    assert np.all(origin["origin_mm"] >= lo - 1e-9)
    assert np.all(origin["origin_mm"] <= hi + 1e-9)
    assert origin["tat_ms"] > 0
    assert origin["n_valid"] > 0


def test_localize_requires_one_geometry(lat_dir, workdir):
    assert main([
        "localize", "--lat", str(lat_dir / "lat.csv"),
        "--out", str(workdir / "loc_bad"),
    ]) == 1


def test_metrics_reports_segments(lat_dir, case_dir, workdir):
    mesh = load_volume_mesh(str(case_dir / "mesh.vtk"))
    pts = mesh.vertices[mesh.heart_nodes()]
    centre = pts.mean(axis=0)
    apex = pts[np.argmin(pts[:, 2])]
    base = centre + np.array([0.0, 0.0, pts[:, 2].max() - centre[2]])
    rv = centre + np.array([0.0, 40.0, 0.0])
    out = workdir / "metrics"
    code = main([
        "metrics", "--lat", str(lat_dir / "lat.csv"),
        "--mesh", str(case_dir / "mesh.vtk"), "--out", str(out),
        "--apex", "[%g, %g, %g]" % tuple(apex),
        "--base", "[%g, %g, %g]" % tuple(base),
        "--rv", "[%g, %g, %g]" % tuple(rv),
        "--reference-segments", "[1, 2]",
    ])
    assert code == 0
    rep = tomli.loads((out / "infarct.toml").read_text())
    assert rep["threshold_ms"] == 40.0
    assert set(rep["segment_spread_ms"]) <= {str(s) for s in range(1, 18)}
    text = (out / "infarct.txt").read_text()
    assert "segment  spread_ms  flagged" in text
    assert "context: public post-MI case 3" in text


def test_metrics_requires_landmarks(lat_dir, case_dir, workdir, capsys):
    code = main([
        "metrics", "--lat", str(lat_dir / "lat.csv"),
        "--mesh", str(case_dir / "mesh.vtk"),
        "--out", str(workdir / "metrics_bad"),
    ])
    assert code == 1
    assert "landmark" in capsys.readouterr().err


def test_bench_cli_tiny_suite(workdir):
    out = workdir / "bench"
    code = main([
        "bench", "--out", str(out), "--workers", "2",
        "--suite.phantom.pitch-mm", "12.0",
        "--suite.phantom.n-electrodes", "32",
        "--suite.cases-base-rim", "1",
        "--suite.cases-inner-wall", "0",
        "--suite.cases-outer-wall", "0",
    ])
    assert code == 0
    csv_text = (out / "report.csv").read_text()
    assert csv_text.startswith("case,seed_class,method,status")
    assert csv_text.count("\n") == 3  # header + 1 case x 2 methods
    run = tomli.loads((out / "run.toml").read_text())
    assert run["suite"]["workers"] == 2
    assert run["provenance"]["subcommand"] == "bench"


def test_error_paths(workdir, capsys):
    # missing required key
    assert main(["preprocess", "--out", str(workdir / "e1")]) == 1
    assert "config key 'signals' is required" in capsys.readouterr().err
    # unknown override key
    assert main([
        "preprocess", "--signals", "x.csv", "--pitch", "3",
        "--out", str(workdir / "e2"),
    ]) == 1
    assert "unknown key" in capsys.readouterr().err
    # bad forward method
    assert main([
        "forward-vol", "--mesh", "m.vtk", "--sources", "s.csv",
        "--electrodes", "e.csv", "--method", "magic",
        "--out", str(workdir / "e3"),
    ]) == 1
    assert "'direct' or 'operator'" in capsys.readouterr().err
    # missing value and stray token
    assert main(["preprocess", "--signals"]) == 1
    assert "missing its value" in capsys.readouterr().err
    assert main(["preprocess", "stray"]) == 1
    assert "unexpected argument" in capsys.readouterr().err
    # no subcommand at all
    assert main([]) == 1
    assert "subcommand" in capsys.readouterr().err
