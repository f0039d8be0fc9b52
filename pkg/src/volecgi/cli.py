"""Command-line entry point.

Every subcommand reads a TOML config (optional), applies `--key value`
overrides, runs one pipeline stage, and writes its artifacts plus a
`run.toml` provenance record into the output directory.  run.toml
echoes the fully resolved configuration (defaults included) next to a
[provenance] table, so passing it back via --config replays the run.

Exit codes: 0 success, 1 user/configuration error, 2 numerical failure.
Log verbosity comes from the VOLECGI_LOG environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import configio, opcache, vtkio
from .activation import (
    PUBLISHED_INFARCT_CONTEXT,
    LatParams,
    earliest_site,
    infarct_metrics,
    infarct_table,
    lat_map,
    read_lat_csv,
    report_dict,
    total_activation_time,
    write_lat_csv,
)
from .bem import EpicardialOperator, assemble_epicardial, forward_epicardial
from .bench import SuiteConfig, run_benchmark
from .errors import NumericalError, UserInputError
from .fem import (
    ConductivityMap,
    assemble_volumetric,
    forward_direct,
    forward_volumetric,
)
from .fields import EPICARDIAL_SURFACE, HEART_VOLUME, SourceField
from .geometry import (
    HEART_REGION,
    aha17_segments,
    lumped_volumes,
    mesh_content_hash,
    nearest_vertex,
)
from .inversion import (
    RegularizationParams,
    constrained_tikhonov,
    tikhonov,
    write_lcurve_csv,
)
from .phantom import PhantomSpec, build_geometry, generate_case, write_case_dir
from .signals import (
    FilterSpec,
    SignalBlock,
    common_reference,
    preprocess,
    read_signals_csv,
    write_signals_csv,
)

from . import __version__

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as user errors (exit 1)."""

    def error(self, message):
        raise UserInputError(message)


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class PhantomConfig:
    out: str = "phantom_case"
    case_index: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


@dataclass(frozen=True)
class PreprocessConfig:
    signals: str = ""
    out: str = "preprocessed"
    sample_rate_hz: float | None = None
    excluded: tuple = ()
    filter: FilterSpec = field(default_factory=FilterSpec)


@dataclass(frozen=True)
class ForwardEpiConfig:
    torso: str = ""
    heart: str = ""
    sources: str = ""
    out: str = "forward_epi"
    sample_rate_hz: float | None = None
    operator_cache: str | None = None


@dataclass(frozen=True)
class ForwardVolConfig:
    mesh: str = ""
    sources: str = ""
    electrodes: str = ""
    out: str = "forward_vol"
    sample_rate_hz: float | None = None
    method: str = "direct"
    sigma: float = 1.0
    sigma_regions: dict | None = None
    operator_cache: str | None = None


@dataclass(frozen=True)
class InvertConfig:
    operator: str = ""
    signals: str = ""
    out: str = "inversion"
    sample_rate_hz: float | None = None
    excluded: tuple = ()
    regularization: RegularizationParams = field(default_factory=RegularizationParams)


@dataclass(frozen=True)
class LatConfig:
    sources: str = ""
    out: str = "lat"
    domain: str = HEART_VOLUME
    sample_rate_hz: float | None = None
    mesh: str | None = None
    surface: str | None = None
    lat: LatParams = field(default_factory=LatParams)


@dataclass(frozen=True)
class LocalizeConfig:
    lat: str = ""
    out: str = "localize"
    mesh: str | None = None
    surface: str | None = None
    percentile: float = 10.0


@dataclass(frozen=True)
class MetricsConfig:
    lat: str = ""
    mesh: str = ""
    out: str = "metrics"
    threshold_ms: float = 40.0
    overlap: str = "jaccard"
    reference_segments: tuple = ()
    apex: tuple = ()
    base: tuple = ()
    rv: tuple = ()
    context: bool = True


@dataclass(frozen=True)
class BenchRunConfig:
    out: str = "bench_report"
    suite: SuiteConfig = field(default_factory=SuiteConfig)


# ---------------------------------------------------------------- plumbing

def _load_config(ns) -> dict:
    if getattr(ns, "config", None):
        data = configio.load_toml(ns.config)
        data.pop("provenance", None)  # replaying a run.toml
        return data
    return {}


def _pair_overrides(extra: list) -> list:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UserInputError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, text = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UserInputError(f"override {tok!r} is missing its value")
            key, text = body, extra[i + 1]
            i += 2
        if not key:
            raise UserInputError(f"malformed override {tok!r}")
        pairs.append((key, configio.parse_scalar(text)))
    return pairs


def _resolve(cls, ns, extra, flag_paths: dict) -> object:
    data = _load_config(ns)
    for flag, path in flag_paths.items():
        value = getattr(ns, flag, None)
        if value is not None:
            configio.apply_override(data, ".".join(path), value)
    for key, value in _pair_overrides(extra):
        configio.apply_override(data, key, value)
    return configio.coerce_dataclass(cls, data, "config")


def _require(cfg, field_name: str, what: str) -> str:
    value = getattr(cfg, field_name)
    if not value:
        raise UserInputError(
            f"config key {field_name!r} is required: {what} "
            f"(set it in the TOML file or with --{field_name} <value>)"
        )
    return value


def _write_run_toml(out_dir: str, subcommand: str, cfg, inputs: list, timings: dict):
    resolved = configio.dataclass_to_dict(cfg)
    prov = {
        "tool": "volecgi %s" % __version__,
        "subcommand": subcommand,
        "config_sha256": configio.config_hash(resolved),
        "versions": {
            "python": "%d.%d.%d" % sys.version_info[:3],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {path: configio.file_hash(path) for path in sorted(set(inputs))},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    doc = dict(resolved)
    doc["provenance"] = prov
    with open(os.path.join(out_dir, "run.toml"), "w") as fh:
        fh.write(configio.emit_toml(doc))


def _read_signals(path: str, sample_rate=None, excluded=()) -> tuple[SignalBlock, list]:
    used = [path]
    excluded = list(excluded)
    sidecar = os.path.splitext(path)[0] + ".meta.toml"
    if os.path.exists(sidecar):
        meta = configio.load_toml(sidecar)
        if sample_rate is None:
            sample_rate = meta.get("sample_rate_hz")
        excluded += [int(c) for c in meta.get("excluded", [])]
        used.append(sidecar)
    block = read_signals_csv(path, sample_rate=sample_rate, excluded_ids=excluded)
    return block, used


def _write_signals(out_dir: str, name: str, block: SignalBlock, provenance: str):
    write_signals_csv(os.path.join(out_dir, f"{name}.csv"), block)
    meta = {
        "sample_rate_hz": block.sample_rate,
        "time_zero_s": block.time_zero,
        "excluded": [int(c) for c in block.channel_ids[block.excluded]],
        "provenance": provenance,
    }
    with open(os.path.join(out_dir, f"{name}.meta.toml"), "w") as fh:
        fh.write(configio.emit_toml(meta))


def _read_sources(path: str, domain: str, sample_rate=None) -> tuple[SourceField, list]:
    block, used = _read_signals(path, sample_rate=sample_rate)
    return (
        SourceField(
            values=block.samples,
            sample_rate=block.sample_rate,
            node_ids=block.channel_ids,
            domain=domain,
            time_zero=block.time_zero,
        ),
        used,
    )


def _write_sources(path: str, fld: SourceField):
    write_signals_csv(
        path,
        SignalBlock(
            samples=fld.values,
            sample_rate=fld.sample_rate,
            channel_ids=fld.node_ids,
            time_zero=fld.time_zero,
        ),
    )


def _read_electrodes_csv(path: str) -> np.ndarray:
    import csv as _csv

    try:
        with open(path, newline="") as fh:
            rows = list(_csv.DictReader(fh))
    except OSError as exc:
        raise UserInputError(f"cannot read {path}: {exc}")
    try:
        pts = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    except (KeyError, TypeError, ValueError) as exc:
        raise UserInputError(f"{path} is not an id,x,y,z electrode table: {exc}")
    if len(pts) == 0:
        raise UserInputError(f"{path} lists no electrodes")
    return pts


def _conductivity(cfg: ForwardVolConfig) -> ConductivityMap:
    if cfg.sigma_regions is not None:
        values = {}
        for key, val in cfg.sigma_regions.items():
            label = None if key == "default" else int(key)
            values[label] = float(val)
        return ConductivityMap(values)
    return ConductivityMap.homogeneous(cfg.sigma)


# ---------------------------------------------------------------- commands

def _cmd_phantom(ns, extra) -> None:
    cfg = _resolve(PhantomConfig, ns, extra, {"out": ["out"], "seed": ["phantom", "seed"]})
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    geometry = build_geometry(cfg.phantom)
    truth = generate_case(cfg.phantom, geometry=geometry, case_index=cfg.case_index)
    write_case_dir(truth, geometry, cfg.out)
    _write_run_toml(cfg.out, "phantom", cfg, [], {"total": time.time() - t0})


def _cmd_preprocess(ns, extra) -> None:
    cfg = _resolve(PreprocessConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "signals", "path to the raw signal CSV")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    block, used = _read_signals(cfg.signals, cfg.sample_rate_hz, cfg.excluded)
    out = preprocess(block, cfg.filter)
    _write_signals(cfg.out, "preprocessed", out, f"preprocess of {cfg.signals}")
    _write_run_toml(cfg.out, "preprocess", cfg, used, {"total": time.time() - t0})


def _cmd_forward_epi(ns, extra) -> None:
    cfg = _resolve(ForwardEpiConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "torso", "closed torso surface (VTK)")
    _require(cfg, "heart", "closed heart surface (VTK)")
    _require(cfg, "sources", "epicardial potentials CSV")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    torso = vtkio.load_surface_mesh(cfg.torso)
    heart = vtkio.load_surface_mesh(cfg.heart)
    fld, used = _read_sources(cfg.sources, EPICARDIAL_SURFACE, cfg.sample_rate_hz)
    used += [cfg.torso, cfg.heart]
    cache = cfg.operator_cache
    if cache and os.path.exists(cache):
        op = opcache.read_operator(
            cache,
            torso_hash=mesh_content_hash(torso),
            heart_hash=mesh_content_hash(heart),
        )
        used.append(cache)
    else:
        op = assemble_epicardial(torso, heart)
        if cache:
            opcache.write_operator(cache, op)
    block = forward_epicardial(op, fld)
    _write_signals(cfg.out, "electrodes", block, f"epicardial forward of {cfg.sources}")
    _write_run_toml(cfg.out, "forward-epi", cfg, used, {"total": time.time() - t0})


def _cmd_forward_vol(ns, extra) -> None:
    cfg = _resolve(ForwardVolConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "mesh", "tetrahedral volume mesh (VTK)")
    _require(cfg, "sources", "heart-node sources CSV")
    _require(cfg, "electrodes", "electrode coordinates CSV")
    if cfg.method not in ("direct", "operator"):
        raise UserInputError(
            f"method must be 'direct' or 'operator', got {cfg.method!r}"
        )
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    mesh = vtkio.load_volume_mesh(cfg.mesh)
    fld, used = _read_sources(cfg.sources, HEART_VOLUME, cfg.sample_rate_hz)
    pts = _read_electrodes_csv(cfg.electrodes)
    nodes = np.array([nearest_vertex(mesh.vertices, p) for p in pts], dtype=np.int64)
    used += [cfg.mesh, cfg.electrodes]
    sigma = _conductivity(cfg)
    if cfg.method == "direct":
        block = forward_direct(mesh, sigma, fld, nodes)
    else:
        cache = cfg.operator_cache
        if cache and os.path.exists(cache):
            op = opcache.read_operator(cache, mesh_hash=mesh_content_hash(mesh))
            used.append(cache)
        else:
            op = assemble_volumetric(mesh, sigma, nodes)
            if cache:
                opcache.write_operator(cache, op)
        block = forward_volumetric(op, fld)
    _write_signals(cfg.out, "electrodes", block, f"volumetric forward of {cfg.sources}")
    _write_run_toml(cfg.out, "forward-vol", cfg, used, {"total": time.time() - t0})


def _cmd_invert(ns, extra) -> None:
    cfg = _resolve(InvertConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "operator", "cached transfer operator")
    _require(cfg, "signals", "measured signal CSV")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    op = opcache.read_operator(cfg.operator)
    block, used = _read_signals(cfg.signals, cfg.sample_rate_hz, cfg.excluded)
    used.append(cfg.operator)
    g = common_reference(block)
    if isinstance(op, EpicardialOperator):
        sol = tikhonov(op, g, cfg.regularization)
    else:
        sol = constrained_tikhonov(op, g, cfg.regularization)
    _write_sources(os.path.join(cfg.out, "sources.csv"), sol.solution)
    if sol.curve is not None:
        write_lcurve_csv(os.path.join(cfg.out, "lcurve.csv"), sol.curve)
    summary = {
        "lambda": sol.lam,
        "rho": sol.rho,
        "eta": sol.eta,
        "domain": sol.solution.domain,
    }
    if sol.curve is not None:
        summary["corner_at_boundary"] = sol.curve.corner_at_boundary
        summary["degenerate"] = sol.curve.degenerate
    with open(os.path.join(cfg.out, "solution.toml"), "w") as fh:
        fh.write(configio.emit_toml(summary))
    _write_run_toml(cfg.out, "invert", cfg, used, {"total": time.time() - t0})


def _cmd_lat(ns, extra) -> None:
    cfg = _resolve(LatConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "sources", "reconstructed sources CSV")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    fld, used = _read_sources(cfg.sources, cfg.domain, cfg.sample_rate_hz)
    lat = lat_map(fld, cfg.lat)
    write_lat_csv(os.path.join(cfg.out, "lat.csv"), lat)
    if cfg.mesh:
        mesh = vtkio.load_volume_mesh(cfg.mesh)
        used.append(cfg.mesh)
        full = np.full(mesh.n_vertices, np.nan)
        full[lat.node_ids[lat.valid]] = lat.lat_ms[lat.valid]
        vtkio.write_volume_mesh(
            os.path.join(cfg.out, "lat.vtk"), mesh,
            point_data={"lat_ms": full}, title="activation times",
        )
    elif cfg.surface:
        surf = vtkio.load_surface_mesh(cfg.surface)
        used.append(cfg.surface)
        full = np.full(surf.n_vertices, np.nan)
        full[lat.node_ids[lat.valid]] = lat.lat_ms[lat.valid]
        vtkio.write_surface_mesh(
            os.path.join(cfg.out, "lat.vtk"), surf,
            point_data={"lat_ms": full}, title="activation times",
        )
    _write_run_toml(cfg.out, "lat", cfg, used, {"total": time.time() - t0})


def _cmd_localize(ns, extra) -> None:
    cfg = _resolve(LocalizeConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "lat", "activation table CSV")
    if bool(cfg.mesh) == bool(cfg.surface):
        raise UserInputError("provide exactly one of 'mesh' (volume) or 'surface'")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    if cfg.mesh:
        vertices = vtkio.load_volume_mesh(cfg.mesh).vertices
        domain, geom_path = HEART_VOLUME, cfg.mesh
    else:
        vertices = vtkio.load_surface_mesh(cfg.surface).vertices
        domain, geom_path = EPICARDIAL_SURFACE, cfg.surface
    lat = read_lat_csv(cfg.lat, domain)
    origin = earliest_site(lat, vertices, cfg.percentile)
    result = {
        "origin_mm": [float(v) for v in origin],
        "percentile": cfg.percentile,
        "tat_ms": total_activation_time(lat),
        "n_valid": int(np.count_nonzero(lat.valid)),
        "domain": domain,
    }
    with open(os.path.join(cfg.out, "origin.toml"), "w") as fh:
        fh.write(configio.emit_toml(result))
    _write_run_toml(
        cfg.out, "localize", cfg, [cfg.lat, geom_path], {"total": time.time() - t0}
    )


def _cmd_metrics(ns, extra) -> None:
    cfg = _resolve(MetricsConfig, ns, extra, {"out": ["out"]})
    _require(cfg, "lat", "activation table CSV")
    _require(cfg, "mesh", "tetrahedral volume mesh (VTK)")
    for name in ("apex", "base", "rv"):
        if len(getattr(cfg, name)) != 3:
            raise UserInputError(
                f"landmark {name!r} must be [x, y, z]; segment geometry "
                "cannot be inferred from the mesh alone"
            )
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    mesh = vtkio.load_volume_mesh(cfg.mesh)
    lat = read_lat_csv(cfg.lat, HEART_VOLUME)
    segs = aha17_segments(mesh, cfg.apex, cfg.base, cfg.rv)
    volumes = lumped_volumes(mesh, region=HEART_REGION)
    report = infarct_metrics(
        lat, segs, mesh, volumes,
        reference_segments=cfg.reference_segments,
        threshold_ms=cfg.threshold_ms,
        overlap_formula=cfg.overlap,
    )
    with open(os.path.join(cfg.out, "infarct.toml"), "w") as fh:
        fh.write(configio.emit_toml(report_dict(report)))
    context = PUBLISHED_INFARCT_CONTEXT if cfg.context else None
    with open(os.path.join(cfg.out, "infarct.txt"), "w") as fh:
        fh.write(infarct_table(report, context_rows=context))
    _write_run_toml(
        cfg.out, "metrics", cfg, [cfg.lat, cfg.mesh], {"total": time.time() - t0}
    )


def _cmd_bench(ns, extra) -> None:
    cfg = _resolve(
        BenchRunConfig, ns, extra,
        {
            "out": ["out"],
            "seed": ["suite", "phantom", "seed"],
            "workers": ["suite", "workers"],
        },
    )
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    report = run_benchmark(cfg.suite, out_dir=cfg.out)
    timings = dict(report.timings)
    timings["total"] = time.time() - t0
    _write_run_toml(cfg.out, "bench", cfg, [], timings)


_COMMANDS = {
    "phantom": (_cmd_phantom, "generate a synthetic phantom case directory"),
    "preprocess": (_cmd_preprocess, "condition raw electrode signals"),
    "forward-epi": (_cmd_forward_epi, "epicardial-potential forward solve"),
    "forward-vol": (_cmd_forward_vol, "volumetric-source forward solve"),
    "invert": (_cmd_invert, "regularized inverse reconstruction"),
    "lat": (_cmd_lat, "activation times from reconstructed sources"),
    "localize": (_cmd_localize, "earliest-activation origin estimate"),
    "metrics": (_cmd_metrics, "late-activation segment metrics"),
    "bench": (_cmd_bench, "paired-method phantom benchmark"),
}


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="volecgi",
        description="volumetric ECG imaging pipeline",
    )
    parser.add_argument("--version", action="version", version=f"volecgi {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--out", help="output directory")
        if name in ("phantom", "bench"):
            p.add_argument("--seed", type=int, help="master seed")
        if name == "bench":
            p.add_argument("--workers", type=int, help="parallel case workers")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("VOLECGI_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        parser = _build_parser()
        ns, extra = parser.parse_known_args(argv)
        if not ns.command:
            parser.error("a subcommand is required (see --help)")
        handler = _COMMANDS[ns.command][0]
        handler(ns, extra)
        return 0
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
