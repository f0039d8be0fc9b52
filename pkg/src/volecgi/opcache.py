"""Binary cache for assembled transfer operators.

Assembly dominates pipeline cost, so operators can be written once and
reloaded.  Layout: magic line, little-endian uint32 JSON-header length,
the JSON header (kind, metadata, array manifest), then the raw array
bytes in manifest order.  Loading verifies the stored mesh content
hashes when the caller supplies current ones; a stale cache is refused
rather than silently reused.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .bem import EpicardialOperator
from .errors import UserInputError
from .fem import VolumetricOperator

MAGIC = b"VOLECGIOP1\n"

_EPI_ARRAYS = ["matrix", "matrix_raw", "electrode_vertices"]
_VOL_ARRAYS = ["matrix", "constraint", "heart_nodes", "electrode_nodes"]


def _manifest(op) -> tuple[str, dict, list]:
    if isinstance(op, EpicardialOperator):
        meta = {
            "torso_hash": op.torso_hash,
            "heart_hash": op.heart_hash,
            "condition": op.condition,
        }
        return "epicardial", meta, _EPI_ARRAYS
    if isinstance(op, VolumetricOperator):
        meta = {
            "mesh_hash": op.mesh_hash,
            "sigma": op.sigma,
            "quadrature_weighted": op.quadrature_weighted,
            "gauge": op.gauge,
        }
        return "volumetric", meta, _VOL_ARRAYS
    raise UserInputError(f"cannot cache object of type {type(op).__name__}")


def write_operator(path: str, op) -> None:
    kind, meta, names = _manifest(op)
    arrays = [np.ascontiguousarray(getattr(op, n)) for n in names]
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [
            {"name": n, "dtype": a.dtype.str, "shape": list(a.shape)}
            for n, a in zip(names, arrays)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def _check_hash(what: str, stored: str, current: str | None):
    if current is not None and stored != current:
        raise UserInputError(
            f"cached operator was built for a different {what} "
            f"(cache {stored[:12]}..., current {current[:12]}...); reassemble"
        )


def read_operator(
    path: str,
    torso_hash: str | None = None,
    heart_hash: str | None = None,
    mesh_hash: str | None = None,
):
    """Load a cached operator, verifying any supplied mesh hashes."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UserInputError(f"cannot read operator cache {path}: {exc}")
    if not raw.startswith(MAGIC):
        raise UserInputError(f"{path} is not an operator cache (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise UserInputError(f"{path} is truncated")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode())
    except ValueError as exc:
        raise UserInputError(f"{path} has a corrupt header: {exc}")
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise UserInputError(f"{path} is truncated in array {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=off)
            .reshape(shape)
            .copy()
        )
        off += nbytes
    meta = header["meta"]
    kind = header.get("kind")
    if kind == "epicardial":
        _check_hash("torso surface", meta["torso_hash"], torso_hash)
        _check_hash("heart surface", meta["heart_hash"], heart_hash)
        return EpicardialOperator(
            matrix=arrays["matrix"],
            matrix_raw=arrays["matrix_raw"],
            electrode_vertices=arrays["electrode_vertices"],
            torso_hash=meta["torso_hash"],
            heart_hash=meta["heart_hash"],
            condition=float(meta["condition"]),
        )
    if kind == "volumetric":
        _check_hash("volume mesh", meta["mesh_hash"], mesh_hash)
        return VolumetricOperator(
            matrix=arrays["matrix"],
            constraint=arrays["constraint"],
            heart_nodes=arrays["heart_nodes"],
            electrode_nodes=arrays["electrode_nodes"],
            mesh_hash=meta["mesh_hash"],
            sigma=meta["sigma"],
            quadrature_weighted=bool(meta["quadrature_weighted"]),
            gauge=meta["gauge"],
        )
    raise UserInputError(f"{path} has unknown operator kind {kind!r}")
