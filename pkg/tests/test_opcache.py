"""Operator cache: bitwise roundtrip and stale-cache refusal."""

import json
import struct

import numpy as np
import pytest

from volecgi import EpicardialOperator, UserInputError, VolumetricOperator
from volecgi.opcache import MAGIC, read_operator, write_operator


def _epi_op(rng):
    return EpicardialOperator(
        matrix=rng.normal(size=(6, 11)),
        matrix_raw=rng.normal(size=(6, 11)),
        electrode_vertices=np.array([3, 8, 2, 14, 5, 9], dtype=np.int64),
        torso_hash="t" * 64,
        heart_hash="h" * 64,
        condition=42.5,
    )


def _vol_op(rng):
    return VolumetricOperator(
        matrix=rng.normal(size=(6, 20)),
        constraint=rng.uniform(0.5, 2.0, size=20),
        heart_nodes=np.arange(40, 60, dtype=np.int64),
        electrode_nodes=np.arange(6, dtype=np.int64),
        mesh_hash="m" * 64,
        sigma="homogeneous:1",
        quadrature_weighted=False,
        gauge="common-reference",
    )


def test_epicardial_roundtrip_bitwise(tmp_path):
    op = _epi_op(np.random.default_rng(1))
    path = tmp_path / "epi.op"
    write_operator(str(path), op)
    back = read_operator(str(path), torso_hash=op.torso_hash, heart_hash=op.heart_hash)
    assert isinstance(back, EpicardialOperator)
    assert np.array_equal(back.matrix, op.matrix)
    assert np.array_equal(back.matrix_raw, op.matrix_raw)
    assert np.array_equal(back.electrode_vertices, op.electrode_vertices)
    assert back.electrode_vertices.dtype == np.int64
    assert back.condition == op.condition
    assert back.torso_hash == op.torso_hash


def test_volumetric_roundtrip_bitwise(tmp_path):
    op = _vol_op(np.random.default_rng(2))
    path = tmp_path / "vol.op"
    write_operator(str(path), op)
    back = read_operator(str(path), mesh_hash=op.mesh_hash)
    assert isinstance(back, VolumetricOperator)
    assert np.array_equal(back.matrix, op.matrix)
    assert np.array_equal(back.constraint, op.constraint)
    assert np.array_equal(back.heart_nodes, op.heart_nodes)
    assert np.array_equal(back.electrode_nodes, op.electrode_nodes)
    assert back.sigma == "homogeneous:1"
    assert back.quadrature_weighted is False
    assert back.gauge == "common-reference"


def test_hash_mismatch_is_refused(tmp_path):
    rng = np.random.default_rng(3)
    epi = tmp_path / "epi.op"
    write_operator(str(epi), _epi_op(rng))
    with pytest.raises(UserInputError, match="different torso surface"):
        read_operator(str(epi), torso_hash="x" * 64)
    with pytest.raises(UserInputError, match="different heart surface"):
        read_operator(str(epi), torso_hash="t" * 64, heart_hash="x" * 64)
    vol = tmp_path / "vol.op"
    write_operator(str(vol), _vol_op(rng))
    with pytest.raises(UserInputError, match="different volume mesh"):
        read_operator(str(vol), mesh_hash="x" * 64)
    # omitting the hashes skips verification entirely
    assert read_operator(str(epi)).condition == 42.5


def test_corrupt_files_are_rejected(tmp_path):
    missing = tmp_path / "nope.op"
    with pytest.raises(UserInputError, match="cannot read operator cache"):
        read_operator(str(missing))

    bad_magic = tmp_path / "bad.op"
    bad_magic.write_bytes(b"NOTANOP\n" + b"\x00" * 32)
    with pytest.raises(UserInputError, match="bad magic"):
        read_operator(str(bad_magic))

    stub = tmp_path / "stub.op"
    stub.write_bytes(MAGIC + b"\x01")
    with pytest.raises(UserInputError, match="truncated"):
        read_operator(str(stub))

    garbled = tmp_path / "garbled.op"
    blob = b"{not json"
    garbled.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob)
    with pytest.raises(UserInputError, match="corrupt header"):
        read_operator(str(garbled))

    short = tmp_path / "short.op"
    write_operator(str(short), _epi_op(np.random.default_rng(4)))
    data = short.read_bytes()
    short.write_bytes(data[:-16])
    with pytest.raises(UserInputError, match="truncated in array"):
        read_operator(str(short))

    weird = tmp_path / "weird.op"
    blob = json.dumps({"kind": "hybrid", "meta": {}, "arrays": []}).encode()
    weird.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob)
    with pytest.raises(UserInputError, match="unknown operator kind"):
        read_operator(str(weird))


def test_uncacheable_object_is_rejected(tmp_path):
    with pytest.raises(UserInputError, match="cannot cache"):
        write_operator(str(tmp_path / "x.op"), object())
