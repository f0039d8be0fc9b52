"""Legacy ASCII VTK reading and writing.

Two dataset kinds are supported, matching what the pipeline exchanges:
UNSTRUCTURED_GRID with tetrahedral cells (volume meshes, cell array
"region", point arrays such as "lat_ms") and POLYDATA with triangles
(surfaces, point array "electrode").  Parse failures report the file
and line number.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import UserInputError
from .geometry import TetMesh, TriMesh

_FLOAT_FMT = "%.17g"


class _Tokens:
    """Whitespace token stream that remembers line numbers."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "r") as fh:
            self.lines = fh.read().splitlines()
        self.lineno = 0
        self._queue: list[str] = []

    def fail(self, message: str):
        raise UserInputError(f"{self.path}:{self.lineno}: {message}")

    def next_line(self) -> str:
        while self.lineno < len(self.lines):
            line = self.lines[self.lineno]
            self.lineno += 1
            if line.strip():
                return line
        self.fail("unexpected end of file")

    def peek_word(self) -> str | None:
        i = self.lineno
        while i < len(self.lines):
            stripped = self.lines[i].strip()
            if stripped:
                return stripped.split()[0]
            i += 1
        return None

    def read_numbers(self, count: int, kind) -> np.ndarray:
        out = np.empty(count, dtype=kind)
        pos = 0
        while pos < count:
            for tok in self.next_line().split():
                if pos >= count:
                    self.fail("more values on line than expected")
                try:
                    out[pos] = kind(tok)
                except ValueError:
                    self.fail(f"expected a number, got {tok!r}")
                pos += 1
        return out


def _read_header(tok: _Tokens) -> str:
    first = tok.next_line()
    if not first.startswith("# vtk DataFile"):
        tok.fail("not a legacy VTK file (missing '# vtk DataFile' header)")
    tok.next_line()  # title, ignored
    fmt = tok.next_line().strip().upper()
    if fmt != "ASCII":
        tok.fail(f"only ASCII files are supported, got {fmt!r}")
    words = tok.next_line().split()
    if len(words) != 2 or words[0].upper() != "DATASET":
        tok.fail("expected 'DATASET <type>'")
    return words[1].upper()


def _read_points(tok: _Tokens) -> np.ndarray:
    words = tok.next_line().split()
    if words[0].upper() != "POINTS" or len(words) != 3:
        tok.fail("expected 'POINTS <n> <dtype>'")
    try:
        n = int(words[1])
    except ValueError:
        tok.fail(f"bad point count {words[1]!r}")
    return tok.read_numbers(3 * n, float).reshape(n, 3)


def _read_data_arrays(tok: _Tokens, n: int, where: str) -> dict[str, np.ndarray]:
    """Read SCALARS blocks until the next section keyword or EOF."""
    arrays: dict[str, np.ndarray] = {}
    while True:
        word = tok.peek_word()
        if word is None or word.upper() in ("CELL_DATA", "POINT_DATA"):
            return arrays
        words = tok.next_line().split()
        if words[0].upper() != "SCALARS":
            tok.fail(f"unsupported {where} section {words[0]!r} (only SCALARS)")
        if len(words) < 3:
            tok.fail("expected 'SCALARS <name> <dtype> [components]'")
        name, dtype = words[1], words[2].lower()
        comps = int(words[3]) if len(words) > 3 else 1
        if comps != 1:
            tok.fail(f"only 1-component scalars supported, got {comps}")
        lookup = tok.peek_word()
        if lookup is not None and lookup.upper() == "LOOKUP_TABLE":
            tok.next_line()
        kind = int if dtype in ("int", "long", "short", "vtkidtype") else float
        arrays[name] = tok.read_numbers(n, kind)


def read_vtk(path: str) -> dict:
    """Parse a legacy VTK file into a plain dict.

    Keys: kind ('tet' | 'tri'), points, cells, cell_data, point_data.
    """
    if not os.path.exists(path):
        raise UserInputError(f"no such file: {path}")
    tok = _Tokens(path)
    dataset = _read_header(tok)
    points = _read_points(tok)
    out = {"points": points, "cell_data": {}, "point_data": {}}

    if dataset == "UNSTRUCTURED_GRID":
        words = tok.next_line().split()
        if words[0].upper() != "CELLS" or len(words) != 3:
            tok.fail("expected 'CELLS <n> <size>'")
        n_cells, size = int(words[1]), int(words[2])
        raw = tok.read_numbers(size, int)
        cells = np.empty((n_cells, 4), dtype=np.int64)
        pos = 0
        for i in range(n_cells):
            if pos >= size:
                tok.fail("CELLS block shorter than declared size")
            npts = raw[pos]
            if npts != 4:
                tok.fail(f"cell {i} has {npts} points; only tetrahedra supported")
            cells[i] = raw[pos + 1 : pos + 5]
            pos += 5
        words = tok.next_line().split()
        if words[0].upper() != "CELL_TYPES":
            tok.fail("expected 'CELL_TYPES <n>'")
        types = tok.read_numbers(int(words[1]), int)
        if not np.all(types == 10):
            bad = int(np.argmax(types != 10))
            tok.fail(f"cell {bad} has VTK type {types[bad]}; only type 10 (tet)")
        out["kind"] = "tet"
        out["cells"] = cells
    elif dataset == "POLYDATA":
        words = tok.next_line().split()
        if words[0].upper() != "POLYGONS" or len(words) != 3:
            tok.fail("expected 'POLYGONS <n> <size>'")
        n_cells, size = int(words[1]), int(words[2])
        raw = tok.read_numbers(size, int)
        cells = np.empty((n_cells, 3), dtype=np.int64)
        pos = 0
        for i in range(n_cells):
            if pos >= size:
                tok.fail("POLYGONS block shorter than declared size")
            npts = raw[pos]
            if npts != 3:
                tok.fail(f"polygon {i} has {npts} points; only triangles supported")
            cells[i] = raw[pos + 1 : pos + 4]
            pos += 4
        out["kind"] = "tri"
        out["cells"] = cells
    else:
        tok.fail(f"unsupported dataset type {dataset!r}")

    while True:
        word = tok.peek_word()
        if word is None:
            break
        words = tok.next_line().split()
        section = words[0].upper()
        if section not in ("CELL_DATA", "POINT_DATA"):
            tok.fail(f"unsupported section {words[0]!r}")
        n = int(words[1])
        expected = len(out["cells"]) if section == "CELL_DATA" else len(points)
        if n != expected:
            tok.fail(f"{section} count {n} does not match {expected}")
        target = "cell_data" if section == "CELL_DATA" else "point_data"
        out[target].update(_read_data_arrays(tok, n, section))
    return out


def load_volume_mesh(path: str) -> TetMesh:
    """Load an UNSTRUCTURED_GRID tet mesh; cell array "region" labels tets."""
    raw = read_vtk(path)
    if raw["kind"] != "tet":
        raise UserInputError(f"{path}: expected a tetrahedral UNSTRUCTURED_GRID")
    region = raw["cell_data"].get("region")
    return TetMesh(
        vertices=raw["points"],
        tets=raw["cells"],
        region=None if region is None else region.astype(np.int64),
    )


def load_surface_mesh(path: str, closed: bool = True) -> TriMesh:
    """Load a POLYDATA triangle surface; point array "electrode" labels vertices."""
    raw = read_vtk(path)
    if raw["kind"] != "tri":
        raise UserInputError(f"{path}: expected a triangulated POLYDATA surface")
    electrode = raw["point_data"].get("electrode")
    return TriMesh(
        vertices=raw["points"],
        triangles=raw["cells"],
        point_labels=None if electrode is None else electrode.astype(np.int64),
        closed=closed,
    )


def load_mesh(path: str, kind: str) -> TetMesh | TriMesh:
    """Load a mesh by declared kind: 'volume' or 'surface'."""
    if kind == "volume":
        return load_volume_mesh(path)
    if kind == "surface":
        return load_surface_mesh(path)
    raise UserInputError(f"unknown mesh kind {kind!r}; use 'volume' or 'surface'")


def _format_block(array: np.ndarray, per_line: int) -> list[str]:
    if array.dtype.kind == "f":
        flat = [(_FLOAT_FMT % v) for v in array.ravel()]
    else:
        flat = [str(int(v)) for v in array.ravel()]
    return [
        " ".join(flat[i : i + per_line]) for i in range(0, len(flat), per_line)
    ]


def _write_arrays(lines: list[str], arrays: dict[str, np.ndarray], n: int, what: str):
    for name, values in arrays.items():
        values = np.asarray(values)
        if values.shape != (n,):
            raise UserInputError(
                f"{what} array {name!r} has shape {values.shape}, expected ({n},)"
            )
        vtk_type = "int" if values.dtype.kind in "iu" else "double"
        lines.append(f"SCALARS {name} {vtk_type} 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_format_block(values, 9))


def write_volume_mesh(
    path: str,
    mesh: TetMesh,
    point_data: dict[str, np.ndarray] | None = None,
    title: str = "volume mesh",
):
    """Write a tet mesh with its region labels and optional point arrays."""
    lines = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines.extend(_format_block(mesh.vertices, 3))
    cells = np.concatenate(
        [np.full((mesh.n_tets, 1), 4, dtype=np.int64), mesh.tets], axis=1
    )
    lines.append(f"CELLS {mesh.n_tets} {mesh.n_tets * 5}")
    lines.extend(_format_block(cells, 5))
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines.extend(_format_block(np.full(mesh.n_tets, 10, dtype=np.int64), 9))
    lines.append(f"CELL_DATA {mesh.n_tets}")
    _write_arrays(lines, {"region": mesh.region}, mesh.n_tets, "cell")
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        _write_arrays(lines, point_data, mesh.n_vertices, "point")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_surface_mesh(
    path: str,
    mesh: TriMesh,
    point_data: dict[str, np.ndarray] | None = None,
    title: str = "surface mesh",
):
    """Write a triangle surface; electrode labels go out as point data."""
    lines = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines.extend(_format_block(mesh.vertices, 3))
    cells = np.concatenate(
        [np.full((mesh.n_triangles, 1), 3, dtype=np.int64), mesh.triangles], axis=1
    )
    lines.append(f"POLYGONS {mesh.n_triangles} {mesh.n_triangles * 4}")
    lines.extend(_format_block(cells, 4))
    arrays = dict(point_data or {})
    if mesh.point_labels is not None and "electrode" not in arrays:
        arrays = {"electrode": mesh.point_labels, **arrays}
    if arrays:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        _write_arrays(lines, arrays, mesh.n_vertices, "point")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
