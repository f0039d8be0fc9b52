"""Shared fixtures.

The heavier fixtures (small phantom geometry, factorized solvers,
assembled operators) are session-scoped: they are deterministic pure
functions of their specs, so sharing them across test modules changes
nothing but wall time.
"""

import numpy as np
import pytest

from volecgi.fem import ConductivityMap, NeumannSolver, assemble_stiffness
from volecgi.geometry import HEART_REGION, TetMesh, lumped_volumes
from volecgi.phantom import PhantomSpec, build_geometry, generate_case
from volecgi.shapes import cube_grid, icosphere, unit_cube_tets


@pytest.fixture(scope="session")
def unit_cube():
    return unit_cube_tets()


@pytest.fixture(scope="session")
def grid3():
    return cube_grid(3)


@pytest.fixture(scope="session")
def ico2():
    return icosphere(1.0, 2)


@pytest.fixture(scope="session")
def small_spec():
    # coarse enough to build in ~1 s, fine enough to exercise every path
    return PhantomSpec(pitch_mm=12.0, n_electrodes=32)


@pytest.fixture(scope="session")
def small_geometry(small_spec):
    return build_geometry(small_spec)


@pytest.fixture(scope="session")
def small_solver(small_geometry):
    mesh = small_geometry.mesh
    k = assemble_stiffness(mesh, ConductivityMap.homogeneous(1.0))
    return NeumannSolver(k, lumped_volumes(mesh, region=None))


@pytest.fixture(scope="session")
def small_truth(small_spec, small_geometry):
    # mismatched forward sigma: solver built internally
    return generate_case(small_spec, geometry=small_geometry, case_index=0)


@pytest.fixture(scope="session")
def two_tet_mesh():
    """Two tets sharing a face; handy for tiny exact fixtures."""
    verts = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ]
    )
    tets = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
    return TetMesh(vertices=verts, tets=tets, region=np.ones(2, dtype=np.int64))
