"""Volumetric ECG imaging: torso potentials to cardiac activation.

Two inverse routes share one pipeline: epicardial surface potentials
through a boundary-element transfer matrix, and volumetric equivalent
sources through finite-element Green functions.  Downstream stages
(signal conditioning, regularized inversion, activation mapping,
origin localization, infarct segment metrics) are route-agnostic.
"""

__version__ = "0.1.0"

from .activation import (
    InfarctReport,
    LatParams,
    LATMap,
    earliest_site,
    infarct_metrics,
    infarct_table,
    lat_map,
    lat_wavelet,
    overlap_score,
    read_lat_csv,
    total_activation_time,
    write_lat_csv,
)
from .bem import EpicardialOperator, assemble_epicardial, forward_epicardial
from .bench import (
    MetricsReport,
    SuiteConfig,
    compare_methods,
    localization_error,
    run_benchmark,
)
from .errors import NumericalError, UserInputError, VolecgiError
from .fem import (
    ConductivityMap,
    GreenField,
    NeumannSolver,
    PotentialField,
    VolumetricOperator,
    assemble_stiffness,
    assemble_volumetric,
    boundary_sink,
    forward_direct,
    forward_volumetric,
    green_field,
    solve_neumann,
)
from .fields import EPICARDIAL_SURFACE, HEART_VOLUME, SourceField
from .geometry import (
    HEART_REGION,
    SegmentModel,
    TetMesh,
    TriMesh,
    aha17_segments,
    boundary_surface,
    edge_graph,
    enclosed_volume,
    geodesic_distance,
    geodesic_distances,
    lumped_volumes,
    mesh_content_hash,
    nearest_vertex,
    solid_angle,
    surface_solid_angle,
)
from .inversion import (
    InverseSolution,
    LCurve,
    RegularizationParams,
    constrained_tikhonov,
    default_grid,
    lcurve_select,
    tikhonov,
    write_lcurve_csv,
)
from .phantom import (
    SEED_CLASSES,
    GroundTruth,
    PhantomGeometry,
    PhantomSpec,
    build_geometry,
    generate_case,
    simulate_activation,
    source_waveform,
    synthesize_sources,
    write_case_dir,
)
from .shapes import ball_mesh, cube_grid, icosphere, unit_cube_tets, voxel_tet_mesh
from .signals import (
    FilterSpec,
    SignalBlock,
    add_gaussian_noise,
    butterworth,
    comb_notch,
    common_reference,
    preprocess,
    read_signals_csv,
    write_signals_csv,
)
from .vtkio import (
    load_surface_mesh,
    load_volume_mesh,
    read_vtk,
    write_surface_mesh,
    write_volume_mesh,
)
