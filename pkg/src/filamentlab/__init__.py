"""filamentlab: mollified Biot-Savart filament dynamics and convergence studies.

Subpackages/modules
-------------------
kernel     : singular and mollified interaction kernels, derivative constants
filaments  : closed-curve ensembles, induced velocities, RK4 transport
currents   : weighted 1-currents, dual-norm estimators, conservation reports
euler_ref  : periodic pseudo-spectral reference solver for the mollified
             vorticity equation
harness    : scenario configs, stability constants, convergence studies, CLI
snapshots  : binary/CSV interchange formats
"""

__version__ = "0.1.0"

from .kernel import (
    BiotSavartParams,
    MollifierProfile,
    MollifiedKernel,
    KernelConstants,
    biot_savart_eval,
    build_mollifier,
    mollified_kernel_build,
    mollified_kernel_eval,
    estimate_kernel_constants,
    kernel_constants_sweep,
)
from .filaments import (
    Filament,
    FilamentEnsemble,
    TracerCloud,
    RingVorticity,
    make_ring,
    node_velocity,
    ensemble_rhs,
    step_rk4,
    simulate,
    remesh,
    evolve_tracers,
    sample_initial_filaments,
)
from .currents import (
    Loop,
    CurrentPolyline,
    TestField,
    MetricEstimate,
    DictionarySpec,
    GridSpec,
    empirical_current,
    zero_current,
    pair,
    convolve_velocity,
    push_forward,
    pull_back_field,
    mass_norm_upper,
    bl_metric_lower,
    bl_metric_upper,
    metric_estimate,
    l2_field_norm,
    field_energy_spectral,
    suggest_grid,
    conservation_report,
)
from .euler_ref import (
    PeriodicVorticityField,
    SpectralBiotSavart,
    SobolevMonitor,
    init_vortex_ring,
    biot_savart_spectral,
    vorticity_rhs,
    step_rk4_spectral,
    l2_distance,
    field_l2_norm,
    hs_norm,
    kinetic_energy,
    face_tail_fraction,
    fit_stability_horizon,
    filament_to_grid,
)
from .snapshots import (
    SNAPSHOT_VERSION,
    write_filaments,
    read_filaments,
    write_field,
    read_field,
    write_trajectory_csv,
    write_metric_csv,
    write_diagnostics_csv,
)
from .harness import (
    ScenarioConfig,
    load_config,
    StabilityConstants,
    stability_constant,
    SeriesPlot,
    RunReport,
    run_simulate,
    run_convergence_n,
    run_convergence_delta,
    run_mean_field,
    emit_outputs,
)

__all__ = [
    "__version__",
    "BiotSavartParams",
    "MollifierProfile",
    "MollifiedKernel",
    "KernelConstants",
    "biot_savart_eval",
    "build_mollifier",
    "mollified_kernel_build",
    "mollified_kernel_eval",
    "estimate_kernel_constants",
    "kernel_constants_sweep",
    "Filament",
    "FilamentEnsemble",
    "TracerCloud",
    "RingVorticity",
    "make_ring",
    "node_velocity",
    "ensemble_rhs",
    "step_rk4",
    "simulate",
    "remesh",
    "evolve_tracers",
    "sample_initial_filaments",
    "Loop",
    "CurrentPolyline",
    "TestField",
    "MetricEstimate",
    "DictionarySpec",
    "GridSpec",
    "empirical_current",
    "zero_current",
    "pair",
    "convolve_velocity",
    "push_forward",
    "pull_back_field",
    "mass_norm_upper",
    "bl_metric_lower",
    "bl_metric_upper",
    "metric_estimate",
    "l2_field_norm",
    "field_energy_spectral",
    "suggest_grid",
    "conservation_report",
    "PeriodicVorticityField",
    "SpectralBiotSavart",
    "SobolevMonitor",
    "init_vortex_ring",
    "biot_savart_spectral",
    "vorticity_rhs",
    "step_rk4_spectral",
    "l2_distance",
    "field_l2_norm",
    "hs_norm",
    "kinetic_energy",
    "face_tail_fraction",
    "fit_stability_horizon",
    "filament_to_grid",
    "SNAPSHOT_VERSION",
    "write_filaments",
    "read_filaments",
    "write_field",
    "read_field",
    "write_trajectory_csv",
    "write_metric_csv",
    "write_diagnostics_csv",
    "ScenarioConfig",
    "load_config",
    "StabilityConstants",
    "stability_constant",
    "SeriesPlot",
    "RunReport",
    "run_simulate",
    "run_convergence_n",
    "run_convergence_delta",
    "run_mean_field",
    "emit_outputs",
]
