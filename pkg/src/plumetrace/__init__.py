"""Contaminant dispersion on triangular meshes and source estimation.

The package discretises an advection-diffusion transport equation with a
linear finite-element method, simulates a network of quantised concentration
sensors subject to miss detection, and recovers the concentration field
together with an unknown source strength using a Rao-Blackwellised particle
filter.  An ensemble Kalman filter is included as a baseline estimator.
"""

from plumetrace.mesh import (
    BarycentricEval,
    ElementGeometry,
    MeshError,
    TriMesh,
    build_structured_mesh,
    element_geometry,
    load_mesh,
    locate_point,
    save_mesh,
    shape_functions_at,
)
from plumetrace.fem import (
    AugmentedState,
    DispersionModel,
    GlobalSystem,
    StabilityReport,
    apply_artificial_diffusivity,
    assemble,
    build_model,
    default_time_step,
    element_force,
    element_mass,
    element_stiffness,
    stability_report,
    step,
)
from plumetrace.flowfield import (
    GriddedFlow,
    RigidRotationFlow,
    UniformFlow,
    element_velocities,
    load_gridded_flow,
    save_gridded_flow,
    velocity_at,
)
from plumetrace.sensing import (
    QuantisedObservation,
    Quantiser,
    SensorNetwork,
    build_measurement_matrix,
    cell_probability,
    generate_positions,
    log_cell_probability,
    log_observation_likelihood,
    observation_likelihood,
    simulate_measurement,
)
from plumetrace.filters import (
    EnsembleState,
    FilterError,
    GaussianBelief,
    Particle,
    RbpfState,
    enkf_init,
    enkf_step,
    enkf_update,
    kf_predict,
    kf_update,
    latent_transition_density,
    latent_transition_logpdf,
    multinomial_resample,
    normalise_weights,
    particle_log_weights,
    propose_latent,
    rbpf_init,
    rbpf_step,
)
from plumetrace.experiment import (
    ScenarioConfig,
    TrialResult,
    build_scenario,
    compute_aee,
    run_trial,
    run_trials,
    simulate_ground_truth,
)

__version__ = "0.1.0"
