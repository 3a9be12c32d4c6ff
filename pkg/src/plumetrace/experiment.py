"""Seeded end-to-end experiments: truth simulation, estimation, metrics.

A scenario couples a mesh, a flow, a source, and a sensor network into the
discrete model; Monte Carlo trials then simulate ground truth with fresh
noise, run an estimator on the quantised observations, and aggregate the
averaged estimation error (AEE).

Randomness is split into named streams derived from the master seed so that
the truth, the sensor layout, and each estimator never share draws: stream
0 seeds the sensor layout (one layout per scenario), stream 1 the per-trial
truth, and streams 2 and 3 the particle and ensemble filters.  Changing the
estimator or its size therefore never changes the simulated truth.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from plumetrace import fem, filters, flowfield, mesh as meshmod, sensing

__all__ = [
    "ScenarioConfig",
    "Scenario",
    "ModelProvider",
    "TrialResult",
    "build_scenario",
    "simulate_ground_truth",
    "draw_observation",
    "run_rbpf",
    "run_enkf",
    "run_trial",
    "run_trials",
    "compute_aee",
    "write_results_csv",
    "write_summary_json",
    "write_truth_csv",
    "write_observations_csv",
    "load_observations_csv",
]

STREAM_SENSORS = 0
STREAM_TRUTH = 1
STREAM_RBPF = 2
STREAM_ENKF = 3

_ESTIMATOR_STREAMS = {"rbpf": STREAM_RBPF, "enkf": STREAM_ENKF}

# Fields that define the simulated scenario; estimator choice and output
# settings are deliberately excluded so runs of different estimators on the
# same scenario share a config hash and can be compared.
_HASH_FIELDS = (
    "mesh_file", "domain", "nx", "ny",
    "flow_kind", "flow_u", "flow_v", "flow_center", "flow_rate", "flow_file",
    "diffusivity", "auto_stabilise", "dt", "steps",
    "source", "strength", "field_noise", "strength_walk",
    "sensor_file", "sensor_layout", "sensor_count", "detect_rate", "quantiser_scale",
    "quantiser_levels", "sensor_noise",
    "trials", "seed",
)


@dataclass
class ScenarioConfig:
    """Complete description of one experiment.

    The defaults form the desk-scale demonstration scenario: a 1 km square
    meshed 20 by 20, a weak uniform current with strong eddy mixing, one
    constant unit-strength source, and a 40-sensor monitoring fence around
    the release point with miss detection and coarse quantisation.
    """

    # mesh: either a file or a structured rectangle
    mesh_file: Optional[str] = None
    domain: tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 1000.0)
    nx: int = 20
    ny: int = 20
    # flow
    flow_kind: str = "uniform"  # uniform | rotation | zero | file
    flow_u: float = 0.02
    flow_v: float = 0.0
    flow_center: tuple[float, float] = (0.0, 0.0)
    flow_rate: float = 0.0
    flow_file: Optional[str] = None
    # physics and time stepping
    diffusivity: float = 25.0
    auto_stabilise: bool = True
    dt: Optional[float] = 18.0  # None selects the conservative default step
    steps: int = 48
    source: tuple[float, float] = (250.0, 500.0)
    strength: float = 1.0
    field_noise: float = 5e-3
    strength_walk: float = 1e-8
    # sensors
    sensor_file: Optional[str] = None
    sensor_layout: str = "fence"  # fence | random
    sensor_count: int = 40
    detect_rate: float = 0.85
    quantiser_scale: float = 24.0
    quantiser_levels: int = 10_000
    sensor_noise: float = 5e-3
    # estimator
    estimator: str = "rbpf"
    size: int = 30
    init_cov: float = 10.0
    # trials
    trials: int = 20
    seed: int = 0
    force_dt: bool = False
    node_stride: int = 1

    def validate(self) -> None:
        if self.mesh_file is None:
            x0, y0, x1, y1 = self.domain
            if not (x1 > x0 and y1 > y0):
                raise ValueError("domain rectangle must have positive extent")
            if self.nx < 1 or self.ny < 1:
                raise ValueError("mesh resolution must be at least 1x1")
        if self.flow_kind not in ("uniform", "rotation", "zero", "file"):
            raise ValueError(f"unknown flow kind {self.flow_kind!r}")
        if self.flow_kind == "file" and not self.flow_file:
            raise ValueError("flow kind 'file' requires flow_file")
        if self.diffusivity < 0.0:
            raise ValueError("diffusivity must be non-negative")
        if self.dt is not None and self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")
        if self.field_noise <= 0.0 or self.strength_walk <= 0.0:
            raise ValueError("process noise variances must be positive")
        if self.sensor_layout not in ("fence", "random"):
            raise ValueError(f"unknown sensor layout {self.sensor_layout!r}")
        if self.sensor_file is None and self.sensor_count < 1:
            raise ValueError("at least one sensor is required")
        if not 0.0 <= self.detect_rate <= 1.0:
            raise ValueError("detection rate must lie in [0, 1]")
        if self.quantiser_scale <= 0.0:
            raise ValueError("quantiser scale must be positive")
        if self.quantiser_levels < 1:
            raise ValueError("quantiser level count must be positive")
        if self.sensor_noise <= 0.0:
            raise ValueError("sensor noise variance must be positive")
        if self.estimator not in _ESTIMATOR_STREAMS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.size < 1 or (self.estimator == "enkf" and self.size < 2):
            raise ValueError("estimator size too small")
        if self.init_cov <= 0.0:
            raise ValueError("initial covariance must be positive")
        if self.trials < 1:
            raise ValueError("at least one trial is required")
        if self.node_stride < 1:
            raise ValueError("node stride must be at least 1")

    def scenario_hash(self) -> str:
        """Digest of the scenario-defining fields.

        Embedded in every output file so estimates are never computed
        against observations from a different scenario.  Estimator settings
        are excluded: runs of different estimators on the same scenario
        share the hash.
        """
        parts = ["plumetrace-config-v1"]
        for name in _HASH_FIELDS:
            parts.append(f"{name}={getattr(self, name)!r}")
        digest = hashlib.sha256("\n".join(parts).encode("utf-8"))
        return digest.hexdigest()[:16]


@dataclass
class Scenario:
    """A config resolved into concrete model objects."""

    config: ScenarioConfig
    mesh: meshmod.TriMesh
    flow: object
    network: sensing.SensorNetwork
    provider: "ModelProvider"
    report: fem.StabilityReport
    diffusivity_eff: float
    dt: float
    t0: float

    @property
    def state_dim(self) -> int:
        return self.mesh.node_count + 1


class ModelProvider:
    """Per-step dispersion models, rebuilt only when the flow changes.

    For analytic flows a single model serves every step; for gridded flows
    the transition matrix is reassembled at each flow sample interval and
    cached by interval index.
    """

    def __init__(self, mesh, flow, diffusivity, dt, field_noise, strength_walk,
                 source, lumped: bool = True, t0: float = 0.0):
        self._mesh = mesh
        self._flow = flow
        self._diffusivity = diffusivity
        self._dt = dt
        self._field_noise = field_noise
        self._strength_walk = strength_walk
        self._source = source
        self._lumped = lumped
        self._t0 = t0
        self._times = (
            np.asarray(flow.ts) if isinstance(flow, flowfield.GriddedFlow)
            else None
        )
        self._cache: dict[int, fem.DispersionModel] = {}

    def interval_index(self, step: int) -> int:
        if self._times is None:
            return 0
        t = self._t0 + step * self._dt
        idx = np.searchsorted(self._times, t, side="right") - 1
        return int(np.clip(idx, 0, self._times.size - 1))

    def model_at(self, step: int) -> fem.DispersionModel:
        idx = self.interval_index(step)
        if idx not in self._cache:
            t = self._t0 if self._times is None else float(self._times[idx])
            velocities = flowfield.element_velocities(self._flow, self._mesh, t)
            system = fem.assemble(
                self._mesh, velocities, self._diffusivity,
                source=self._source, lumped=self._lumped,
            )
            self._cache[idx] = fem.build_model(
                system, self._dt, self._field_noise, self._strength_walk,
                mesh=self._mesh, diffusivity=self._diffusivity,
            )
        return self._cache[idx]


def _build_flow(config: ScenarioConfig):
    if config.flow_kind == "uniform":
        return flowfield.UniformFlow(config.flow_u, config.flow_v)
    if config.flow_kind == "rotation":
        return flowfield.RigidRotationFlow(tuple(config.flow_center),
                                           config.flow_rate)
    if config.flow_kind == "zero":
        return flowfield.UniformFlow(0.0, 0.0)
    return flowfield.load_gridded_flow(config.flow_file)


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Resolve a config into mesh, flow, sensors and a model provider.

    Chooses the artificial diffusivity from the worst flow sample, resolves
    the automatic time step, and refuses an explicitly configured unstable
    step unless ``force_dt`` is set.
    """
    config.validate()
    if config.mesh_file:
        grid = meshmod.load_mesh(config.mesh_file)
    else:
        x0, y0, x1, y1 = config.domain
        grid = meshmod.build_structured_mesh(x0, y0, x1, y1, config.nx, config.ny)
    flow = _build_flow(config)
    t0 = flow.t_first if isinstance(flow, flowfield.GriddedFlow) else 0.0

    sample_times = (
        [float(t) for t in flow.ts] if isinstance(flow, flowfield.GriddedFlow)
        else [t0]
    )
    lam_eff = config.diffusivity
    if config.auto_stabilise:
        lam_star = 0.0
        for t in sample_times:
            vel = flowfield.element_velocities(flow, grid, t)
            quality = fem.stability_report(
                grid, vel, config.diffusivity, compute_lambda_max=False
            )
            lam_star = max(lam_star, quality.artificial_diffusivity)
        lam_eff = config.diffusivity + lam_star

    vel0 = flowfield.element_velocities(flow, grid, t0)
    report = fem.stability_report(grid, vel0, lam_eff)
    if config.dt is None:
        dt = fem.default_time_step(report)
    else:
        dt = float(config.dt)
        if not report.approves(dt) and not config.force_dt:
            raise ValueError(
                f"time step {dt:g} exceeds the stable limit "
                f"{report.critical_dt:g}; set force_dt to run anyway"
            )

    if config.sensor_file:
        network = sensing.load_sensor_layout(config.sensor_file, grid)
    else:
        if config.sensor_layout == "fence":
            positions = sensing.fence_positions(
                grid, config.source, config.sensor_count
            )
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, STREAM_SENSORS))
            )
            positions = sensing.generate_positions(
                grid, config.sensor_count, rng
            )
        network = sensing.SensorNetwork.build(
            grid, positions,
            noise_var=config.sensor_noise,
            detect_rate=config.detect_rate,
            scale=config.quantiser_scale,
            levels=config.quantiser_levels,
        )

    provider = ModelProvider(
        grid, flow, lam_eff, dt, config.field_noise, config.strength_walk,
        source=config.source, t0=t0,
    )
    return Scenario(
        config=config, mesh=grid, flow=flow, network=network,
        provider=provider, report=report, diffusivity_eff=lam_eff,
        dt=dt, t0=t0,
    )


def draw_observation(
    network: sensing.SensorNetwork, state_vector, rng
) -> sensing.QuantisedObservation:
    """One network reading of ``state_vector`` with fresh draws from ``rng``.

    Draw order is fixed: detection indicators first, then measurement
    noise.
    """
    alpha = (rng.random(network.count) < network.detect_rate).astype(float)
    noise = rng.normal(0.0, np.sqrt(network.noise_var))
    y = sensing.simulate_measurement(network.H, state_vector, alpha, noise)
    return sensing.QuantisedObservation(
        values=network.quantise(y), detections=alpha, raw=y,
    )


def simulate_ground_truth(
    scenario: Union[Scenario, ScenarioConfig], rng
) -> tuple[np.ndarray, list[sensing.QuantisedObservation]]:
    """Simulate the true trajectory and its quantised observation log.

    The truth holds the source strength constant (the random walk is the
    filter's model, not the generator's) while the field receives Gaussian
    process noise each step.  Per step the draw order is field noise, then
    detection indicators, then measurement noise.

    Returns the state trajectory as an ``(K + 1, C + 1)`` array (initial
    state first) and the list of ``K`` observations, taken after each step.
    """
    if isinstance(scenario, ScenarioConfig):
        scenario = build_scenario(scenario)
    config = scenario.config
    n = scenario.mesh.node_count
    state = fem.AugmentedState(
        concentrations=np.zeros(n), strength=config.strength
    )
    states = np.empty((config.steps + 1, n + 1))
    states[0] = state.as_vector()
    observations: list[sensing.QuantisedObservation] = []
    field_sd = np.sqrt(config.field_noise)
    for k in range(config.steps):
        model = scenario.provider.model_at(k)
        noise = np.append(rng.normal(0.0, field_sd, n), 0.0)
        state = fem.step(model, state, noise)
        states[k + 1] = state.as_vector()
        observations.append(draw_observation(scenario.network, states[k + 1], rng))
    return states, observations


def run_rbpf(
    scenario: Scenario,
    observations: Sequence,
    rng,
    size: Optional[int] = None,
    init_cov: Optional[float] = None,
    dump_path=None,
) -> np.ndarray:
    """Run the particle filter over an observation log; returns ``(K, C+1)``
    estimates."""
    config = scenario.config
    state = filters.rbpf_init(
        scenario.provider.model_at(0), scenario.network,
        size or config.size, rng,
        cov=init_cov if init_cov is not None else config.init_cov,
    )
    estimates = np.empty((len(observations), scenario.state_dim))
    records = []
    for k, obs in enumerate(observations):
        state, estimates[k] = filters.rbpf_step(
            state, obs, model=scenario.provider.model_at(k)
        )
        if dump_path is not None:
            records.append((
                k, state.last_weights.copy(),
                state.last_means[:, -1].copy(), state.last_latent.copy(),
            ))
    if dump_path is not None:
        filters.write_particle_dump(dump_path, records)
    return estimates


def run_enkf(
    scenario: Scenario,
    observations: Sequence,
    rng,
    size: Optional[int] = None,
    init_cov: Optional[float] = None,
) -> np.ndarray:
    """Run the ensemble baseline over an observation log; returns
    ``(K, C+1)`` estimates."""
    config = scenario.config
    state = filters.enkf_init(
        scenario.provider.model_at(0), scenario.network,
        size or config.size, rng,
        cov=init_cov if init_cov is not None else config.init_cov,
    )
    estimates = np.empty((len(observations), scenario.state_dim))
    for k, obs in enumerate(observations):
        state, estimates[k] = filters.enkf_step(
            state, obs, model=scenario.provider.model_at(k)
        )
    return estimates


@dataclass
class TrialResult:
    """Outcome of one Monte Carlo trial.

    ``truth`` and ``estimates`` cover steps 1..K (the estimated steps);
    ``errors`` holds per-step Euclidean norms over the augmented state.
    """

    trial: int
    truth: np.ndarray
    estimates: np.ndarray
    errors: np.ndarray
    aee_contribution: float
    runtime: float

    @property
    def strengths(self) -> np.ndarray:
        """Per-step strength estimates."""
        return self.estimates[:, -1]

    @property
    def steps(self) -> int:
        return self.errors.shape[0]


def _trial_rng(config: ScenarioConfig, stream: int, trial: int):
    return np.random.default_rng(
        np.random.SeedSequence((config.seed, stream, trial))
    )


def run_trial(
    config: ScenarioConfig,
    trial: int,
    scenario: Optional[Scenario] = None,
    observations: Optional[Sequence] = None,
) -> TrialResult:
    """Simulate one trial and run the configured estimator on it.

    The truth stream depends only on the master seed and trial index, so
    the simulated world is identical whichever estimator analyses it.  An
    externally supplied observation log (e.g. read from file) replaces the
    freshly simulated one after a shape check.
    """
    if scenario is None:
        scenario = build_scenario(config)
    start = time.perf_counter()
    truth_states, obs_log = simulate_ground_truth(
        scenario, _trial_rng(config, STREAM_TRUTH, trial)
    )
    if observations is not None:
        if len(observations) != config.steps:
            raise ValueError(
                f"observation log has {len(observations)} steps, config "
                f"expects {config.steps}"
            )
        obs_log = list(observations)
    est_rng = _trial_rng(config, _ESTIMATOR_STREAMS[config.estimator], trial)
    if config.estimator == "rbpf":
        estimates = run_rbpf(scenario, obs_log, est_rng)
    else:
        estimates = run_enkf(scenario, obs_log, est_rng)
    truth = truth_states[1:]
    errors = np.linalg.norm(truth - estimates, axis=1)
    aee = float(errors.mean()) if errors.size else 0.0
    return TrialResult(
        trial=trial,
        truth=truth,
        estimates=estimates,
        errors=errors,
        aee_contribution=aee,
        runtime=time.perf_counter() - start,
    )


def run_trials(config: ScenarioConfig, threads: int = 1) -> list[TrialResult]:
    """Run all configured trials, optionally across processes.

    Results are ordered by trial index regardless of completion order, and
    every trial reseeds from the master seed, so the outcome does not
    depend on the degree of parallelism.
    """
    indices = range(config.trials)
    if threads <= 1:
        scenario = build_scenario(config)
        return [run_trial(config, i, scenario=scenario) for i in indices]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_trial, [config] * config.trials, indices))


def compute_aee(results: Sequence[TrialResult]) -> float:
    """Averaged estimation error over trials and steps.

    The mean over trials of each trial's mean per-step error norm; all
    trials must share the same horizon.
    """
    if not results:
        raise ValueError("no trial results given")
    horizons = {r.steps for r in results}
    if len(horizons) != 1:
        raise ValueError(f"trials have mismatched horizons: {sorted(horizons)}")
    return float(np.mean([r.aee_contribution for r in results]))


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_results_csv(results: Sequence[TrialResult], path,
                      config: ScenarioConfig) -> None:
    """Per-step results: one row per (trial, step) with the error norm and
    the strength estimate."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {config.scenario_hash()}\n")
        fh.write("trial,step,error,strength\n")
        for r in results:
            for k in range(r.steps):
                fh.write(
                    f"{r.trial},{k + 1},{_fmt(r.errors[k])},{_fmt(r.strengths[k])}\n"
                )


def write_summary_json(results: Sequence[TrialResult], path,
                       config: ScenarioConfig) -> dict:
    """Aggregate summary: AEE, per-step error statistics, settings, seeds.

    Returns the written document as a dictionary.
    """
    errors = np.stack([r.errors for r in results])
    strengths = np.stack([r.strengths for r in results])
    doc = {
        "aee": compute_aee(results),
        "estimator": config.estimator,
        "size": config.size,
        "init_cov": config.init_cov,
        "trials": len(results),
        "steps": int(errors.shape[1]),
        "config_hash": config.scenario_hash(),
        "master_seed": config.seed,
        "trial_seeds": [
            [config.seed, _ESTIMATOR_STREAMS[config.estimator], r.trial]
            for r in results
        ],
        "per_step_error_mean": errors.mean(axis=0).tolist(),
        "per_step_error_std": errors.std(axis=0).tolist(),
        "per_step_strength_mean": strengths.mean(axis=0).tolist(),
        "per_step_strength_std": strengths.std(axis=0).tolist(),
        "runtime_total": float(sum(r.runtime for r in results)),
        "runtime_per_trial": [r.runtime for r in results],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def write_truth_csv(trajectories: dict[int, np.ndarray], path,
                    config: ScenarioConfig) -> None:
    """True trajectories: one row per (trial, step) with nodal values at the
    configured stride and the strength last."""
    stride = config.node_stride
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {config.scenario_hash()}\n")
        first = next(iter(trajectories.values()))
        n = first.shape[1] - 1
        cols = ",".join(f"c_{i}" for i in range(0, n, stride))
        fh.write(f"trial,step,{cols},strength\n")
        for trial in sorted(trajectories):
            states = trajectories[trial]
            for k in range(states.shape[0]):
                nodal = ",".join(_fmt(v) for v in states[k, :-1:stride])
                fh.write(f"{trial},{k},{nodal},{_fmt(states[k, -1])}\n")


def write_observations_csv(
    logs: dict[int, Sequence[sensing.QuantisedObservation]], path,
    config: ScenarioConfig,
) -> None:
    """Observation log: one row per (trial, step, sensor) quantised value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {config.scenario_hash()}\n")
        fh.write("trial,step,sensor,value\n")
        for trial in sorted(logs):
            for k, obs in enumerate(logs[trial]):
                for j, v in enumerate(obs.values):
                    fh.write(f"{trial},{k + 1},{j},{_fmt(v)}\n")


def load_observations_csv(path) -> tuple[str, dict[int, np.ndarray]]:
    """Read an observation CSV back into per-trial ``(K, N)`` arrays.

    Returns the embedded config hash and the per-trial arrays; values
    round-trip exactly thanks to full-precision formatting.
    """
    config_hash = ""
    cells: dict[int, dict[int, dict[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# config"):
                config_hash = line.split()[-1]
                continue
            if not line or line.startswith("#") or line.startswith("trial"):
                continue
            trial_s, step_s, sensor_s, value_s = line.split(",")
            trial, step, sensor = int(trial_s), int(step_s), int(sensor_s)
            cells.setdefault(trial, {}).setdefault(step, {})[sensor] = float(value_s)
    logs: dict[int, np.ndarray] = {}
    for trial, steps_map in cells.items():
        n_steps = max(steps_map) if steps_map else 0
        n_sensors = max(max(s) for s in steps_map.values()) + 1
        arr = np.zeros((n_steps, n_sensors))
        for step, sensors_map in steps_map.items():
            for sensor, value in sensors_map.items():
                arr[step - 1, sensor] = value
        logs[trial] = arr
    if not logs:
        raise ValueError(f"observation file {path} contains no data rows")
    return config_hash, logs
