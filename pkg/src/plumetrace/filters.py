"""State estimators for the dispersion model under quantised sensing.

The main estimator is a Rao-Blackwellised particle filter: because the
model is linear-Gaussian conditional on the noise-free latent measurement
``z = H x``, each particle samples only ``z`` (one scalar per sensor, drawn
uniformly over the received quantisation cell) and keeps a Kalman
conditional mean; the covariance recursion does not depend on the sampled
values and is shared by all particles, so it is computed once per step.
Particle weights combine the quantised-measurement likelihood, the Gaussian
predictive density of the drawn latent, and the uniform proposal density,
accumulated in log space.

An ensemble Kalman filter with perturbed observations serves as a baseline;
quantisation enters it only as extra additive observation noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from plumetrace.fem import DispersionModel
from plumetrace.sensing import Quantiser, QuantisedObservation, SensorNetwork

__all__ = [
    "FilterError",
    "GaussianBelief",
    "LinearModel",
    "Particle",
    "RbpfState",
    "EnsembleState",
    "default_jitter",
    "kf_predict",
    "kf_update",
    "latent_transition_logpdf",
    "latent_transition_density",
    "propose_latent",
    "particle_log_weights",
    "normalise_weights",
    "effective_sample_size",
    "multinomial_resample",
    "rbpf_init",
    "rbpf_step",
    "enkf_init",
    "enkf_update",
    "enkf_step",
    "write_particle_dump",
]


class FilterError(RuntimeError):
    """Raised when an estimator reaches a numerically degenerate state."""


@dataclass
class GaussianBelief:
    """Mean and covariance of a Gaussian state belief."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class LinearModel:
    """Minimal linear-Gaussian model: a transition matrix and process noise.

    Duck-type stand-in for :class:`~plumetrace.fem.DispersionModel` wherever
    only the Kalman operations are needed.
    """

    a: np.ndarray
    w: np.ndarray

    def augmented_transition(self) -> np.ndarray:
        return self.a

    def process_covariance(self) -> np.ndarray:
        return self.w


def default_jitter(cov: np.ndarray) -> float:
    """Diagonal loading for the innovation covariance.

    The latent measurement carries no noise of its own, so ``H P H^T`` can
    be singular; a load proportional to the average state variance keeps the
    update well posed without visibly perturbing it.
    """
    return 1e-9 * float(np.trace(cov)) / cov.shape[0]


def kf_predict(model, belief: GaussianBelief) -> GaussianBelief:
    """Propagate a Gaussian belief through the model dynamics."""
    a = model.augmented_transition()
    mean = a @ belief.mean
    cov = a @ belief.cov @ a.T + model.process_covariance()
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean=mean, cov=cov)


def kf_update(
    belief: GaussianBelief, h: np.ndarray, z, jitter: Optional[float] = None
) -> GaussianBelief:
    """Condition a Gaussian belief on the noise-free observation ``z = H x``.

    ``jitter`` is added to the diagonal of the innovation covariance; when
    omitted it defaults to :func:`default_jitter` of the current covariance.

    Raises
    ------
    FilterError
        If the innovation covariance is singular even with the jitter,
        which signals an ill-posed observation configuration.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if jitter is None:
        jitter = default_jitter(belief.cov)
    pht = belief.cov @ h.T
    s = h @ pht + jitter * np.eye(h.shape[0])
    try:
        gain = np.linalg.solve(s, pht.T).T
    except np.linalg.LinAlgError as exc:
        raise FilterError(
            "innovation covariance is singular despite jitter; observation "
            "configuration is ill posed"
        ) from exc
    if not np.isfinite(gain).all():
        raise FilterError("Kalman gain overflowed; observation configuration "
                          "is ill posed")
    mean = belief.mean + gain @ (z - h @ belief.mean)
    cov = (np.eye(belief.cov.shape[0]) - gain @ h) @ belief.cov
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean=mean, cov=cov)


def latent_transition_logpdf(z, mean, variance):
    """Log density of ``z`` under a scalar Gaussian, vectorised."""
    z = np.asarray(z, dtype=float)
    variance = np.asarray(variance, dtype=float)
    return -0.5 * (np.log(2.0 * np.pi * variance) + (z - mean) ** 2 / variance)


def latent_transition_density(
    predicted: GaussianBelief, h_row, z, jitter: Optional[float] = None
):
    """Gaussian predictive density of a drawn latent measurement.

    Under the predicted belief the latent ``z_j = H_j x`` is scalar Gaussian
    with mean ``H_j mean`` and variance ``H_j P H_j^T`` (plus the same
    jitter used in the update).
    """
    h_row = np.asarray(h_row, dtype=float)
    if jitter is None:
        jitter = default_jitter(predicted.cov)
    mean = float(h_row @ predicted.mean)
    var = float(h_row @ predicted.cov @ h_row) + jitter
    return float(np.exp(latent_transition_logpdf(z, mean, var)))


def propose_latent(q: Quantiser, y_hat, rng, size=None):
    """Draw latent measurements uniformly over a received cell.

    The proposal density is the constant ``num_levels / (2 * scale)``.
    """
    w = q.cell_half_width
    y_hat = np.asarray(y_hat, dtype=float)
    out = rng.uniform(y_hat - w, y_hat + w, size=size)
    if np.ndim(out) == 0 and size is None:
        return float(out)
    return out


def particle_log_weights(log_obs, log_trans, log_proposal) -> np.ndarray:
    """Sum per-sensor log factors into per-particle log weights.

    All inputs broadcast to ``(particles, sensors)``; the weight of a
    particle is the product over sensors of observation likelihood times
    latent predictive density divided by the proposal density.
    """
    terms = np.asarray(log_obs) + np.asarray(log_trans) - np.asarray(log_proposal)
    return terms.sum(axis=-1)


def normalise_weights(log_weights) -> np.ndarray:
    """Exponentiate shifted log weights and normalise them to sum to one.

    Raises
    ------
    FilterError
        If every weight vanished (all log weights ``-inf`` or non-finite),
        with the largest log weight in the message for diagnosis.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    top = log_weights.max()
    if not np.isfinite(top):
        raise FilterError(
            "particle weights degenerated: largest log weight is "
            f"{top}; observations are irreconcilable with every particle"
        )
    w = np.exp(log_weights - top)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    """Inverse sum of squared normalised weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / (w ** 2).sum())


def multinomial_resample(weights, rng, size: Optional[int] = None) -> np.ndarray:
    """Draw ancestor indices i.i.d. from the categorical given by ``weights``."""
    w = np.asarray(weights, dtype=float)
    if (w < 0.0).any() or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("weights must be normalised and non-negative")
    edges = np.cumsum(w)
    u = rng.random(w.size if size is None else int(size))
    return np.minimum(np.searchsorted(edges, u, side="right"), w.size - 1)


@dataclass
class Particle:
    """Snapshot of one particle after a filter step."""

    latent: np.ndarray
    mean: np.ndarray
    weight: float

    @property
    def strength(self) -> float:
        return float(self.mean[-1])


@dataclass
class RbpfState:
    """Particle population and shared covariances of the filter.

    ``means`` and ``weights`` are the population carried into the next step
    (weights are uniform whenever the step resampled).  The ``last_*``
    fields snapshot the step just computed, before resampling: they are what
    the reported estimate ``sum(last_weights * last_means)`` is built from
    and what particle dumps record.
    """

    model: DispersionModel
    network: SensorNetwork
    means: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    rng: np.random.Generator
    step_index: int = 0
    resample_threshold: Optional[float] = None
    cov_pred: Optional[np.ndarray] = None
    last_weights: Optional[np.ndarray] = None
    last_means: Optional[np.ndarray] = None
    last_latent: Optional[np.ndarray] = None

    @property
    def particle_count(self) -> int:
        return self.means.shape[0]

    def particles(self) -> list[Particle]:
        """Particle views of the latest step's snapshot."""
        if self.last_weights is None:
            return [
                Particle(latent=np.empty(0), mean=self.means[m],
                         weight=float(self.weights[m]))
                for m in range(self.particle_count)
            ]
        return [
            Particle(
                latent=self.last_latent[m],
                mean=self.last_means[m],
                weight=float(self.last_weights[m]),
            )
            for m in range(self.particle_count)
        ]


def _initial_moments(dim: int, mean, cov):
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float).copy()
    if mean.shape != (dim,):
        raise ValueError(f"initial mean must have shape ({dim},), got {mean.shape}")
    if cov is None:
        cov = 10.0
    if np.ndim(cov) == 0:
        if float(cov) <= 0.0:
            raise ValueError("initial covariance must be positive")
        cov = float(cov) * np.eye(dim)
    else:
        cov = np.asarray(cov, dtype=float).copy()
        if cov.shape != (dim, dim):
            raise ValueError(
                f"initial covariance must have shape ({dim}, {dim}), got {cov.shape}"
            )
    return mean, cov


def rbpf_init(
    model: DispersionModel,
    network: SensorNetwork,
    particle_count: int,
    rng: np.random.Generator,
    mean=None,
    cov=None,
    resample_threshold: Optional[float] = None,
) -> RbpfState:
    """Initial particle population: all means at the prior mean.

    ``cov`` may be a scalar (isotropic) or a full matrix; the default prior
    is zero mean with covariance ``10 I``.  ``resample_threshold`` switches
    resampling from every step (the default) to only when the effective
    sample size falls below ``threshold * particle_count``.
    """
    particle_count = int(particle_count)
    if particle_count < 1:
        raise ValueError("particle count must be at least 1")
    mean, cov = _initial_moments(model.state_dim, mean, cov)
    return RbpfState(
        model=model,
        network=network,
        means=np.tile(mean, (particle_count, 1)),
        cov=cov,
        weights=np.full(particle_count, 1.0 / particle_count),
        rng=rng,
        resample_threshold=resample_threshold,
    )


def rbpf_step(
    state: RbpfState,
    observation: Union[QuantisedObservation, np.ndarray],
    model: Optional[DispersionModel] = None,
) -> tuple[RbpfState, np.ndarray]:
    """Advance the filter by one observation; return the new state and the
    weighted posterior-mean estimate.

    The covariance recursion runs once, outside the particle population:
    the drawn latents never enter it.  Per particle the conditional mean is
    predicted, a latent is drawn uniformly over each sensor's received
    cell, the weight accumulates the mixture likelihood and predictive
    density against the proposal, and the mean is updated with the shared
    gain.  Resampling is multinomial, every step unless an effective-sample-
    size threshold was configured.
    """
    model = state.model if model is None else model
    net = state.network
    y_hat = np.asarray(getattr(observation, "values", observation), dtype=float)
    if y_hat.shape != (net.count,):
        raise ValueError(
            f"observation must supply {net.count} values, got {y_hat.shape}"
        )

    a_bar = model.augmented_transition()
    p_pred = a_bar @ state.cov @ a_bar.T + model.process_covariance()
    p_pred = 0.5 * (p_pred + p_pred.T)
    h = net.H
    jitter = default_jitter(p_pred)
    pht = p_pred @ h.T
    s = h @ pht + jitter * np.eye(net.count)
    try:
        gain = np.linalg.solve(s, pht.T).T
    except np.linalg.LinAlgError as exc:
        raise FilterError(
            "innovation covariance is singular despite jitter; sensor "
            "configuration is ill posed"
        ) from exc
    p_post = (np.eye(p_pred.shape[0]) - gain @ h) @ p_pred
    p_post = 0.5 * (p_post + p_post.T)

    means_pred = state.means @ a_bar.T
    z_pred = means_pred @ h.T
    half = net.cell_half_width
    draws = state.rng.random((state.particle_count, net.count))
    z = (y_hat - half) + 2.0 * half * draws

    s_diag = np.diag(s)
    log_trans = latent_transition_logpdf(z, z_pred, s_diag)
    log_obs = net.log_likelihood(y_hat, z)
    with np.errstate(divide="ignore"):
        log_prior = np.log(state.weights)
    log_w = log_prior + particle_log_weights(
        log_obs, log_trans, net.proposal_log_density
    )
    weights = normalise_weights(log_w)

    means_post = means_pred + (z - z_pred) @ gain.T
    estimate = weights @ means_post

    if state.resample_threshold is None or (
        effective_sample_size(weights)
        < state.resample_threshold * state.particle_count
    ):
        ancestors = multinomial_resample(weights, state.rng)
        next_means = means_post[ancestors]
        next_weights = np.full_like(weights, 1.0 / weights.size)
    else:
        next_means = means_post
        next_weights = weights

    new_state = replace(
        state,
        model=model,
        means=next_means,
        cov=p_post,
        weights=next_weights,
        step_index=state.step_index + 1,
        cov_pred=p_pred,
        last_weights=weights,
        last_means=means_post,
        last_latent=z,
    )
    return new_state, estimate


@dataclass
class EnsembleState:
    """Equally weighted ensemble carried by the baseline filter."""

    model: DispersionModel
    network: SensorNetwork
    members: np.ndarray
    rng: np.random.Generator
    step_index: int = 0

    @property
    def size(self) -> int:
        return self.members.shape[0]


def enkf_init(
    model: DispersionModel,
    network: SensorNetwork,
    size: int,
    rng: np.random.Generator,
    mean=None,
    cov=None,
) -> EnsembleState:
    """Draw the initial ensemble from the Gaussian prior."""
    size = int(size)
    if size < 2:
        raise ValueError("ensemble size must be at least 2")
    mean, cov = _initial_moments(model.state_dim, mean, cov)
    try:
        root = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("initial covariance must be positive definite") from exc
    members = mean + rng.standard_normal((size, model.state_dim)) @ root.T
    return EnsembleState(model=model, network=network, members=members, rng=rng)


def enkf_update(
    members: np.ndarray, h: np.ndarray, noise_var, y_hat, perturbations
) -> np.ndarray:
    """Kalman-style ensemble update with explicit observation perturbations.

    The gain uses the sample covariance of ``members``; each member is
    pulled toward its own perturbed copy of the observation.  Passing zero
    perturbations gives the deterministic shift shared by identical
    members.
    """
    members = np.asarray(members, dtype=float)
    count = members.shape[0]
    mean = members.mean(axis=0)
    anomalies = members - mean
    ye = anomalies @ h.T
    denom = max(count - 1, 1)
    s = ye.T @ ye / denom + np.diag(np.asarray(noise_var, dtype=float))
    pht = anomalies.T @ ye / denom
    try:
        gain = np.linalg.solve(s, pht.T).T
    except np.linalg.LinAlgError as exc:
        raise FilterError("ensemble innovation covariance is singular") from exc
    innovations = y_hat + perturbations - members @ h.T
    return members + innovations @ gain.T


def enkf_step(
    state: EnsembleState,
    observation: Union[QuantisedObservation, np.ndarray],
    model: Optional[DispersionModel] = None,
) -> tuple[EnsembleState, np.ndarray]:
    """Advance the ensemble one step; return the new state and ensemble mean.

    Members are propagated with sampled process noise and updated against
    perturbed observations; quantisation contributes additive noise of
    variance ``(cell half-width)^2 / 3`` on top of the sensor noise.
    """
    model = state.model if model is None else model
    net = state.network
    y_hat = np.asarray(getattr(observation, "values", observation), dtype=float)
    if y_hat.shape != (net.count,):
        raise ValueError(
            f"observation must supply {net.count} values, got {y_hat.shape}"
        )

    a_bar = model.augmented_transition()
    root = model.process_noise_root()
    noise = state.rng.standard_normal(state.members.shape) @ root.T
    members = state.members @ a_bar.T + noise

    spread = float((members - members.mean(axis=0)).var(axis=0).mean())
    if spread < 1e-24:
        warnings.warn(
            "ensemble spread has collapsed; consider covariance inflation",
            RuntimeWarning,
        )

    r_eff = net.noise_var + net.cell_half_width ** 2 / 3.0
    perturbations = state.rng.standard_normal((state.size, net.count)) * np.sqrt(
        r_eff
    )
    members = enkf_update(members, net.H, r_eff, y_hat, perturbations)
    estimate = members.mean(axis=0)

    new_state = replace(
        state, model=model, members=members, step_index=state.step_index + 1
    )
    return new_state, estimate


def write_particle_dump(path, records: Sequence[tuple], include_latent: bool = True
                        ) -> None:
    """Write per-step particle snapshots as CSV.

    ``records`` holds ``(step, weights, strengths, latent)`` tuples; the
    latent block is optional.  Columns: step, particle, weight, strength,
    then one column per sensor when latents are included.
    """
    def fmt(x) -> str:
        return format(float(x), ".17g")

    with open(path, "w", encoding="utf-8") as fh:
        header = "step,particle,weight,strength"
        if include_latent and records and records[0][3] is not None:
            n = np.asarray(records[0][3]).shape[1]
            header += "," + ",".join(f"z_{j}" for j in range(n))
        fh.write(header + "\n")
        for step, weights, strengths, latent in records:
            for m in range(len(weights)):
                row = f"{int(step)},{m},{fmt(weights[m])},{fmt(strengths[m])}"
                if include_latent and latent is not None:
                    row += "," + ",".join(fmt(v) for v in np.asarray(latent)[m])
                fh.write(row + "\n")
