"""Sensor-network model: measurement operator, miss detection, quantisation.

Each static sensor reads the concentration at its position through the mesh
shape functions, so the network is a linear operator H on the augmented
state whose strength column is zero.  A reading is ``y = alpha * Hx + v``
where ``alpha`` is a Bernoulli detection indicator and ``v`` Gaussian noise;
the transmitted value is ``y`` pushed through a uniform quantiser.  The
module also provides the probability kernels of the quantised reading used
for filter weighting, with log-space variants that stay finite far into the
Gaussian tails.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr

from plumetrace.mesh import TriMesh, locate_point, shape_functions_at

__all__ = [
    "Quantiser",
    "SensorNetwork",
    "QuantisedObservation",
    "build_measurement_matrix",
    "generate_positions",
    "simulate_measurement",
    "cell_probability",
    "log_cell_probability",
    "observation_likelihood",
    "log_observation_likelihood",
    "load_sensor_layout",
    "save_sensor_layout",
]


@dataclass(frozen=True)
class Quantiser:
    """Uniform quantiser over ``[-scale, scale]`` with ``num_levels`` cells.

    Level h (0-based) has the reproduction value
    ``-scale + (2h + 1) * scale / num_levels``; the levels are equally
    spaced, symmetric about zero, and each owns a cell of half-width
    ``scale / num_levels``.  Inputs outside the range saturate to the
    nearest extreme level, and the upper boundary ``y = scale`` maps to the
    top level.
    """

    scale: float
    num_levels: int

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"quantiser scale must be positive, got {self.scale}")
        if int(self.num_levels) != self.num_levels or self.num_levels < 1:
            raise ValueError(
                f"level count must be a positive integer, got {self.num_levels}"
            )
        object.__setattr__(self, "num_levels", int(self.num_levels))

    @property
    def cell_half_width(self) -> float:
        return self.scale / self.num_levels

    def level_values(self) -> np.ndarray:
        """All reproduction values in ascending order, shape ``(num_levels,)``."""
        h = np.arange(self.num_levels)
        return -self.scale + (2.0 * h + 1.0) * self.scale / self.num_levels

    def quantise(self, y):
        """Map measurements to their level values (scalar or array)."""
        return _quantise(np.asarray(y, dtype=float), self.scale, self.num_levels)


def _quantise(y: np.ndarray, scale, num_levels):
    h = np.floor((y + scale) * num_levels / (2.0 * scale))
    h = np.clip(h, 0, np.asarray(num_levels) - 1)
    out = -scale + (2.0 * h + 1.0) * scale / num_levels
    if np.ndim(out) == 0:
        return float(out)
    return out


def _log_gauss_cell_mass(lo, hi, mean, var) -> np.ndarray:
    """``log(P(lo <= X < hi))`` for ``X ~ N(mean, var)``, stable in far tails.

    Both bounds are reflected into the lower tail, where ``log_ndtr`` keeps
    full precision, and the difference of CDFs is taken through ``expm1`` so
    cells tens of standard deviations from the mean still produce finite
    logs.  Infinite bounds give the corresponding tail mass.
    """
    sd = np.sqrt(var)
    a = (np.asarray(lo, dtype=float) - mean) / sd
    b = (np.asarray(hi, dtype=float) - mean) / sd
    flip = (a + b) > 0.0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)
    log_hi = log_ndtr(b)
    diff = log_ndtr(a) - log_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_hi + np.log(-np.expm1(diff))
    return np.where(diff < 0.0, out, -np.inf)


def log_cell_probability(q: Quantiser, level, mean, var):
    """Log Gaussian mass of a level's quantisation cell.

    The cell is ``[level - w, level + w)`` with ``w`` the cell half-width.
    """
    var = np.asarray(var, dtype=float)
    if (var <= 0.0).any():
        raise ValueError("variance must be positive")
    w = q.cell_half_width
    level = np.asarray(level, dtype=float)
    out = _log_gauss_cell_mass(level - w, level + w, np.asarray(mean, dtype=float), var)
    if np.ndim(out) == 0:
        return float(out)
    return out


def cell_probability(q: Quantiser, level, mean, var):
    """Gaussian probability mass of a level's quantisation cell."""
    out = np.exp(log_cell_probability(q, level, mean, var))
    if np.ndim(out) == 0:
        return float(out)
    return out


def _log_mixture(log_detect, log_miss, detect_rate):
    detect_rate = np.asarray(detect_rate, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.logaddexp(
            np.log(detect_rate) + log_detect,
            np.log1p(-detect_rate) + log_miss,
        )
    return out


def log_observation_likelihood(q: Quantiser, y_hat, z, noise_var, detect_rate):
    """Log probability of receiving level ``y_hat`` given latent signal ``z``.

    Mixture of the detection branch (reading centred at ``z``) and the miss
    branch (centred at zero, the noise alone), weighted by the detection
    probability.
    """
    log_detect = log_cell_probability(q, y_hat, z, noise_var)
    log_miss = log_cell_probability(q, y_hat, 0.0, noise_var)
    out = _log_mixture(log_detect, log_miss, detect_rate)
    if np.ndim(out) == 0:
        return float(out)
    return out


def observation_likelihood(q: Quantiser, y_hat, z, noise_var, detect_rate):
    """Probability of receiving level ``y_hat`` given latent signal ``z``."""
    out = np.exp(log_observation_likelihood(q, y_hat, z, noise_var, detect_rate))
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class QuantisedObservation:
    """One network reading: quantised values plus simulation-only truth."""

    values: np.ndarray
    detections: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None


def build_measurement_matrix(mesh: TriMesh, positions) -> np.ndarray:
    """Measurement operator of a static sensor set, shape ``(N, C + 1)``.

    Row j holds the shape-function values of the element containing sensor
    j at that element's node columns; the final (strength) column is zero.
    Rows therefore have at most three nonzeros summing to one.

    Raises
    ------
    ValueError
        If a sensor position lies outside the mesh.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.shape[1] != 2:
        raise ValueError(f"positions must have shape (N, 2), got {positions.shape}")
    h = np.zeros((positions.shape[0], mesh.node_count + 1))
    for j, p in enumerate(positions):
        element = locate_point(mesh, p)
        if element is None:
            raise ValueError(
                f"sensor {j} at ({p[0]:g}, {p[1]:g}) lies outside the mesh"
            )
        values = shape_functions_at(mesh, element, p).values
        h[j, mesh.elements[element]] = values
    return h


def generate_positions(mesh: TriMesh, count: int, rng) -> np.ndarray:
    """Sample ``count`` positions uniformly over the mesh.

    Draws uniformly over the bounding box and rejects points outside the
    mesh, so the accepted points are uniform over the meshed region.
    """
    count = int(count)
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    xmin, ymin, xmax, ymax = mesh.bounding_box()
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < count:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError(
                "rejection sampling failed; mesh covers too little of its "
                "bounding box"
            )
        batch = rng.random((max(count, 64), 2))
        batch[:, 0] = xmin + batch[:, 0] * (xmax - xmin)
        batch[:, 1] = ymin + batch[:, 1] * (ymax - ymin)
        for p in batch:
            if locate_point(mesh, p) is not None:
                accepted.append(p)
                if len(accepted) == count:
                    break
    return np.array(accepted).reshape(count, 2)


def fence_positions(mesh: TriMesh, center, count: int) -> np.ndarray:
    """Deterministic monitoring array around a known release point.

    Builds concentric square rings of sensors centred on ``center`` with
    ring spacing equal to the median element diameter: the four diagonal
    corners at one spacing, the full perimeter at two spacings, an evenly
    thinned perimeter at three spacings, and the remainder on a coarse
    grid over the mesh bounding box for background coverage.  On a
    structured mesh whose node spacing matches the element diameter and
    with ``center`` on a node, every ring sensor lands exactly on a node.

    Positions falling outside the mesh raise, as the measurement operator
    cannot interpolate there; keep the fence clear of the boundary.
    """
    count = int(count)
    if count < 4:
        raise ValueError(f"a fence needs at least 4 sensors, got {count}")
    center = np.asarray(center, dtype=float).reshape(2)
    spacing = float(np.median(np.sqrt(2.0 * mesh.areas)))

    def ring(level: int) -> np.ndarray:
        span = np.arange(-level, level + 1)
        pts = [
            (i, j)
            for i in span
            for j in span
            if max(abs(i), abs(j)) == level
        ]
        return center + spacing * np.array(pts, dtype=float)

    corners = center + spacing * np.array(
        [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)])
    parts = [corners]
    for level, take in ((2, 16), (3, 12)):
        remaining = count - sum(len(p) for p in parts)
        if remaining <= 0:
            break
        full = ring(level)
        take = min(take, remaining, len(full))
        idx = np.unique(
            np.linspace(0, len(full) - 1, take).round().astype(int))
        parts.append(full[idx])
    remaining = count - sum(len(p) for p in parts)
    if remaining > 0:
        xmin, ymin, xmax, ymax = mesh.bounding_box()
        ncols = max(int(np.ceil(np.sqrt(2.0 * remaining))), 1)
        nrows = max(int(np.ceil(remaining / ncols)), 1)
        xs = xmin + (np.arange(ncols) + 0.5) * (xmax - xmin) / ncols
        ys = ymin + (np.arange(nrows) + 0.5) * (ymax - ymin) / nrows
        gx, gy = np.meshgrid(xs, ys)
        bg = np.column_stack([gx.ravel(), gy.ravel()])[:remaining]
        parts.append(bg)
    positions = np.vstack(parts)[:count]
    for p in positions:
        if locate_point(mesh, p) is None:
            raise ValueError(
                f"fence sensor at ({p[0]:g}, {p[1]:g}) falls outside the "
                "mesh; move the fence away from the boundary"
            )
    return positions


def simulate_measurement(h, state_vector, alpha, noise):
    """Pre-quantisation reading ``y = alpha * (h @ x) + noise``.

    ``h`` may be a single measurement row or the full matrix with matching
    vector draws.  The noise is added whether or not the signal was
    detected.
    """
    h = np.asarray(h, dtype=float)
    x = np.asarray(state_vector, dtype=float)
    signal = h @ x
    out = np.asarray(alpha, dtype=float) * signal + np.asarray(noise, dtype=float)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _per_sensor(values, count: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(count, float(arr))
    if arr.shape != (count,):
        raise ValueError(f"{name} must be scalar or shape ({count},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SensorNetwork:
    """Static sensors with per-sensor noise, detection and quantiser settings.

    Attributes
    ----------
    positions : numpy.ndarray
        Sensor locations, shape ``(N, 2)``.
    H : numpy.ndarray
        Measurement operator on the augmented state, shape ``(N, C + 1)``.
    noise_var : numpy.ndarray
        Measurement noise variances, positive, shape ``(N,)``.
    detect_rate : numpy.ndarray
        Probability that the signal term is present in each reading (misses
        occur with the complementary probability), in ``[0, 1]``.
    scale, levels : numpy.ndarray
        Per-sensor quantiser range bound and level count.
    """

    positions: np.ndarray
    H: np.ndarray
    noise_var: np.ndarray
    detect_rate: np.ndarray
    scale: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.H.shape[0] != n:
            raise ValueError("measurement matrix row count must match positions")
        if (self.noise_var <= 0.0).any():
            raise ValueError("noise variances must be positive")
        if ((self.detect_rate < 0.0) | (self.detect_rate > 1.0)).any():
            raise ValueError("detection rates must lie in [0, 1]")
        if (self.scale <= 0.0).any():
            raise ValueError("quantiser scales must be positive")
        if (self.levels < 1).any():
            raise ValueError("quantiser level counts must be positive")
        if self.H.size and np.abs(self.H[:, -1]).max() != 0.0:
            raise ValueError("strength column of the measurement matrix must be zero")
        for arr in (self.positions, self.H, self.noise_var, self.detect_rate,
                    self.scale, self.levels):
            arr.setflags(write=False)

    @classmethod
    def build(cls, mesh: TriMesh, positions, noise_var, detect_rate,
              scale, levels) -> "SensorNetwork":
        """Construct the network for ``positions`` on ``mesh``.

        Scalar parameters are broadcast to every sensor.
        """
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        n = positions.shape[0]
        h = build_measurement_matrix(mesh, positions)
        lv = np.asarray(levels)
        if np.ndim(lv) == 0:
            lv = np.full(n, int(lv))
        lv = lv.astype(np.int64)
        return cls(
            positions=positions.copy(),
            H=h,
            noise_var=_per_sensor(noise_var, n, "noise_var"),
            detect_rate=_per_sensor(detect_rate, n, "detect_rate"),
            scale=_per_sensor(scale, n, "scale"),
            levels=lv,
        )

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def cell_half_width(self) -> np.ndarray:
        return self.scale / self.levels

    @property
    def proposal_log_density(self) -> np.ndarray:
        """Log density of a uniform draw over one quantisation cell."""
        return np.log(self.levels / (2.0 * self.scale))

    def quantiser(self, j: int) -> Quantiser:
        return Quantiser(scale=float(self.scale[j]), num_levels=int(self.levels[j]))

    def quantise(self, y) -> np.ndarray:
        """Quantise readings; the last axis indexes sensors."""
        y = np.asarray(y, dtype=float)
        return _quantise(y, self.scale, self.levels)

    def log_likelihood(self, y_hat, z) -> np.ndarray:
        """Log mixture likelihood of received levels, vectorised.

        ``y_hat`` has shape ``(N,)`` and ``z`` any shape broadcastable with
        it (e.g. ``(M, N)`` for a particle population); the result follows
        the broadcast shape.
        """
        y_hat = np.asarray(y_hat, dtype=float)
        z = np.asarray(z, dtype=float)
        w = self.cell_half_width
        log_detect = _log_gauss_cell_mass(y_hat - w, y_hat + w, z, self.noise_var)
        log_miss = _log_gauss_cell_mass(y_hat - w, y_hat + w, 0.0, self.noise_var)
        return _log_mixture(log_detect, log_miss, self.detect_rate)


def save_sensor_layout(network: SensorNetwork, path) -> None:
    """Write the layout as one ``x y scale levels noise_var detect_rate`` line
    per sensor."""
    def fmt(x: float) -> str:
        return format(float(x), ".17g")

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y scale levels noise_var detect_rate\n")
        for j in range(network.count):
            fh.write(
                f"{fmt(network.positions[j, 0])} {fmt(network.positions[j, 1])} "
                f"{fmt(network.scale[j])} {int(network.levels[j])} "
                f"{fmt(network.noise_var[j])} {fmt(network.detect_rate[j])}\n"
            )


def load_sensor_layout(path, mesh: TriMesh) -> SensorNetwork:
    """Read a sensor layout file and build its network on ``mesh``."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(
                    f"sensor line must have 6 fields "
                    f"(x y scale levels noise_var detect_rate), got {line!r}"
                )
            rows.append([float(v) for v in parts])
    if not rows:
        raise ValueError(f"sensor layout file {path} contains no sensors")
    data = np.array(rows)
    return SensorNetwork.build(
        mesh,
        positions=data[:, :2],
        noise_var=data[:, 4],
        detect_rate=data[:, 5],
        scale=data[:, 2],
        levels=data[:, 3].astype(np.int64),
    )
