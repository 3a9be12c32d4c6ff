"""Time-varying 2-D velocity fields for the transport model.

Provides analytic flows for synthetic studies and gridded flows read from
text files, both queried through the same interface: a velocity at an
arbitrary point and time.  Gridded data is interpolated bilinearly in space
and linearly in time; grid cells marked as missing (land) contribute zero
velocity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from plumetrace.mesh import TriMesh

__all__ = [
    "FlowField",
    "UniformFlow",
    "RigidRotationFlow",
    "GriddedFlow",
    "velocity_at",
    "element_velocities",
    "load_gridded_flow",
    "save_gridded_flow",
]


@runtime_checkable
class FlowField(Protocol):
    """Anything that can report a velocity at a point and time."""

    def velocity(self, point, t: float) -> tuple[float, float]: ...

    def velocity_many(self, points, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class UniformFlow:
    """Spatially and temporally constant flow; ``UniformFlow(0, 0)`` is rest."""

    u: float = 0.0
    v: float = 0.0

    def velocity(self, point, t: float) -> tuple[float, float]:
        return self.u, self.v

    def velocity_many(self, points, t: float) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        out = np.empty((points.shape[0], 2))
        out[:, 0] = self.u
        out[:, 1] = self.v
        return out


@dataclass(frozen=True)
class RigidRotationFlow:
    """Solid-body rotation about ``center`` with angular rate ``omega``.

    At position p the velocity is ``omega x (p - center)`` in the plane,
    i.e. ``(-omega dy, omega dx)``.
    """

    center: tuple[float, float] = (0.0, 0.0)
    omega: float = 0.0

    def velocity(self, point, t: float) -> tuple[float, float]:
        dx = float(point[0]) - self.center[0]
        dy = float(point[1]) - self.center[1]
        return -self.omega * dy, self.omega * dx

    def velocity_many(self, points, t: float) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        out = np.empty((points.shape[0], 2))
        out[:, 0] = -self.omega * (points[:, 1] - self.center[1])
        out[:, 1] = self.omega * (points[:, 0] - self.center[0])
        return out


class GriddedFlow:
    """Velocity samples on a regular space-time grid.

    Parameters
    ----------
    xs, ys : array_like
        Strictly ascending grid coordinates in metres.
    ts : array_like
        Strictly ascending sample times in seconds.
    u, v : array_like
        Velocity components indexed ``(time, y, x)``.  ``NaN`` marks missing
        (land) cells, which are treated as zero velocity during
        interpolation.

    Queries outside the spatial bounding box or the time range raise
    ``ValueError``.
    """

    def __init__(self, xs, ys, ts, u, v):
        xs = np.ascontiguousarray(xs, dtype=float)
        ys = np.ascontiguousarray(ys, dtype=float)
        ts = np.ascontiguousarray(ts, dtype=float)
        u = np.ascontiguousarray(u, dtype=float)
        v = np.ascontiguousarray(v, dtype=float)
        for name, arr in (("xs", xs), ("ys", ys), ("ts", ts)):
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{name} must be a non-empty 1-D array")
            if arr.size > 1 and not (np.diff(arr) > 0.0).all():
                raise ValueError(f"{name} must be strictly increasing")
        shape = (ts.size, ys.size, xs.size)
        if u.shape != shape or v.shape != shape:
            raise ValueError(
                f"velocity arrays must have shape (nt, ny, nx) = {shape}, "
                f"got {u.shape} and {v.shape}"
            )
        self.xs = xs
        self.ys = ys
        self.ts = ts
        # Missing cells (land) contribute zero velocity to interpolation.
        self.mask = np.isnan(u) | np.isnan(v)
        self.u = np.where(self.mask, 0.0, u)
        self.v = np.where(self.mask, 0.0, v)
        for arr in (self.xs, self.ys, self.ts, self.u, self.v, self.mask):
            arr.setflags(write=False)

    @property
    def t_first(self) -> float:
        return float(self.ts[0])

    @property
    def t_last(self) -> float:
        return float(self.ts[-1])

    def _axis_weights(self, coords: np.ndarray, q: np.ndarray, name: str):
        lo, hi = coords[0], coords[-1]
        if (q < lo).any() or (q > hi).any():
            bad = q[(q < lo) | (q > hi)][0]
            raise ValueError(
                f"{name} query {bad:g} outside grid range [{lo:g}, {hi:g}]"
            )
        idx = np.clip(np.searchsorted(coords, q, side="right") - 1, 0,
                      max(coords.size - 2, 0))
        if coords.size == 1:
            return idx, np.zeros_like(q)
        w = (q - coords[idx]) / (coords[idx + 1] - coords[idx])
        return idx, w

    def velocity_many(self, points, t: float) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        qx = points[:, 0]
        qy = points[:, 1]
        ix, wx = self._axis_weights(self.xs, qx, "x")
        iy, wy = self._axis_weights(self.ys, qy, "y")
        it, wt = self._axis_weights(self.ts, np.asarray([float(t)]), "time")
        it, wt = int(it[0]), float(wt[0])

        def bilinear(samples: np.ndarray) -> np.ndarray:
            ix1 = np.minimum(ix + 1, self.xs.size - 1)
            iy1 = np.minimum(iy + 1, self.ys.size - 1)
            s00 = samples[iy, ix]
            s01 = samples[iy, ix1]
            s10 = samples[iy1, ix]
            s11 = samples[iy1, ix1]
            return (
                s00 * (1 - wx) * (1 - wy)
                + s01 * wx * (1 - wy)
                + s10 * (1 - wx) * wy
                + s11 * wx * wy
            )

        out = np.empty((points.shape[0], 2))
        for comp, samples in ((0, self.u), (1, self.v)):
            lo = bilinear(samples[it])
            if wt > 0.0:
                hi = bilinear(samples[min(it + 1, self.ts.size - 1)])
                out[:, comp] = lo * (1 - wt) + hi * wt
            else:
                out[:, comp] = lo
        return out

    def velocity(self, point, t: float) -> tuple[float, float]:
        uv = self.velocity_many(np.asarray(point, dtype=float)[None, :], t)
        return float(uv[0, 0]), float(uv[0, 1])

    def __repr__(self) -> str:
        return (
            f"GriddedFlow(nx={self.xs.size}, ny={self.ys.size}, "
            f"nt={self.ts.size})"
        )


def velocity_at(flow: FlowField, point, t: float) -> tuple[float, float]:
    """Velocity of ``flow`` at ``point`` and time ``t`` as a ``(u, v)`` pair."""
    return flow.velocity(point, t)


def element_velocities(flow: FlowField, mesh: TriMesh, t: float) -> np.ndarray:
    """Flow sampled at every element centroid, shape ``(E, 2)``."""
    return flow.velocity_many(mesh.centroids, t)


def load_gridded_flow(path) -> GriddedFlow:
    """Read a gridded flow from a text file.

    The format is a ``grid <nx> <ny> <nt>`` header, then ``xs:``, ``ys:``
    and ``ts:`` lines listing the grid coordinates, then ``nt`` blocks of
    ``ny * nx`` lines of ``u v`` samples ordered row-major with y outermost.
    Missing (land) cells are written as ``nan nan``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = []
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.append(line)
    if not tokens or not tokens[0].startswith("grid"):
        raise ValueError(f"flow file {path} must start with a 'grid' header")
    try:
        _, nx, ny, nt = tokens[0].split()
        nx, ny, nt = int(nx), int(ny), int(nt)
        axes = {}
        for i, name in enumerate(("xs", "ys", "ts")):
            label, _, rest = tokens[1 + i].partition(":")
            if label.strip() != name:
                raise ValueError(f"expected '{name}:' line, got {tokens[1 + i]!r}")
            values = np.array([float(v) for v in rest.split()])
            expected = {"xs": nx, "ys": ny, "ts": nt}[name]
            if values.size != expected:
                raise ValueError(
                    f"'{name}:' line has {values.size} values, expected {expected}"
                )
            axes[name] = values
        samples = tokens[4:]
        if len(samples) != nt * ny * nx:
            raise ValueError(
                f"expected {nt * ny * nx} sample lines, found {len(samples)}"
            )
        uv = np.array([[float(v) for v in line.split()] for line in samples])
        if uv.ndim != 2 or uv.shape[1] != 2:
            raise ValueError("sample lines must contain exactly 'u v'")
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed flow file {path}: {exc}") from exc
    u = uv[:, 0].reshape(nt, ny, nx)
    v = uv[:, 1].reshape(nt, ny, nx)
    return GriddedFlow(axes["xs"], axes["ys"], axes["ts"], u, v)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_gridded_flow(flow: GriddedFlow, path) -> None:
    """Write a gridded flow in the format accepted by :func:`load_gridded_flow`."""
    u = np.where(flow.mask, np.nan, flow.u)
    v = np.where(flow.mask, np.nan, flow.v)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"grid {flow.xs.size} {flow.ys.size} {flow.ts.size}\n")
        fh.write("xs: " + " ".join(_fmt(x) for x in flow.xs) + "\n")
        fh.write("ys: " + " ".join(_fmt(y) for y in flow.ys) + "\n")
        fh.write("ts: " + " ".join(_fmt(t) for t in flow.ts) + "\n")
        for k in range(flow.ts.size):
            for j in range(flow.ys.size):
                for i in range(flow.xs.size):
                    fh.write(f"{_fmt(u[k, j, i])} {_fmt(v[k, j, i])}\n")
