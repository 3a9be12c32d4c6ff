"""Two-dimensional triangular meshes: construction, point location, file I/O.

Meshes are conforming triangulations with counter-clockwise element
connectivity.  All geometric helpers work from edge coordinate differences
``x_ij = x_i - x_j`` so that element matrices elsewhere in the package can be
written directly in those terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, TextIO

import numpy as np

__all__ = [
    "MeshError",
    "ElementGeometry",
    "BarycentricEval",
    "TriMesh",
    "build_structured_mesh",
    "element_geometry",
    "shape_functions_at",
    "locate_point",
    "load_mesh",
    "save_mesh",
]


class MeshError(ValueError):
    """Raised when mesh data violates a structural invariant."""


@dataclass(frozen=True)
class ElementGeometry:
    """Geometry of one triangular element.

    Coordinate differences follow the convention ``x_ij = x_i - x_j`` for the
    element's nodes numbered 1..3 in counter-clockwise order, and ``area`` is
    the (positive) triangle area.

    Attributes
    ----------
    coords : numpy.ndarray
        Node coordinates, shape ``(3, 2)``.
    x21, x31, x32, y21, y31, y32 : float
        Signed coordinate differences between node pairs.
    area : float
        Triangle area.
    """

    coords: np.ndarray
    x21: float
    x31: float
    x32: float
    y21: float
    y31: float
    y32: float
    area: float

    @property
    def diameter(self) -> float:
        """Length of the longest edge."""
        d = self.coords[[1, 2, 2]] - self.coords[[0, 0, 1]]
        return float(np.sqrt((d * d).sum(axis=1).max()))


@dataclass(frozen=True)
class BarycentricEval:
    """Shape-function values of one element at one point.

    ``values[i]`` is the i-th linear shape function evaluated at the query
    point.  Inside the element all three values lie in ``[0, 1]`` and sum
    to one.
    """

    element: int
    values: np.ndarray

    @property
    def inside(self) -> bool:
        return bool((self.values >= 0.0).all())


class TriMesh:
    """Immutable triangular mesh.

    Parameters
    ----------
    nodes : array_like
        Node coordinates, shape ``(C, 2)``.
    elements : array_like
        Node index triplets, shape ``(E, 3)``, each in counter-clockwise
        order.

    Raises
    ------
    MeshError
        If an element references a node out of range or twice, has zero or
        negative (clockwise) signed area, or two elements overlap by sharing
        a directed edge.
    """

    def __init__(self, nodes, elements):
        nodes = np.ascontiguousarray(nodes, dtype=float)
        elements = np.ascontiguousarray(elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (C, 2), got {nodes.shape}")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError(
                f"elements must have shape (E, 3), got {elements.shape}"
            )
        if not np.isfinite(nodes).all():
            raise MeshError("node coordinates must be finite")
        n_nodes = nodes.shape[0]
        if elements.size and (elements.min() < 0 or elements.max() >= n_nodes):
            raise MeshError("element references a node index out of range")
        if elements.shape[0] == 0:
            raise MeshError("mesh has no elements")
        same = (
            (elements[:, 0] == elements[:, 1])
            | (elements[:, 0] == elements[:, 2])
            | (elements[:, 1] == elements[:, 2])
        )
        if same.any():
            raise MeshError(
                f"element {int(np.flatnonzero(same)[0])} repeats a node index"
            )

        self.nodes = nodes
        self.elements = elements
        self.nodes.setflags(write=False)
        self.elements.setflags(write=False)

        p1 = nodes[elements[:, 0]]
        p2 = nodes[elements[:, 1]]
        p3 = nodes[elements[:, 2]]
        self._x21 = p2[:, 0] - p1[:, 0]
        self._x31 = p3[:, 0] - p1[:, 0]
        self._x32 = p3[:, 0] - p2[:, 0]
        self._y21 = p2[:, 1] - p1[:, 1]
        self._y31 = p3[:, 1] - p1[:, 1]
        self._y32 = p3[:, 1] - p2[:, 1]
        signed = 0.5 * (self._x21 * self._y31 - self._x31 * self._y21)
        if (signed <= 0.0).any():
            bad = int(np.flatnonzero(signed <= 0.0)[0])
            kind = "degenerate" if signed[bad] == 0.0 else "clockwise"
            raise MeshError(f"element {bad} is {kind} (signed area {signed[bad]:g})")
        self._areas = signed
        self._corners = np.stack([p1, p2, p3], axis=1)  # (E, 3, 2)
        self._check_overlap()

    def _check_overlap(self) -> None:
        # In a conforming CCW triangulation every directed edge appears at
        # most once; a repeat means two elements overlap or one is duplicated.
        e = self.elements
        edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
        packed = edges[:, 0] * self.node_count + edges[:, 1]
        uniq, counts = np.unique(packed, return_counts=True)
        if (counts > 1).any():
            first = uniq[counts > 1][0]
            i, j = divmod(int(first), self.node_count)
            raise MeshError(
                f"directed edge ({i}, {j}) is shared by {int(counts.max())} "
                "elements; elements overlap"
            )

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def element_count(self) -> int:
        return self.elements.shape[0]

    @property
    def areas(self) -> np.ndarray:
        """Element areas, shape ``(E,)``."""
        return self._areas

    @property
    def centroids(self) -> np.ndarray:
        """Element centroids, shape ``(E, 2)``."""
        return self._corners.mean(axis=1)

    def bounding_box(self) -> tuple[float, float, float, float]:
        """Return ``(xmin, ymin, xmax, ymax)`` over all nodes."""
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def shape_values(self, point) -> np.ndarray:
        """Evaluate the three shape functions of every element at ``point``.

        Returns an ``(E, 3)`` array; row ``e`` contains the barycentric
        (linear shape function) values of element ``e`` extended to the whole
        plane.  Used for point location and sensor placement.
        """
        x, y = float(point[0]), float(point[1])
        two_s = 2.0 * self._areas
        c = self._corners
        b1 = (-self._y32 * (x - c[:, 1, 0]) + self._x32 * (y - c[:, 1, 1])) / two_s
        b2 = (self._y31 * (x - c[:, 2, 0]) - self._x31 * (y - c[:, 2, 1])) / two_s
        b3 = (-self._y21 * (x - c[:, 0, 0]) + self._x21 * (y - c[:, 0, 1])) / two_s
        return np.stack([b1, b2, b3], axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (
            self.nodes.shape == other.nodes.shape
            and self.elements.shape == other.elements.shape
            and bool((self.nodes == other.nodes).all())
            and bool((self.elements == other.elements).all())
        )

    def __repr__(self) -> str:
        return f"TriMesh(nodes={self.node_count}, elements={self.element_count})"


def build_structured_mesh(
    x0: float, y0: float, x1: float, y1: float, nx: int, ny: int
) -> TriMesh:
    """Triangulate the rectangle ``[x0, x1] x [y0, y1]`` on a regular grid.

    The rectangle is divided into ``nx`` by ``ny`` cells and each cell is
    split along its lower-left to upper-right diagonal into two
    counter-clockwise triangles.  Nodes are numbered row by row with the x
    index varying fastest; cells are emitted row by row with the
    lower-right triangle of each cell before the upper-left one.

    Returns
    -------
    TriMesh
        Mesh with ``(nx + 1) * (ny + 1)`` nodes and ``2 * nx * ny`` elements.
    """
    nx = int(nx)
    ny = int(ny)
    if nx < 1 or ny < 1:
        raise MeshError(f"grid resolution must be at least 1x1, got {nx}x{ny}")
    if not (x1 > x0 and y1 > y0):
        raise MeshError(
            f"rectangle must have positive extent, got [{x0}, {x1}] x [{y0}, {y1}]"
        )
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)  # row-major over y, x fastest within a row
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b = a + 1
            c = b + (nx + 1)
            d = a + (nx + 1)
            elements[k] = (a, b, c)
            elements[k + 1] = (a, c, d)
            k += 2
    return TriMesh(nodes, elements)


def element_geometry(mesh: TriMesh, element: int) -> ElementGeometry:
    """Return coordinate differences and area for one element."""
    e = int(element)
    if not 0 <= e < mesh.element_count:
        raise MeshError(f"element index {e} out of range")
    coords = mesh._corners[e].copy()
    coords.setflags(write=False)
    return ElementGeometry(
        coords=coords,
        x21=float(mesh._x21[e]),
        x31=float(mesh._x31[e]),
        x32=float(mesh._x32[e]),
        y21=float(mesh._y21[e]),
        y31=float(mesh._y31[e]),
        y32=float(mesh._y32[e]),
        area=float(mesh._areas[e]),
    )


def shape_functions_at(mesh: TriMesh, element: int, point) -> BarycentricEval:
    """Evaluate the linear shape functions of ``element`` at ``point``.

    The values form a partition of unity everywhere in the plane and
    reproduce linear functions exactly; inside the element they are the
    barycentric coordinates of ``point``.
    """
    e = int(element)
    if not 0 <= e < mesh.element_count:
        raise MeshError(f"element index {e} out of range")
    x, y = float(point[0]), float(point[1])
    g = element_geometry(mesh, e)
    two_s = 2.0 * g.area
    (x1, y1), (x2, y2), (x3, y3) = g.coords
    values = np.array(
        [
            (-g.y32 * (x - x2) + g.x32 * (y - y2)) / two_s,
            (g.y31 * (x - x3) - g.x31 * (y - y3)) / two_s,
            (-g.y21 * (x - x1) + g.x21 * (y - y1)) / two_s,
        ]
    )
    return BarycentricEval(element=e, values=values)


def locate_point(mesh: TriMesh, point, tol: float = 1e-10) -> Optional[int]:
    """Find the element containing ``point``.

    A point is accepted when all three shape-function values are at least
    ``-tol``, so points on shared edges or nodes belong to every adjacent
    element; the lowest element index wins.  Returns ``None`` when the point
    lies outside the mesh.
    """
    vals = mesh.shape_values(point)
    inside = (vals >= -tol).all(axis=1)
    if not inside.any():
        return None
    return int(np.argmax(inside))


def _data_lines(stream: TextIO):
    for raw in stream:
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def load_mesh(path) -> TriMesh:
    """Read a mesh from a text file.

    The format is a ``nodes <C>`` header followed by ``C`` lines of ``x y``
    coordinates, then an ``elements <E>`` header followed by ``E`` lines of
    three whitespace-separated node indices.  ``#`` starts a comment and
    blank lines are ignored.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = _data_lines(fh)
        try:
            header = next(lines).split()
            if len(header) != 2 or header[0] != "nodes":
                raise MeshError(f"expected 'nodes <count>' header, got {header!r}")
            n_nodes = int(header[1])
            nodes = np.array(
                [[float(v) for v in next(lines).split()] for _ in range(n_nodes)]
            )
            header = next(lines).split()
            if len(header) != 2 or header[0] != "elements":
                raise MeshError(f"expected 'elements <count>' header, got {header!r}")
            n_elems = int(header[1])
            elements = np.array(
                [[int(v) for v in next(lines).split()] for _ in range(n_elems)],
                dtype=np.int64,
            )
        except StopIteration:
            raise MeshError(f"mesh file {path} ended before all records were read")
        except ValueError as exc:
            raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if nodes.size and nodes.shape[1] != 2:
        raise MeshError("node lines must contain exactly two coordinates")
    if elements.size and elements.shape[1] != 3:
        raise MeshError("element lines must contain exactly three indices")
    return TriMesh(nodes, elements)


def save_mesh(mesh: TriMesh, path) -> None:
    """Write a mesh in the format accepted by :func:`load_mesh`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"nodes {mesh.node_count}\n")
        for x, y in mesh.nodes:
            fh.write(f"{format(float(x), '.17g')} {format(float(y), '.17g')}\n")
        fh.write(f"elements {mesh.element_count}\n")
        for i, j, k in mesh.elements:
            fh.write(f"{int(i)} {int(j)} {int(k)}\n")
