"""Uniform tensor grids, nodal fields, and the cell-based calculus built on them.

The domain is a 1D interval or a 2D axis-aligned rectangle discretized by a
uniform tensor grid. All differential structure used elsewhere in the package
is derived from per-cell quantities: a cell gradient (forward differences in
1D, averaged edge differences in 2D) and a midpoint-rule cell quadrature.
Defining everything cellwise keeps the discrete energy a smooth function of
the nodal values, so its exact derivative is available in closed form.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "build_grid",
    "midpoint_gradient",
    "integrate_cells",
    "smooth_random_field",
    "write_field_csv",
    "read_field_csv",
]


@dataclass(frozen=True)
class Grid:
    """Uniform tensor discretization of an interval or rectangle.

    Attributes
    ----------
    dimension : 1 or 2
    extent : physical length per axis
    nodes : node count per axis (at least 3)
    spacing : node spacing per axis, ``extent[k] / (nodes[k] - 1)``
    """

    dimension: int
    extent: tuple[float, ...]
    nodes: tuple[int, ...]
    spacing: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if len(self.extent) != self.dimension or len(self.nodes) != self.dimension:
            raise ValueError("extent/nodes length must match dimension")
        for L in self.extent:
            if not np.isfinite(L) or L <= 0.0:
                raise ValueError(f"extent must be positive and finite, got {L}")
        for n in self.nodes:
            if n < 3:
                raise ValueError(f"need at least 3 nodes per axis, got {n}")
        object.__setattr__(
            self,
            "spacing",
            tuple(L / (n - 1) for L, n in zip(self.extent, self.nodes)),
        )

    # -- shapes and index sets -------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def node_count(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.nodes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def node_volume(self) -> float:
        # dual-cell volume of an interior node; equals the cell volume on a
        # uniform grid
        return self.cell_volume

    @property
    def boundary_mask(self) -> np.ndarray:
        """Boolean array over nodes, True on the boundary."""
        m = np.zeros(self.shape, dtype=bool)
        if self.dimension == 1:
            m[0] = m[-1] = True
        else:
            m[0, :] = m[-1, :] = True
            m[:, 0] = m[:, -1] = True
        m.flags.writeable = False
        return m

    @property
    def interior_mask(self) -> np.ndarray:
        m = ~self.boundary_mask
        m.flags.writeable = False
        return m

    @property
    def boundary_indices(self) -> np.ndarray:
        """Flat indices (row-major) of boundary nodes, sorted."""
        return np.flatnonzero(self.boundary_mask.ravel())

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask.ravel())

    # -- coordinates ------------------------------------------------------

    def axis_coordinates(self, k: int) -> np.ndarray:
        return np.linspace(0.0, self.extent[k], self.nodes[k])

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Node coordinate arrays, shaped like the node lattice."""
        axes = [self.axis_coordinates(k) for k in range(self.dimension)]
        if self.dimension == 1:
            return (axes[0],)
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def boundary_distance(self) -> np.ndarray:
        """Distance from each node to the nearest boundary face."""
        coords = self.coordinates()
        d = np.minimum(coords[0], self.extent[0] - coords[0])
        if self.dimension == 2:
            d = np.minimum(d, np.minimum(coords[1], self.extent[1] - coords[1]))
        return d


@dataclass(frozen=True)
class Field:
    """One finite scalar per grid node. Immutable once constructed."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            if v.size == self.grid.node_count:
                v = v.reshape(self.grid.shape)
            else:
                raise ValueError(
                    f"value count {v.size} does not match grid node count "
                    f"{self.grid.node_count}"
                )
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must all be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values)

    def sup_distance(self, other: "Field") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def build_grid(dimension: int, extent, nodes_per_axis) -> Grid:
    """Construct a uniform grid; scalars are broadcast to every axis."""
    if dimension not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {dimension}")
    if np.isscalar(extent):
        extent = (float(extent),) * dimension
    else:
        extent = tuple(float(L) for L in extent)
    if np.isscalar(nodes_per_axis):
        nodes = (int(nodes_per_axis),) * dimension
    else:
        nodes = tuple(int(n) for n in nodes_per_axis)
    return Grid(dimension=dimension, extent=extent, nodes=nodes)


def midpoint_gradient(f: Field) -> np.ndarray:
    """Per-cell gradient of a nodal field.

    1D: forward difference on each cell, shape ``(n-1, 1)``.
    2D: each component is the average of the two parallel edge differences of
    the cell, shape ``(nx-1, ny-1, 2)``. Exact for affine fields.
    """
    g = f.grid
    u = f.values
    if g.dimension == 1:
        gx = np.diff(u) / g.spacing[0]
        return gx[:, None]
    hx, hy = g.spacing
    gx = ((u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])) / (2.0 * hx)
    gy = ((u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])) / (2.0 * hy)
    return np.stack([gx, gy], axis=-1)


def integrate_cells(grid: Grid, cell_values: np.ndarray) -> float:
    """Midpoint-rule integral: sum of cell values times the cell volume."""
    cv = np.asarray(cell_values, dtype=float)
    if cv.shape != grid.cell_shape:
        raise ValueError(
            f"cell value shape {cv.shape} does not match cell lattice "
            f"{grid.cell_shape}"
        )
    return float(cv.sum() * grid.cell_volume)


def cell_average(grid: Grid, nodal: np.ndarray) -> np.ndarray:
    """Average of the cell's corner nodes, one value per cell."""
    if grid.dimension == 1:
        return 0.5 * (nodal[:-1] + nodal[1:])
    return 0.25 * (nodal[:-1, :-1] + nodal[1:, :-1] + nodal[:-1, 1:] + nodal[1:, 1:])


def smooth_random_field(grid: Grid, rng: np.random.Generator, n_modes: int = 8) -> np.ndarray:
    """Boundary-vanishing random field built from the lowest sine modes.

    Standard-normal coefficients on the ``n_modes`` lowest discrete modes
    (ordered by frequency), so samples stay mesh-resolvable and reproducible
    from the generator state.
    """
    coords = grid.coordinates()
    out = np.zeros(grid.shape)
    if grid.dimension == 1:
        x = coords[0] / grid.extent[0]
        for j in range(1, n_modes + 1):
            out += rng.standard_normal() * np.sin(j * np.pi * x)
        return out
    x = coords[0] / grid.extent[0]
    y = coords[1] / grid.extent[1]
    pairs = sorted(
        ((i, j) for i in range(1, n_modes + 1) for j in range(1, n_modes + 1)),
        key=lambda ij: (ij[0] ** 2 + ij[1] ** 2, ij),
    )[:n_modes]
    for i, j in pairs:
        out += rng.standard_normal() * np.sin(i * np.pi * x) * np.sin(j * np.pi * y)
    return out


# -- snapshot format ------------------------------------------------------
#
# One node per line in row-major order, full double precision. The reader can
# rebuild the grid from the coordinates, so snapshots are self-contained.

def write_field_csv(f: Field, path) -> None:
    g = f.grid
    coords = g.coordinates()
    flat = [c.ravel() for c in coords]
    vals = f.values.ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"] if g.dimension == 1 else ["x", "y", "value"])
        for i in range(vals.size):
            w.writerow([f"{c[i]:.17g}" for c in flat] + [f"{vals[i]:.17g}"])


def read_field_csv(path, grid: Grid | None = None) -> Field:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(x) for x in row] for row in r if row]
    data = np.asarray(rows)
    dim = len(header) - 1
    if dim not in (1, 2):
        raise ValueError(f"unrecognized field csv header: {header}")
    if grid is None:
        grid = _infer_grid(data[:, :dim], dim)
    vals = data[:, dim].reshape(grid.shape)
    return Field(grid, vals)


def _infer_grid(coords: np.ndarray, dim: int) -> Grid:
    if dim == 1:
        x = coords[:, 0]
        n = x.size
        if n < 3 or not np.allclose(np.diff(x), x[1] - x[0], rtol=0, atol=1e-12):
            raise ValueError("cannot infer a uniform 1D grid from coordinates")
        return build_grid(1, float(x[-1] - x[0]), n)
    x, y = coords[:, 0], coords[:, 1]
    ny = int(np.argmax(x > x[0])) if np.any(x > x[0]) else 0
    if ny == 0 or coords.shape[0] % ny != 0:
        raise ValueError("cannot infer a 2D grid from coordinates")
    nx = coords.shape[0] // ny
    return build_grid(2, (float(x[-1] - x[0]), float(y[ny - 1] - y[0])), (nx, ny))
