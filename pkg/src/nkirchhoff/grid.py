"""Tensor-product grids, zero-trace fields and quadrature.

Square and cube domains use vertex nodes on a uniform tensor grid with
cell-centered gradients (the gradient of the multilinear interpolant
evaluated at the cell midpoint, exact for affine functions).  The disk is a
masked Cartesian grid over [-1,1]^2: nodes outside the unit circle are
pinned to zero and boundary-cut cells carry their exactly-computed covered
area as quadrature weight, so the weights sum to pi at machine precision.

Nodal quadrature weights are the cell weights shared equally among cell
corners, which reproduces trapezoidal weights on the full tensor domains.

The discrete W^{1,n} seminorm is

    seminorm_pow(u) = sum_cells w_c |grad u|_c^n ,   norm = (...)^(1/n)

and ``kirchhoff_flux_divergence`` assembles its exact nodal gradient
divided by n, i.e. the weak n-Laplacian tested against the nodal basis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import NKirchhoffError

_SHAPES = ("square", "disk", "cube")
_SHAPE_CODES = {"square": b"SQ", "disk": b"DK", "cube": b"CU"}
_CODE_SHAPES = {v: k for k, v in _SHAPE_CODES.items()}


def _corner_area(a, b, r):
    """Area of {x^2+y^2 < r^2} intersected with [0,a] x [0,b], a,b >= 0."""
    a = np.minimum(a, r)
    b = np.minimum(b, r)
    x1 = np.minimum(a, np.sqrt(np.maximum(r * r - b * b, 0.0)))

    def F(x):
        return 0.5 * (x * np.sqrt(np.maximum(r * r - x * x, 0.0))
                      + r * r * np.arcsin(np.clip(x / r, -1.0, 1.0)))

    return b * x1 + F(a) - F(x1)


def disk_cell_areas(x0, x1, y0, y1, r=1.0):
    """Exact area of the unit disk covered by each cell [x0,x1]x[y0,y1]."""
    def Q(x, y):
        return np.sign(x) * np.sign(y) * _corner_area(np.abs(x), np.abs(y), r)

    return Q(x1, y1) - Q(x0, y1) - Q(x1, y0) + Q(x0, y0)


@dataclass
class Grid:
    """Discretisation of the domain; immutable after construction."""

    shape: str
    n: int
    resolution: int
    h: float
    coords: np.ndarray                 # (num_nodes, n)
    node_weights: np.ndarray           # (num_nodes,)
    cell_weights: np.ndarray           # (num_cells,) flattened C-order
    boundary_mask: np.ndarray          # True where the nodal value is pinned to 0
    interior_idx: np.ndarray           # indices of unknown nodes
    _stiffness: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def unit_square(resolution: int, centered: bool = False) -> "Grid":
        return _tensor_grid("square", 2, resolution, centered)

    @staticmethod
    def unit_cube(resolution: int, centered: bool = False) -> "Grid":
        return _tensor_grid("cube", 3, resolution, centered)

    @staticmethod
    def unit_disk(resolution: int) -> "Grid":
        return _disk_grid(resolution)

    @staticmethod
    def make(shape: str, resolution: int, centered: bool = False) -> "Grid":
        if shape == "square":
            return Grid.unit_square(resolution, centered)
        if shape == "cube":
            return Grid.unit_cube(resolution, centered)
        if shape == "disk":
            return Grid.unit_disk(resolution)
        raise NKirchhoffError(f"unknown domain shape {shape!r}")

    # -- basic geometry -----------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def nodes_per_axis(self) -> int:
        return self.resolution + 1

    @property
    def measure(self) -> float:
        return float(self.cell_weights.sum())

    @property
    def inradius(self) -> float:
        if self.shape == "disk":
            return 1.0
        return 0.5  # unit square / cube

    @property
    def center(self) -> np.ndarray:
        if self.shape == "disk":
            return np.zeros(self.n)
        return self.coords.mean(axis=0)

    def _grid_shape(self):
        return (self.nodes_per_axis,) * self.n

    def _cells_shape(self):
        return (self.resolution,) * self.n

    # -- gradients and the seminorm ----------------------------------------

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        """Gradient of the multilinear interpolant at cell centers,
        shape (num_cells, n)."""
        u = values.reshape(self._grid_shape())
        h = self.h
        if self.n == 2:
            gx = (u[1:, :-1] - u[:-1, :-1] + u[1:, 1:] - u[:-1, 1:]) / (2 * h)
            gy = (u[:-1, 1:] - u[:-1, :-1] + u[1:, 1:] - u[1:, :-1]) / (2 * h)
            return np.stack([gx.ravel(), gy.ravel()], axis=1)
        gx = (u[1:, :-1, :-1] - u[:-1, :-1, :-1] + u[1:, 1:, :-1] - u[:-1, 1:, :-1]
              + u[1:, :-1, 1:] - u[:-1, :-1, 1:] + u[1:, 1:, 1:] - u[:-1, 1:, 1:]) / (4 * h)
        gy = (u[:-1, 1:, :-1] - u[:-1, :-1, :-1] + u[1:, 1:, :-1] - u[1:, :-1, :-1]
              + u[:-1, 1:, 1:] - u[:-1, :-1, 1:] + u[1:, 1:, 1:] - u[1:, :-1, 1:]) / (4 * h)
        gz = (u[:-1, :-1, 1:] - u[:-1, :-1, :-1] + u[1:, :-1, 1:] - u[1:, :-1, :-1]
              + u[:-1, 1:, 1:] - u[:-1, 1:, :-1] + u[1:, 1:, 1:] - u[1:, 1:, :-1]) / (4 * h)
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def seminorm_pow(self, values: np.ndarray) -> float:
        """Discrete ||u||^n = sum_c w_c |grad u|_c^n."""
        g = self.cell_gradients(values)
        mag = np.sqrt((g * g).sum(axis=1))
        return float(self.cell_weights @ mag ** self.n)

    def w1n_norm(self, values: np.ndarray) -> float:
        return self.seminorm_pow(values) ** (1.0 / self.n)

    def scatter_cells_to_nodes(self, cell_vals: np.ndarray) -> np.ndarray:
        """Distribute one value per cell equally to its corners."""
        c = cell_vals.reshape(self._cells_shape()) / (2 ** self.n)
        out = np.zeros(self._grid_shape())
        if self.n == 2:
            out[:-1, :-1] += c
            out[1:, :-1] += c
            out[:-1, 1:] += c
            out[1:, 1:] += c
        else:
            for dx in (slice(None, -1), slice(1, None)):
                for dy in (slice(None, -1), slice(1, None)):
                    for dz in (slice(None, -1), slice(1, None)):
                        out[dx, dy, dz] += c
        return out.ravel()

    def flux_divergence(self, flux: np.ndarray) -> np.ndarray:
        """Assemble r_i = sum_c w_c  flux_c . grad(phi_i)(c) over all nodes.

        flux has shape (num_cells, n); the returned nodal vector is the
        exact partial derivative of sum_c w_c (flux-potential) when flux is
        the gradient of an integrand wrt the cell gradient.
        """
        w = self.cell_weights.reshape(self._cells_shape())
        out = np.zeros(self._grid_shape())
        h = self.h
        if self.n == 2:
            fx = flux[:, 0].reshape(self._cells_shape()) * w / (2 * h)
            fy = flux[:, 1].reshape(self._cells_shape()) * w / (2 * h)
            out[:-1, :-1] += -fx - fy
            out[1:, :-1] += fx - fy
            out[:-1, 1:] += -fx + fy
            out[1:, 1:] += fx + fy
        else:
            fx = flux[:, 0].reshape(self._cells_shape()) * w / (4 * h)
            fy = flux[:, 1].reshape(self._cells_shape()) * w / (4 * h)
            fz = flux[:, 2].reshape(self._cells_shape()) * w / (4 * h)
            for ix, dx in enumerate((slice(None, -1), slice(1, None))):
                sx = -1.0 if ix == 0 else 1.0
                for iy, dy in enumerate((slice(None, -1), slice(1, None))):
                    sy = -1.0 if iy == 0 else 1.0
                    for iz, dz in enumerate((slice(None, -1), slice(1, None))):
                        sz = -1.0 if iz == 0 else 1.0
                        out[dx, dy, dz] += sx * fx + sy * fy + sz * fz
        return out.ravel()

    def kirchhoff_flux_divergence(self, values: np.ndarray, reg: float = 0.0) -> np.ndarray:
        """Nodal assembly of int |grad u|^{n-2} grad u . grad phi_i.

        reg > 0 replaces |grad u|^{n-2} by (|grad u|^2 + reg^2)^{(n-2)/2}
        (used in residual assembly only; the n=2 case is regularisation-free).
        """
        g = self.cell_gradients(values)
        if self.n == 2:
            flux = g
        else:
            mag2 = (g * g).sum(axis=1) + reg * reg
            flux = mag2[:, None] ** ((self.n - 2) / 2.0) * g
        return self.flux_divergence(flux)

    def stiffness_matrix(self) -> sparse.csr_matrix:
        """Sparse matrix of sum_c w_c grad(phi_i).grad(phi_j) on interior
        nodes (the linear part of the operator; cached)."""
        if self._stiffness is not None:
            return self._stiffness
        npa = self.nodes_per_axis
        num = self.num_nodes
        if self.n == 2:
            corners = []
            ii, jj = np.meshgrid(np.arange(self.resolution), np.arange(self.resolution),
                                 indexing="ij")
            base = (ii * npa + jj).ravel()
            corners = [base, base + npa, base + 1, base + npa + 1]
            sx = np.array([-1.0, 1.0, -1.0, 1.0])
            sy = np.array([-1.0, -1.0, 1.0, 1.0])
            scale = self.cell_weights / (4 * self.h * self.h)
            rows, cols, vals = [], [], []
            for a in range(4):
                for b in range(4):
                    rows.append(corners[a])
                    cols.append(corners[b])
                    vals.append(scale * (sx[a] * sx[b] + sy[a] * sy[b]))
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        else:
            ii, jj, kk = np.meshgrid(*(np.arange(self.resolution),) * 3, indexing="ij")
            base = ((ii * npa + jj) * npa + kk).ravel()
            offs, sgn = [], []
            for ix in (0, 1):
                for iy in (0, 1):
                    for iz in (0, 1):
                        offs.append((ix * npa + iy) * npa + iz)
                        sgn.append((2 * ix - 1.0, 2 * iy - 1.0, 2 * iz - 1.0))
            scale = self.cell_weights / (16 * self.h * self.h)
            rows, cols, vals = [], [], []
            for a in range(8):
                for b in range(8):
                    rows.append(base + offs[a])
                    cols.append(base + offs[b])
                    dot = sum(sgn[a][d] * sgn[b][d] for d in range(3))
                    vals.append(scale * dot)
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        full = sparse.coo_matrix((vals, (rows, cols)), shape=(num, num)).tocsr()
        interior = self.interior_idx
        self._stiffness = full[interior][:, interior].tocsr()
        return self._stiffness

    def integrate(self, values: np.ndarray) -> float:
        """Nodal quadrature; linear in its argument."""
        return float(self.node_weights @ np.asarray(values, dtype=float))


def _tensor_grid(shape, n, resolution, centered):
    if resolution < 2:
        raise NKirchhoffError("resolution must be at least 2 cells per axis")
    h = 1.0 / resolution
    axis = np.linspace(0.0, 1.0, resolution + 1)
    if centered:
        axis = axis - 0.5
    grids = np.meshgrid(*(axis,) * n, indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    cell_weights = np.full(resolution ** n, h ** n)

    npa = resolution + 1
    idx = np.arange(npa ** n).reshape((npa,) * n)
    boundary = np.zeros((npa,) * n, dtype=bool)
    for d in range(n):
        sl0 = [slice(None)] * n
        sl0[d] = 0
        boundary[tuple(sl0)] = True
        sl1 = [slice(None)] * n
        sl1[d] = npa - 1
        boundary[tuple(sl1)] = True
    boundary = boundary.ravel()
    interior = idx.ravel()[~boundary]

    g = Grid(shape=shape, n=n, resolution=resolution, h=h, coords=coords,
             node_weights=np.empty(0), cell_weights=cell_weights,
             boundary_mask=boundary, interior_idx=interior)
    g.node_weights = g.scatter_cells_to_nodes(cell_weights)
    return g


def _disk_grid(resolution):
    if resolution < 4:
        raise NKirchhoffError("disk resolution must be at least 4 cells per axis")
    h = 2.0 / resolution
    axis = np.linspace(-1.0, 1.0, resolution + 1)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([X.ravel(), Y.ravel()], axis=1)

    x0 = axis[:-1][:, None] + np.zeros((1, resolution))
    x1 = axis[1:][:, None] + np.zeros((1, resolution))
    y0 = np.zeros((resolution, 1)) + axis[:-1][None, :]
    y1 = np.zeros((resolution, 1)) + axis[1:][None, :]
    cell_weights = disk_cell_areas(x0, x1, y0, y1).ravel()
    cell_weights[cell_weights < 0] = 0.0

    r2 = (coords * coords).sum(axis=1)
    inside = r2 < 1.0 - 1e-14
    boundary = ~inside
    interior = np.nonzero(inside)[0]

    g = Grid(shape="disk", n=2, resolution=resolution, h=h, coords=coords,
             node_weights=np.empty(0), cell_weights=cell_weights,
             boundary_mask=boundary, interior_idx=interior)
    g.node_weights = g.scatter_cells_to_nodes(cell_weights)
    return g


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class Field:
    """Nodal values of a candidate with zero boundary trace."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.num_nodes,):
            raise NKirchhoffError(
                f"field has {v.shape} values, grid has {self.grid.num_nodes} nodes")
        if not np.all(np.isfinite(v)):
            raise NKirchhoffError("field contains non-finite values")
        if np.any(v[self.grid.boundary_mask] != 0.0):
            raise NKirchhoffError("field does not vanish on the boundary nodes")
        self.values = v

    @staticmethod
    def zeros(grid: Grid) -> "Field":
        return Field(grid, np.zeros(grid.num_nodes))

    @staticmethod
    def from_interior(grid: Grid, interior_values: np.ndarray) -> "Field":
        v = np.zeros(grid.num_nodes)
        v[grid.interior_idx] = interior_values
        return Field(grid, v)

    @staticmethod
    def from_function(grid: Grid, fn) -> "Field":
        """Sample fn(coords) and clamp the boundary trace to zero."""
        v = np.asarray(fn(grid.coords), dtype=float)
        v = v.copy()
        v[grid.boundary_mask] = 0.0
        return Field(grid, v)

    def interior(self) -> np.ndarray:
        return self.values[self.grid.interior_idx]

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def scaled(self, t: float) -> "Field":
        return Field(self.grid, t * self.values)

    def norm(self) -> float:
        return self.grid.w1n_norm(self.values)

    def __abs__(self) -> "Field":
        return Field(self.grid, np.abs(self.values))


def random_bump(grid: Grid, rng, width: float = 0.18, jitter: float = 0.3) -> Field:
    """Random positive Gaussian bump with zero trace (solver initialiser)."""
    center = grid.center + jitter * grid.inradius * (rng.random(grid.n) - 0.5)
    r2 = ((grid.coords - center) ** 2).sum(axis=1)
    v = np.exp(-r2 / (2 * width ** 2))
    noise = 1.0 + 0.1 * rng.standard_normal(grid.num_nodes)
    v = np.clip(v * noise, 0.0, None)
    v[grid.boundary_mask] = 0.0
    return Field(grid, v)


# ---------------------------------------------------------------------------
# field import/export
# ---------------------------------------------------------------------------

_MAGIC = b"NKFD"


def save_field(f: Field, path: str):
    """Binary layout: magic 'NKFD', version u8, shape code 2 bytes, n u8,
    resolution u32 LE, node count u64 LE, then count little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B2sBIQ", 1, _SHAPE_CODES[f.grid.shape], f.grid.n,
                             f.grid.resolution, f.grid.num_nodes))
        fh.write(f.values.astype("<f8").tobytes())


def load_field(path: str, grid: Optional[Grid] = None) -> Field:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise NKirchhoffError(f"{path}: not a field file")
        ver, code, n, resolution, count = struct.unpack("<B2sBIQ", fh.read(16))
        if ver != 1:
            raise NKirchhoffError(f"{path}: unsupported field format version {ver}")
        vals = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float)
    shape = _CODE_SHAPES.get(code)
    if shape is None:
        raise NKirchhoffError(f"{path}: unknown shape code {code!r}")
    if grid is None:
        grid = Grid.make(shape, resolution)
    elif grid.shape != shape or grid.resolution != resolution or grid.n != n:
        raise NKirchhoffError(f"{path}: grid header does not match the supplied grid")
    return Field(grid, vals)


def save_field_csv(f: Field, path: str):
    with open(path, "w") as fh:
        fh.write(f"# shape={f.grid.shape},resolution={f.grid.resolution},n={f.grid.n}\n")
        for v in f.values:
            fh.write(f"{v:.17g}\n")


def load_field_csv(path: str, grid: Optional[Grid] = None) -> Field:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise NKirchhoffError(f"{path}: missing CSV header")
        meta = dict(item.split("=") for item in header[1:].strip().split(","))
        vals = np.array([float(line) for line in fh if line.strip()])
    if grid is None:
        grid = Grid.make(meta["shape"], int(meta["resolution"]))
    return Field(grid, vals)
