"""Discrete mixed-boundary Helmholtz operator, point-source solves, traces.

The operator Delta + k^2 c^-2 is discretized with second-order centered
differences.  The pressure-free top face carries Dirichlet rows; absorbing
faces carry the first-order radiation relation d_nu u - i k0 u = 0,
eliminated through ghost nodes so every boundary row keeps second-order
accuracy.  Rows are scaled by 2^-(number of boundary faces touched), which
makes the matrix complex symmetric (A = A^T, no conjugation) entrywise,
including at edges and corners.  Symmetry gives discrete source-receiver
reciprocity and lets one factorization serve both forward and adjoint
solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    AlignmentError,
    AssemblyError,
    ExportError,
    InvalidSourceError,
    SolverBreakdownError,
)
from .geometry import Grid, NodalField


@dataclass(frozen=True)
class PhysicsConfig:
    """Angular wavenumber and the known water speed.

    k = 2 pi f is the angular frequency of the time-harmonic field in
    rad/s; the radiation coefficient on absorbing faces is k0 = k / c0.
    """

    freq_hz: float
    water_speed: float

    def __post_init__(self):
        if self.freq_hz <= 0:
            raise ValueError(f"frequency must be positive, got {self.freq_hz}")
        if self.water_speed <= 0:
            raise ValueError(f"water speed must be positive, got {self.water_speed}")

    @property
    def k(self):
        return 2.0 * np.pi * self.freq_hz

    @property
    def absorbing_k0(self):
        return self.k / self.water_speed


def points_per_wavelength(grid, phys, c_min):
    """Nodes per shortest wavelength; at least 4 are needed for sanity."""
    return (c_min / phys.freq_hz) / max(grid.spacing)


@dataclass(frozen=True)
class SourceSpec:
    """Point source snapped to the nearest node, normalized to unit strength.

    The discrete right-hand side carries 1 / (cell volume) at the node so
    the solved field approximates the response to a unit Dirac impulse.
    """

    grid: Grid
    position: tuple
    node: int
    amplitude: float

    @classmethod
    def from_position(cls, grid, position):
        node = grid.nearest_node(position)
        if grid.free_surface_mask()[node]:
            raise InvalidSourceError(
                f"source at {tuple(position)} lies on the pressure-free surface"
            )
        return cls(grid, tuple(float(x) for x in position), node, 1.0 / grid.cell_volume)


def assemble(grid, speed, phys, free_surface=True):
    """Assemble the discrete Helmholtz system for a nodal speed field.

    free_surface=False replaces the Dirichlet top by the absorbing relation
    on every face (used for homogeneous-medium validation against the
    free-space response).
    """
    if speed.grid != grid:
        raise AssemblyError("speed field lives on a different grid")
    c = np.asarray(speed.values, dtype=float)
    if not np.isfinite(c).all():
        raise AssemblyError("speed field contains non-finite values")
    if (c <= 0).any():
        raise AssemblyError("speed field must be strictly positive")

    dim = grid.dim
    shape = grid.shape
    h = grid.spacing
    m = grid.n_nodes
    idx = grid.multi_indices()
    scale = grid.boundary_scale()
    dirichlet = grid.free_surface_mask() if free_surface else np.zeros(m, dtype=bool)

    k2 = phys.k ** 2
    ik0 = 1j * phys.absorbing_k0

    diag = (k2 / c ** 2).astype(complex)
    for d in range(dim):
        on_b = (idx[:, d] == 0) | (idx[:, d] == shape[d] - 1)
        diag += np.where(on_b, -2.0 / h[d] ** 2 + 2.0 * ik0 / h[d], -2.0 / h[d] ** 2)
    diag *= scale
    diag[dirichlet] = 1.0

    rows = [np.arange(m)]
    cols = [np.arange(m)]
    vals = [diag]

    strides = np.array([int(np.prod(shape[d + 1 :])) for d in range(dim)])
    flat = np.arange(m)
    for d in range(dim):
        for step in (+1, -1):
            if step > 0:
                has_nb = idx[:, d] < shape[d] - 1
                doubled = idx[:, d] == 0
            else:
                has_nb = idx[:, d] > 0
                doubled = idx[:, d] == shape[d] - 1
            src = flat[has_nb]
            tgt = src + step * strides[d]
            keep = ~dirichlet[src] & ~dirichlet[tgt]
            src, tgt = src[keep], tgt[keep]
            coeff = np.where(doubled[src], 2.0, 1.0) / h[d] ** 2 * scale[src]
            rows.append(src)
            cols.append(tgt)
            vals.append(coeff.astype(complex))

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m),
    ).tocsc()
    return HelmholtzSystem(grid, speed, phys, matrix, free_surface, dirichlet)


class HelmholtzSystem:
    """Assembled operator with a lazily cached sparse LU factorization.

    Immutable after construction; the factorization may be shared across
    per-source solves.  solve_count tracks the number of right-hand sides
    solved, for cost accounting.
    """

    def __init__(self, grid, speed, phys, matrix, free_surface, dirichlet_mask):
        self.grid = grid
        self.speed = speed
        self.phys = phys
        self.matrix = matrix
        self.free_surface = free_surface
        self.dirichlet_mask = dirichlet_mask
        self.solve_count = 0
        self._factor = None

    @property
    def factorization(self):
        if self._factor is None:
            try:
                self._factor = spla.splu(self.matrix.astype(complex))
            except RuntimeError as exc:
                raise SolverBreakdownError(f"sparse LU failed: {exc}") from exc
        return self._factor

    def solve(self, rhs):
        """Solve A u = rhs for one vector or a (n_nodes, k) block.

        Direct factorization; the residual satisfies |A u - b| <= 1e-10 |b|
        for well-scaled inputs and output is deterministic.
        """
        b = np.asarray(rhs, dtype=complex)
        if b.shape[0] != self.grid.n_nodes:
            raise ValueError("right-hand side has the wrong length")
        if not np.isfinite(b).all():
            raise ValueError("right-hand side contains non-finite values")
        try:
            x = self.factorization.solve(b)
        except (RuntimeError, ValueError) as exc:
            raise SolverBreakdownError(f"triangular solve failed: {exc}") from exc
        self.solve_count += 1 if b.ndim == 1 else b.shape[1]
        return x

    def green(self, source):
        """Field response to a unit point source (one solve)."""
        return NodalField(self.grid, self._green_block([source])[:, 0])

    def green_many(self, sources):
        """(n_nodes, n_sources) responses solved against one factorization."""
        return self._green_block(list(sources))

    def _green_block(self, sources):
        m = self.grid.n_nodes
        scale = self.grid.boundary_scale()
        rhs = np.zeros((m, len(sources)), dtype=complex)
        for col, src in enumerate(sources):
            if src.grid != self.grid:
                raise InvalidSourceError("source was built for a different grid")
            if self.dirichlet_mask[src.node]:
                raise InvalidSourceError(
                    f"source node {src.node} lies on the Dirichlet boundary"
                )
            rhs[src.node, col] = -src.amplitude * scale[src.node]
        return self.solve(rhs)


def traces(field, receivers):
    """Sample a field and its normal derivative on a receiver layer.

    The derivative is the centered difference across the layer; the normal
    points upward (toward the sources) when receivers.upward_normal is set.
    """
    vals, dnu = traces_many(field.values[:, None], field.grid, receivers)
    return vals[0], dnu[0]


def traces_many(block, grid, receivers):
    """Traces of a (n_nodes, n_fields) block; returns (n_fields, n_rcv) pairs."""
    if receivers.grid != grid:
        raise AlignmentError("receiver layer was built for a different grid")
    hz = grid.spacing[-1]
    sign = 1.0 if receivers.upward_normal else -1.0
    vals = block[receivers.value_nodes].T
    dnu = sign * (block[receivers.above_nodes] - block[receivers.below_nodes]).T / (2 * hz)
    return vals, dnu


def write_field_structured_points(field, path):
    """Legacy structured-points text export: 4 header lines then one scalar
    per line, row-major."""
    if not field.is_real():
        raise ExportError("structured-points export requires a real field")
    grid = field.grid
    lines = [
        "structured_points",
        f"dim {grid.dim}",
        "shape " + " ".join(str(n) for n in grid.shape),
        "spacing " + " ".join(f"{h:.17g}" for h in grid.spacing),
    ]
    lines.extend(f"{v:.17g}" for v in field.values)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_field_structured_points(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) < 4 or lines[0] != "structured_points":
        raise ExportError(f"{path}: not a structured-points file")
    dim = int(lines[1].split()[1])
    shape = tuple(int(t) for t in lines[2].split()[1:])
    spacing = tuple(float(t) for t in lines[3].split()[1:])
    if len(shape) != dim or len(spacing) != dim:
        raise ExportError(f"{path}: inconsistent header")
    extent = tuple(h * (n - 1) for h, n in zip(spacing, shape))
    grid = Grid(extent, shape)
    vals = np.array([float(t) for t in lines[4:]])
    if vals.size != grid.n_nodes:
        raise ExportError(f"{path}: {vals.size} values for {grid.n_nodes} nodes")
    return NodalField(grid, vals)


def write_field_csv(field, path):
    """CSV export 'i, j[, k], re, im' with node indices, row-major."""
    grid = field.grid
    idx = grid.multi_indices()
    vals = np.asarray(field.values, dtype=complex)
    with open(path, "w") as f:
        for row, v in zip(idx, vals):
            ints = ", ".join(str(int(i)) for i in row)
            f.write(f"{ints}, {v.real:.17g}, {v.imag:.17g}\n")
