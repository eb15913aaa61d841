"""Reciprocity-gap misfit, aggregated adjoint solves, and the nodal gradient.

The gap between a simulated field (source y) and an observed trace pair
(source z) is the surface quadrature of

    u(x, y) * dG_obs(x, z) - G_obs(x, z) * du(x, y)

over the receiver layer: a bilinear pairing, no conjugation.  For two
fields of the same discrete operator with sources above the layer the sum
telescopes to zero exactly, which is what drives the misfit

    J = sum_{y,z} w_y w_z |S[y, z]|^2

toward zero at the true model.  One misfit-plus-gradient evaluation costs
exactly n_sim forward and n_sim adjoint solves on one shared factorization:
the observation sources are aggregated into a single adjoint right-hand
side per simulation source.

Discrete consistency: the adjoint source is assembled as the exact
transpose of the trace and normal-derivative sampling operators (monopole
on the receiver nodes, a +-1/(2h) dipole on the straddling layers) and
normalized by the cell volume, mirroring the unit-impulse normalization of
the forward solve.  With the symmetric row-scaled operator this makes
(node weight) x (nodal gradient) the exact partial derivative of the
discrete misfit with respect to that node's speed, so the coefficient-space
gradient matches finite differences to rounding, not just to
discretization order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import helmholtz
from .errors import GeometryError
from .geometry import NodalField
from .helmholtz import SourceSpec


@dataclass(frozen=True, eq=False)
class ReciprocityGapMatrix:
    """Gap values over (simulation source, observation source) pairs."""

    values: np.ndarray
    sim_weights: np.ndarray
    obs_weights: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        wy = np.asarray(self.sim_weights, dtype=float).ravel()
        wz = np.asarray(self.obs_weights, dtype=float).ravel()
        if vals.shape != (wy.size, wz.size):
            raise GeometryError(
                f"gap matrix shape {vals.shape} does not match "
                f"({wy.size} sim, {wz.size} obs) sources"
            )
        if not np.isfinite(vals).all():
            raise ValueError("gap matrix contains non-finite values")
        vals, wy, wz = vals.copy(), wy.copy(), wz.copy()
        for arr in (vals, wy, wz):
            arr.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "sim_weights", wy)
        object.__setattr__(self, "obs_weights", wz)


@dataclass(frozen=True)
class MisfitReport:
    """One misfit evaluation: value, per-pair power, cost bookkeeping."""

    value: float
    pair_power: np.ndarray
    wall_time_s: float
    n_forward_solves: int
    n_adjoint_solves: int


def reciprocity_gap(sim_values, sim_dnu, data, sim_weights):
    """Gap matrix between simulated traces and observed Cauchy data.

    sim_values and sim_dnu are (n_sim, n_rcv) trace blocks on the same
    receiver lattice as the data.
    """
    sim_values = np.asarray(sim_values, dtype=complex)
    sim_dnu = np.asarray(sim_dnu, dtype=complex)
    n_rcv = data.receivers.n_receivers
    if sim_values.shape[1] != n_rcv or sim_dnu.shape[1] != n_rcv:
        raise GeometryError(
            f"simulated traces cover {sim_values.shape[1]} receivers, data has {n_rcv}"
        )
    w = data.receivers.weights
    s = (sim_values * w) @ data.dg.T - (sim_dnu * w) @ data.g.T
    return ReciprocityGapMatrix(s, sim_weights, data.obs_sources.weights)


def misfit(gap):
    """J = sum_{y,z} w_y w_z |S[y,z]|^2, nonnegative."""
    power = np.abs(gap.values) ** 2
    return float(gap.sim_weights @ power @ gap.obs_weights)


def _aggregated_adjoint_rhs(gap, data, receivers, grid):
    """(n_sim, n_nodes) adjoint right-hand sides, one per simulation source.

    Monopole part: 2 w_z conj(S) w_i dG_obs placed on the receiver nodes.
    Dipole part: -2 w_z conj(S) w_i G_obs pushed through the transpose of
    the centered-difference stencil.  Normalized by the cell volume to
    match the unit-impulse convention of the forward solves.
    """
    coef = 2.0 * np.conj(gap.values) * gap.obs_weights[None, :]
    mono = coef @ data.dg
    dipo = coef @ data.g
    wr = receivers.weights
    hz = grid.spacing[-1]
    sign = 1.0 if receivers.upward_normal else -1.0
    n_sim = gap.values.shape[0]
    rhs = np.zeros((n_sim, grid.n_nodes), dtype=complex)
    rhs[:, receivers.value_nodes] += mono * wr
    rhs[:, receivers.above_nodes] -= sign * (dipo * wr) / (2.0 * hz)
    rhs[:, receivers.below_nodes] += sign * (dipo * wr) / (2.0 * hz)
    rhs /= grid.cell_volume
    return rhs


def adjoint_solve(system, gap, data, receivers, y_index):
    """Adjoint field for one simulation source, all observations aggregated."""
    rhs = _aggregated_adjoint_rhs(gap, data, receivers, system.grid)[y_index]
    rhs[system.dirichlet_mask] = 0.0
    return NodalField(system.grid, system.solve(-rhs))


def solve_adjoint_fields(system, gap, data, receivers):
    """(n_nodes, n_sim) adjoint fields solved as one block."""
    rhs = _aggregated_adjoint_rhs(gap, data, receivers, system.grid)
    rhs[:, system.dirichlet_mask] = 0.0
    return system.solve(-rhs.T)


def nodal_gradient(forward_fields, adjoint_fields, speed, phys, sim_weights):
    """Gradient density of the misfit with respect to the nodal speed.

    grad(x) = -Re( sum_y w_y 2 k^2 c(x)^-3 G(x, y) gamma(x, y) ), the
    product unconjugated and the real part taken at the end.  Zero on the
    pressure-free surface, where the field itself vanishes.
    """
    wy = np.asarray(sim_weights, dtype=float)
    pair = (forward_fields * adjoint_fields) @ wy
    c = np.asarray(speed.values, dtype=float)
    grad = -2.0 * phys.k ** 2 * c ** -3 * np.real(pair)
    grad[speed.grid.free_surface_mask()] = 0.0
    return NodalField(speed.grid, grad, unit="1/(m/s)")


def simulate_traces(system, sim_sources, receivers):
    """Forward solves for every simulation source plus their traces."""
    specs = [SourceSpec.from_position(system.grid, p) for p in sim_sources.positions]
    fields = system.green_many(specs)
    vals, dnu = helmholtz.traces_many(fields, system.grid, receivers)
    return fields, vals, dnu


def misfit_only(system, sim_sources, data):
    """Misfit value alone: n_sim forward solves, no adjoints."""
    _, vals, dnu = simulate_traces(system, sim_sources, data.receivers)
    gap = reciprocity_gap(vals, dnu, data, sim_sources.weights)
    return misfit(gap), gap


def misfit_and_gradient(system, sim_sources, data):
    """Misfit, gap matrix, nodal gradient, and a cost report.

    Exactly n_sim forward and n_sim adjoint solves on the shared
    factorization; accumulations run in fixed source order.
    """
    t0 = time.perf_counter()
    before = system.solve_count
    fields, vals, dnu = simulate_traces(system, sim_sources, data.receivers)
    n_forward = system.solve_count - before
    gap = reciprocity_gap(vals, dnu, data, sim_sources.weights)
    value = misfit(gap)
    adj = solve_adjoint_fields(system, gap, data, data.receivers)
    n_adjoint = system.solve_count - before - n_forward
    grad = nodal_gradient(fields, adj, system.speed, system.phys, sim_sources.weights)
    report = MisfitReport(
        value=value,
        pair_power=np.abs(gap.values) ** 2,
        wall_time_s=time.perf_counter() - t0,
        n_forward_solves=n_forward,
        n_adjoint_solves=n_adjoint,
    )
    return value, gap, grad, report
