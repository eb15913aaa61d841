"""Nonlinear conjugate-gradient driver with backtracking and stagnation stop.

Each iteration solves the forward problem for the current model, forms the
reciprocity-gap misfit and its coefficient-space gradient, builds a
clamped-beta conjugate direction, and backtracks along c - alpha * s until
the Armijo condition holds and the trial model stays inside the speed
bounds.  The run stops at the iteration cap, on stagnation of the misfit
over a trailing window, or when the line search fails twice (once after an
automatic steepest-descent restart).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsViolationError
from .geometry import coefficient_gradient, evaluate_model
from .helmholtz import assemble
from .misfit_adjoint import misfit_and_gradient, misfit_only


@dataclass
class OptimConfig:
    """Stopping and line-search constants.

    The iteration floor keeps the run alive through early slow progress;
    stagnation then stops it once the relative misfit decrease over the
    last n_eps iterations drops below eps_j.
    """

    n_iter_min: int = 50
    n_iter_max: int = 250
    n_eps: int = 10
    eps_j: float = 0.01
    armijo_c1: float = 1e-4
    backtrack_rho: float = 0.5
    initial_step_fraction: float = 0.01
    max_backtracks: int = 30

    def __post_init__(self):
        if not self.n_iter_min <= self.n_iter_max:
            raise ValueError("n_iter_min must not exceed n_iter_max")
        if not 0 < self.eps_j < 1:
            raise ValueError("eps_j must lie in (0, 1)")
        if self.n_eps < 1:
            raise ValueError("n_eps must be positive")
        if not 0 < self.armijo_c1 < 1:
            raise ValueError("armijo_c1 must lie in (0, 1)")
        if not 0 < self.backtrack_rho < 1:
            raise ValueError("backtrack_rho must lie in (0, 1)")


@dataclass
class IterationRecord:
    iteration: int
    misfit: float
    grad_norm: float
    alpha: float
    backtracks: int
    wall_time_s: float
    n_solves: int


@dataclass
class InversionState:
    """Mutable driver state; frozen coefficients never change."""

    coefficients: np.ndarray
    gradient_prev: np.ndarray = None
    direction_prev: np.ndarray = None
    misfit_history: list = field(default_factory=list)
    iteration: int = 0
    termination: str = ""


@dataclass
class InversionResult:
    model: object
    records: list
    reason: str

    @property
    def misfit_history(self):
        return [r.misfit for r in self.records]


def pr_direction(grad, grad_prev, dir_prev):
    """Conjugate direction with the clamped two-gradient beta.

    beta = max(0, <g, g - g_prev> / <g_prev, g_prev>); the clamp restores
    steepest descent whenever the curvature estimate turns negative.  The
    first iteration (or a vanished previous gradient) returns the gradient
    itself.  The update convention is c - alpha * s, so s aligns with +g.
    """
    g = np.asarray(grad, dtype=float)
    if grad_prev is None or dir_prev is None:
        return g.copy()
    gp = np.asarray(grad_prev, dtype=float)
    denom = float(gp @ gp)
    if denom == 0.0:
        return g.copy()
    beta = max(0.0, float(g @ (g - gp)) / denom)
    return g + beta * np.asarray(dir_prev, dtype=float)


@dataclass
class LineSearchResult:
    ok: bool
    alpha: float
    misfit: float
    coefficients: np.ndarray
    backtracks: int
    evaluations: int


def line_search(coefficients, misfit_0, grad, direction, misfit_fn, cfg, speed_range):
    """Backtracking along c - alpha * s under Armijo plus bound feasibility.

    The first trial step moves the largest coefficient by
    initial_step_fraction of the admissible speed range.  A trial that
    violates the speed bounds is rejected regardless of its misfit.
    Requires <grad, direction> > 0 (a descent direction for the subtractive
    update); the caller resets the direction otherwise.
    """
    gs = float(np.asarray(grad) @ np.asarray(direction))
    if gs <= 0:
        raise ValueError("line search needs a descent direction (<g, s> > 0)")
    smax = float(np.max(np.abs(direction)))
    if smax == 0:
        raise ValueError("zero search direction")
    alpha = cfg.initial_step_fraction * speed_range / smax
    evaluations = 0
    for m in range(cfg.max_backtracks + 1):
        trial = coefficients - alpha * np.asarray(direction)
        try:
            value = misfit_fn(trial)
            evaluations += 1
        except BoundsViolationError:
            value = None
        if value is not None and value <= misfit_0 - cfg.armijo_c1 * alpha * gs:
            return LineSearchResult(True, alpha, value, trial, m, evaluations)
        alpha *= cfg.backtrack_rho
    return LineSearchResult(False, 0.0, misfit_0, np.asarray(coefficients),
                            cfg.max_backtracks + 1, evaluations)


def stagnation(history, cfg):
    """Stop decision from the misfit history (most recent last).

    Below the iteration floor, or with fewer than n_eps + 1 values, the
    answer is always continue.  Otherwise stop when the relative decrease
    over the trailing window falls under eps_j.
    """
    j = len(history)
    if j < cfg.n_iter_min or j <= cfg.n_eps:
        return False, None
    ref = history[j - cfg.n_eps - 1]
    if ref == 0:
        return True, 0.0
    e = (ref - history[-1]) / ref
    return e < cfg.eps_j, e


def relative_l2_error(reference, reconstruction):
    """Node-quadrature-weighted relative L2 distance between two fields."""
    if reference.grid != reconstruction.grid:
        raise ValueError("fields live on different grids")
    w = reference.grid.node_weights()
    ref = np.asarray(reference.values, dtype=float)
    rec = np.asarray(reconstruction.values, dtype=float)
    denom = np.sqrt(w @ ref ** 2)
    if denom == 0:
        raise ValueError("reference field has zero norm")
    return float(np.sqrt(w @ (ref - rec) ** 2) / denom)


def run_inversion(data, sim_sources, initial_model, cfg, phys, callback=None):
    """Reconstruct the wave speed from Cauchy data.

    Per iteration: assemble, n_sim forward solves, gap matrix, misfit,
    n_sim aggregated adjoint solves, nodal gradient, projection onto the
    partition coefficients, conjugate direction, backtracking update.
    Returns the last accepted model, one record per iteration, and the
    termination reason.  The accepted misfit sequence is non-increasing and
    frozen coefficients are bit-identical to the initial model's.
    """
    grid = initial_model.partition.grid
    partition = initial_model.partition
    receivers = data.receivers

    def replace_coeffs(vec):
        return initial_model.with_coefficient_vector(vec)

    def misfit_of(vec):
        model = replace_coeffs(vec)
        speed = evaluate_model(model)
        system = assemble(grid, speed, phys)
        value, _ = misfit_only(system, sim_sources, data)
        return value

    state = InversionState(coefficients=initial_model.coefficient_vector.copy())
    records = []
    speed_range = initial_model.c_max - initial_model.c_min
    restarted = False
    reason = "max_iterations"

    for j in range(1, cfg.n_iter_max + 1):
        t0 = time.perf_counter()
        model = replace_coeffs(state.coefficients)
        speed = evaluate_model(model)
        system = assemble(grid, speed, phys)
        value, gap, nodal_grad, report = misfit_and_gradient(system, sim_sources, data)
        grad = coefficient_gradient(nodal_grad, partition)
        grad_norm = float(np.linalg.norm(grad))
        state.iteration = j
        state.misfit_history.append(value)

        if grad_norm == 0.0:
            reason = "stationary"
            records.append(IterationRecord(j, value, grad_norm, 0.0, 0,
                                           time.perf_counter() - t0,
                                           system.solve_count))
            break

        direction = pr_direction(grad, state.gradient_prev, state.direction_prev)
        if float(grad @ direction) <= 0:
            direction = grad.copy()

        result = line_search(state.coefficients, value, grad, direction,
                             misfit_of, cfg, speed_range)
        trial_evals = result.evaluations
        if not result.ok and not restarted:
            # one automatic steepest-descent restart
            restarted = True
            direction = grad.copy()
            result = line_search(state.coefficients, value, grad, direction,
                                 misfit_of, cfg, speed_range)
            trial_evals += result.evaluations
        records.append(IterationRecord(
            j, value, grad_norm, result.alpha, result.backtracks,
            time.perf_counter() - t0,
            system.solve_count + trial_evals * sim_sources.n_sources,
        ))
        if callback is not None:
            callback(records[-1])
        if not result.ok:
            reason = "line_search_failure"
            break

        state.coefficients = result.coefficients
        state.gradient_prev = grad
        state.direction_prev = direction
        restarted = False

        stop, _ = stagnation(state.misfit_history, cfg)
        if stop:
            reason = "stagnation"
            break

    state.termination = reason
    final = replace_coeffs(state.coefficients)
    return InversionResult(final, records, reason)


def write_iteration_log(records, path):
    """CSV log 'iter, J, grad_norm, alpha, solves', one row per iteration."""
    with open(path, "w") as f:
        f.write("iter, J, grad_norm, alpha, solves\n")
        for r in records:
            f.write(
                f"{r.iteration}, {r.misfit:.17g}, {r.grad_norm:.17g}, "
                f"{r.alpha:.17g}, {r.n_solves}\n"
            )
