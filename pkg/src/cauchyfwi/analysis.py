"""Empirical stability probe, gradient-check harness, and field export.

The stability probe samples admissible model pairs and tabulates the ratio
of their sup-norm distance to the square root of the two-model misfit: an
empirical illustration of the Lipschitz bound that motivates the
piecewise-linear subspace.  The gradient check compares the adjoint
coefficient gradient against central finite differences over a step sweep;
it is the master correctness gate for the whole forward/adjoint stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExportError
from .geometry import NodalField, coefficient_gradient, evaluate_model
from .helmholtz import (
    assemble,
    write_field_csv,
    write_field_structured_points,
)
from .misfit_adjoint import misfit_and_gradient, misfit_only
from . import config as config_mod


# ---------------------------------------------------------------------------
# gaussian-smoothed export

def gaussian_smooth(field, sigma):
    """Separable truncated-gaussian smoothing with edge renormalization.

    sigma is in node units; the kernel is cut at 4 sigma and the weights
    are renormalized over the in-bounds support, so constants (and the mean
    of interior-supported fields) are preserved exactly.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return field
    vals = field.reshape().astype(float, copy=True)
    radius = int(np.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    for axis in range(field.grid.dim):
        n = field.grid.shape[axis]
        moved = np.moveaxis(vals, axis, -1)
        out = np.zeros_like(moved)
        norm = np.zeros(n)
        for off, kw in zip(offsets, kernel):
            lo, hi = max(0, -off), min(n, n - off)
            if lo >= hi:
                continue
            out[..., lo:hi] += kw * moved[..., lo + off : hi + off]
            norm[lo:hi] += kw
        out /= norm
        vals = np.moveaxis(out, -1, axis)
    return NodalField(field.grid, vals.ravel(), unit=field.unit)


def export_field(field, path, fmt="structured-points", sigma=0.0):
    """Write a field to disk, optionally smoothing it first."""
    smoothed = gaussian_smooth(field, sigma)
    if fmt == "structured-points":
        write_field_structured_points(smoothed, path)
    elif fmt == "csv":
        write_field_csv(smoothed, path)
    else:
        raise ExportError(f"unsupported export format {fmt!r}")


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class CoefficientCheck:
    index: int
    adjoint: float
    finite_difference: float
    rel_error: float
    step: float
    conclusive: bool


@dataclass
class GradCheckReport:
    checks: list
    passed: bool
    tolerance: float

    def worst(self):
        done = [c.rel_error for c in self.checks if c.conclusive]
        return max(done) if done else float("nan")


def _coefficient_scales(model):
    """Natural perturbation scale per coefficient (speed range per unit)."""
    part = model.partition
    grid = part.grid
    span = model.c_max - model.c_min
    scales = np.empty((part.n_subdomains, 1 + grid.dim))
    scales[:, 0] = span
    for d in range(grid.dim):
        scales[:, 1 + d] = span / grid.extent[d]
    return scales.ravel()


def gradcheck(cfg, n_probes=0, steps=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
              seed=7, tolerance=1e-4):
    """Adjoint gradient versus central finite differences, step-swept.

    Builds the configured geometry on the inversion grid, synthesizes clean
    data from the phantom, and differentiates the misfit of the depth-only
    starting model.  n_probes = 0 probes every non-frozen coefficient.  A
    probe whose misfit differences drown in rounding is retried once with
    10x wider steps, then reported inconclusive.
    """
    grid = config_mod.build_grid(cfg)
    if grid.dim == 2 and (grid.shape[0] > 151 or grid.shape[1] > 101):
        raise ValueError("gradient check expects a small grid (<= 151 x 101)")
    phys = config_mod.build_physics(cfg)
    partition = config_mod.build_partition_for(cfg, grid)
    receivers = config_mod.build_receivers(cfg, grid)
    obs = config_mod.build_obs_sources(cfg, grid)
    sim = config_mod.build_sim_sources(cfg, grid)
    truth = config_mod.build_true_field(cfg, grid)
    from .acquisition import synthesize

    data = synthesize(truth, obs, receivers, phys)
    model = config_mod.build_initial_model(cfg, partition)

    def misfit_of(vec):
        m = model.with_coefficient_vector(vec)
        system = assemble(grid, evaluate_model(m), phys)
        value, _ = misfit_only(system, sim, data)
        return value

    system = assemble(grid, evaluate_model(model), phys)
    _, _, nodal, _ = misfit_and_gradient(system, sim, data)
    adjoint = coefficient_gradient(nodal, partition)

    free = ~np.repeat(partition.frozen, 1 + grid.dim)
    candidates = np.nonzero(free)[0]
    if n_probes and n_probes < candidates.size:
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(candidates, size=n_probes, replace=False))

    base = model.coefficient_vector.copy()
    j0 = misfit_of(base)
    scales = _coefficient_scales(model)
    eps_floor = 1e-10 * max(np.max(np.abs(adjoint)), 1e-300)

    checks = []
    for k in candidates:
        best = None
        for widen in (1.0, 10.0):
            for rel in steps:
                delta = rel * widen * scales[k]
                plus = base.copy()
                plus[k] += delta
                minus = base.copy()
                minus[k] -= delta
                jp, jm = misfit_of(plus), misfit_of(minus)
                if abs(jp - jm) < 1e3 * np.finfo(float).eps * max(abs(jp), abs(jm), j0):
                    continue
                fd = (jp - jm) / (2 * delta)
                err = abs(adjoint[k] - fd) / max(abs(fd), eps_floor)
                if best is None or err < best[0]:
                    best = (err, fd, delta)
            if best is not None:
                break
        if best is None:
            checks.append(CoefficientCheck(int(k), float(adjoint[k]),
                                           float("nan"), float("nan"), 0.0, False))
        else:
            err, fd, delta = best
            checks.append(CoefficientCheck(int(k), float(adjoint[k]),
                                           float(fd), float(err), float(delta), True))
    passed = all(c.conclusive and c.rel_error <= tolerance for c in checks)
    return GradCheckReport(checks, passed, tolerance)


def write_gradcheck_csv(report, path):
    with open(path, "w") as f:
        f.write("coefficient, adjoint, finite_difference, rel_error, step, conclusive\n")
        for c in report.checks:
            f.write(f"{c.index}, {c.adjoint:.17g}, {c.finite_difference:.17g}, "
                    f"{c.rel_error:.17g}, {c.step:.17g}, {int(c.conclusive)}\n")


# ---------------------------------------------------------------------------
# stability probe

@dataclass
class StabilityPair:
    linf_distance: float
    misfit: float
    ratio: float
    flagged: bool
    excluded: bool


@dataclass
class StabilityProbeReport:
    pairs: list
    ratio_max: float
    ratio_min: float
    n_flagged: int

    def table(self):
        return np.array([[p.linf_distance, p.misfit, p.ratio] for p in self.pairs])


def _random_admissible_coeffs(partition, c_min, c_max, water_speed, rng):
    """Random coefficients whose evaluated field stays inside the bounds."""
    grid = partition.grid
    n = partition.n_subdomains
    margin = 0.2 * (c_max - c_min)
    coeffs = np.zeros((n, 1 + grid.dim))
    coeffs[:, 0] = rng.uniform(c_min + margin, c_max - margin, size=n)
    for j in range(n):
        lo, hi = partition.bounding_box(j)
        reach = margin
        for d in range(grid.dim):
            span = max(hi[d], 1e-9)
            amp = reach / (grid.dim * span)
            coeffs[j, 1 + d] = rng.uniform(-amp, amp)
    coeffs[partition.frozen, 0] = water_speed
    coeffs[partition.frozen, 1:] = 0.0
    return coeffs


def evaluate_pair(model_a, model_b, sim_sources, obs_sources, receivers, phys):
    """Sup-norm distance and two-model misfit of one admissible pair.

    Model a plays the simulation role, model b supplies the observations;
    both use the same grid and discretization.
    """
    from .acquisition import synthesize

    field_a = evaluate_model(model_a)
    field_b = evaluate_model(model_b)
    linf = float(np.max(np.abs(field_a.values - field_b.values)))
    data = synthesize(field_b, obs_sources, receivers, phys)
    system = assemble(field_a.grid, field_a, phys)
    value, _ = misfit_only(system, sim_sources, data)
    return linf, value


def probe_stability(partition, c_min, c_max, phys, receivers,
                    obs_sources, sim_sources, n_pairs, seed,
                    water_speed=None):
    """Ratio table ||c1 - c2||_inf / sqrt(J(c1, c2)) over random pairs.

    Pairs with zero distance are excluded from the statistics; pairs whose
    misfit vanishes (or whose ratio explodes) while the models differ are
    flagged as findings rather than dropped.
    """
    if n_pairs < 2:
        raise ValueError("need at least two pairs")
    if water_speed is None:
        water_speed = phys.water_speed
    rng = np.random.default_rng(seed)
    from .geometry import PiecewiseLinearModel

    pairs = []
    ratios = []
    for _ in range(n_pairs):
        ca = _random_admissible_coeffs(partition, c_min, c_max, water_speed, rng)
        cb = _random_admissible_coeffs(partition, c_min, c_max, water_speed, rng)
        ma = PiecewiseLinearModel(partition, ca, c_min, c_max, water_speed)
        mb = PiecewiseLinearModel(partition, cb, c_min, c_max, water_speed)
        linf, value = evaluate_pair(ma, mb, sim_sources, obs_sources, receivers, phys)
        excluded = linf == 0.0
        if excluded:
            pairs.append(StabilityPair(linf, value, float("nan"), False, True))
            continue
        if value <= 0.0:
            pairs.append(StabilityPair(linf, value, float("inf"), True, False))
            continue
        ratio = linf / np.sqrt(value)
        pairs.append(StabilityPair(linf, value, float(ratio), False, False))
        ratios.append(ratio)
    ratios = np.array(ratios)
    if ratios.size:
        median = np.median(ratios)
        for p in pairs:
            if not p.excluded and np.isfinite(p.ratio) and p.ratio > 1e6 * median:
                p.flagged = True
    kept = [p.ratio for p in pairs if not p.excluded and not p.flagged]
    return StabilityProbeReport(
        pairs,
        ratio_max=max(kept) if kept else float("nan"),
        ratio_min=min(kept) if kept else float("nan"),
        n_flagged=sum(p.flagged for p in pairs),
    )


def write_stability_csv(report, path):
    with open(path, "w") as f:
        f.write("linf_distance, misfit, ratio, flagged, excluded\n")
        for p in report.pairs:
            f.write(f"{p.linf_distance:.17g}, {p.misfit:.17g}, {p.ratio:.17g}, "
                    f"{int(p.flagged)}, {int(p.excluded)}\n")
