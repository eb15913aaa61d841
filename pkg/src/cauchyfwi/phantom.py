"""Procedural desk-scale wave-speed phantoms and depth-only starting models."""

from __future__ import annotations

import numpy as np

from .geometry import NodalField, fit_coefficients


def layered_inclusion_phantom(grid, water_depth_m, water_speed,
                              surface_speed, gradient_per_s,
                              inclusion_center, inclusion_radius_m,
                              inclusion_speed, profile="gaussian"):
    """Smooth depth-graded background with one fast inclusion.

    Below the water bottom the background is surface_speed +
    gradient_per_s * (depth - water_depth); the inclusion blends toward
    inclusion_speed with a gaussian or box profile of the given radius.
    The water layer itself is constant water_speed.
    """
    pos = grid.node_positions()
    depth = pos[:, -1]
    vals = np.full(grid.n_nodes, float(water_speed))
    below = depth > water_depth_m
    background = surface_speed + gradient_per_s * (depth - water_depth_m)
    vals[below] = background[below]

    center = np.asarray(inclusion_center, dtype=float)
    r = np.linalg.norm(pos - center, axis=1)
    if profile == "gaussian":
        shape = np.exp(-((r / inclusion_radius_m) ** 2) * 2.0)
    elif profile == "box":
        shape = (r <= inclusion_radius_m).astype(float)
    else:
        raise ValueError(f"unknown inclusion profile {profile!r}")
    blend = shape * below
    vals = vals + blend * (inclusion_speed - vals)
    return NodalField(grid, vals, unit="m/s")


def depth_profile_field(grid, water_depth_m, water_speed, top_speed, bottom_speed):
    """Speed varying with depth only: water above, a linear ramp below."""
    depth = grid.node_positions()[:, -1]
    vals = np.full(grid.n_nodes, float(water_speed))
    below = depth > water_depth_m
    span = grid.extent[-1] - water_depth_m
    ramp = top_speed + (bottom_speed - top_speed) * (depth - water_depth_m) / span
    vals[below] = ramp[below]
    return NodalField(grid, vals, unit="m/s")


def initial_depth_model(partition, water_depth_m, water_speed,
                        top_speed, bottom_speed, c_min, c_max):
    """Depth-only starting model projected onto the partition subspace."""
    field = depth_profile_field(partition.grid, water_depth_m, water_speed,
                                top_speed, bottom_speed)
    return fit_coefficients(field, partition, c_min, c_max, water_speed=water_speed)
