"""Acquisition geometry, synthetic Cauchy data, noise injection, and IO.

Receivers sit on one horizontal node layer; each carries a trapezoid
surface-quadrature weight over the receiver lattice.  Observation data are
a pair of complex matrices per frequency: the pressure trace and its normal
derivative for every (source, receiver) combination, as recorded by dual
sensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import helmholtz
from .errors import (
    AlignmentError,
    DataFormatError,
    GeometryError,
    UndefinedSnrError,
)
from .geometry import Grid
from .helmholtz import SourceSpec, assemble


def _trapezoid_weights(coords):
    """Trapezoid weights of a sorted 1D lattice; exact for constants."""
    x = np.asarray(coords, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two lattice points per axis")
    w = np.empty_like(x)
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    if x.size > 2:
        w[1:-1] = 0.5 * (x[2:] - x[:-2])
    return w


@dataclass(frozen=True, eq=False)
class ReceiverArray:
    """Dual-sensor receivers on a horizontal node layer.

    Attributes:
        grid: grid the node indices refer to
        depth_index: node layer of the surface (0 < depth_index < nz-1)
        lateral_indices: (n, dim-1) lateral node indices per receiver
        weights: surface quadrature weight per receiver, m^(dim-1)
        upward_normal: normal points from the unknown region up toward the
            sources when True
    """

    grid: Grid
    depth_index: int
    lateral_indices: np.ndarray
    weights: np.ndarray
    upward_normal: bool = True

    def __post_init__(self):
        lat = np.atleast_2d(np.asarray(self.lateral_indices, dtype=np.int64))
        if lat.shape[1] != self.grid.dim - 1:
            raise AlignmentError("need dim-1 lateral indices per receiver")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != lat.shape[0]:
            raise GeometryError("one weight per receiver required")
        if (w <= 0).any():
            raise GeometryError("receiver weights must be positive")
        if not 0 < self.depth_index < self.grid.shape[-1] - 1:
            raise AlignmentError(
                "receiver layer must be strictly inside the domain"
            )
        for d in range(self.grid.dim - 1):
            if lat[:, d].min() < 0 or lat[:, d].max() >= self.grid.shape[d]:
                raise AlignmentError("receiver lateral index outside the grid")
        lat = lat.copy()
        lat.setflags(write=False)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "lateral_indices", lat)
        object.__setattr__(self, "weights", w)

    @property
    def n_receivers(self):
        return self.lateral_indices.shape[0]

    @property
    def depth_m(self):
        return self.depth_index * self.grid.spacing[-1]

    def _nodes_at(self, layer):
        multi = np.column_stack(
            [self.lateral_indices, np.full(self.n_receivers, layer, dtype=np.int64)]
        )
        return np.ravel_multi_index(tuple(multi.T), self.grid.shape)

    @property
    def value_nodes(self):
        return self._nodes_at(self.depth_index)

    @property
    def above_nodes(self):
        return self._nodes_at(self.depth_index - 1)

    @property
    def below_nodes(self):
        return self._nodes_at(self.depth_index + 1)

    @property
    def positions(self):
        lat = self.lateral_indices * np.array(self.grid.spacing[:-1])
        depth = np.full((self.n_receivers, 1), self.depth_m)
        return np.hstack([lat, depth])

    def on_grid(self, other):
        """The same physical receivers indexed on a node-compatible grid."""
        ratios = [hs / ho for hs, ho in zip(self.grid.spacing, other.spacing)]
        for r in ratios:
            if abs(r - round(r)) > 1e-9 or round(r) < 1:
                raise AlignmentError(
                    "target grid is not a refinement of the receiver grid"
                )
        if other.extent != self.grid.extent:
            raise AlignmentError("grids cover different extents")
        f_lat = [int(round(r)) for r in ratios[:-1]]
        f_z = int(round(ratios[-1]))
        lat = self.lateral_indices * np.array(f_lat, dtype=np.int64)
        return ReceiverArray(
            other, self.depth_index * f_z, lat, self.weights, self.upward_normal
        )


def receiver_layer(grid, depth_m, count=0, margin_m=0.0, upward_normal=True):
    """Receivers on the node layer nearest depth_m.

    count = 0 places one receiver on every lateral node; otherwise count
    nodes per lateral axis are spread evenly between the margins.  Weights
    are trapezoid over the resulting lattice.
    """
    hz = grid.spacing[-1]
    layer = int(round(depth_m / hz))
    if abs(layer * hz - depth_m) > 1e-6 * hz:
        raise AlignmentError(
            f"receiver depth {depth_m} m is not on a node layer (hz = {hz} m)"
        )
    axes = []
    for d in range(grid.dim - 1):
        h = grid.spacing[d]
        if count == 0:
            idx = np.arange(grid.shape[d])
        else:
            if count < 2:
                raise GeometryError("need at least 2 receivers per axis")
            lo = int(math.ceil(margin_m / h - 1e-9))
            hi = int(math.floor((grid.extent[d] - margin_m) / h + 1e-9))
            if hi - lo + 1 < count:
                raise GeometryError("too many receivers for the available nodes")
            idx = np.unique(np.round(np.linspace(lo, hi, count)).astype(np.int64))
        axes.append(idx)
    mesh = np.meshgrid(*axes, indexing="ij")
    lat = np.column_stack([m.ravel() for m in mesh])
    w = np.ones(lat.shape[0])
    for d, idx in enumerate(axes):
        axis_w = _trapezoid_weights(idx * grid.spacing[d])
        w *= axis_w[np.searchsorted(idx, lat[:, d])]
    return ReceiverArray(grid, layer, lat, w, upward_normal)


@dataclass(frozen=True, eq=False)
class SourceSet:
    """Ordered impulse positions with uniform midpoint quadrature weights."""

    positions: np.ndarray
    weights: np.ndarray
    role: str = "observation"

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != pos.shape[0]:
            raise GeometryError("one weight per source required")
        if (w <= 0).any():
            raise GeometryError("source weights must be positive")
        if self.role not in ("observation", "simulation"):
            raise ValueError(f"unknown source role {self.role!r}")
        pos = pos.copy()
        pos.setflags(write=False)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def n_sources(self):
        return self.positions.shape[0]


def source_lattice(grid, depth_m, count, margin_m=0.0, role="observation",
                   depth_span_m=0.0, n_layers=1):
    """Evenly spaced sources at depth_m (planar) or over a depth span.

    count sources per lateral axis sit between the lateral margins; with
    n_layers > 1 the set becomes volumetric over [depth_m, depth_m +
    depth_span_m].  Weights are the uniform midpoint cell measures of the
    source region: m^(dim-1) for planar sets, m^dim for volumetric ones.
    """
    if count < 1:
        raise GeometryError("need at least one source per axis")
    lat_axes = []
    cell = 1.0
    for d in range(grid.dim - 1):
        span = grid.extent[d] - 2 * margin_m
        if span <= 0:
            raise GeometryError("source margins leave no room")
        # midpoint lattice: count cells of width span/count
        centers = margin_m + (np.arange(count) + 0.5) * span / count
        lat_axes.append(centers)
        cell *= span / count
    if n_layers < 1:
        raise GeometryError("need at least one source layer")
    if n_layers == 1:
        depths = np.array([depth_m])
    else:
        if depth_span_m <= 0:
            raise GeometryError("volumetric source set needs a positive depth span")
        depths = depth_m + (np.arange(n_layers) + 0.5) * depth_span_m / n_layers
        cell *= depth_span_m / n_layers
    if depths.min() <= 0 or depths.max() >= grid.extent[-1]:
        raise GeometryError("sources must sit strictly inside the domain, off the surface")
    mesh = np.meshgrid(*lat_axes, depths, indexing="ij")
    pos = np.column_stack([m.ravel() for m in mesh])
    return SourceSet(pos, np.full(pos.shape[0], cell), role)


def validate_geometry(sources, receivers, grid):
    """Sources must sit at least two layers above the receiver surface."""
    hz = grid.spacing[-1]
    sigma_depth = receivers.depth_index * hz
    gap = sigma_depth - sources.positions[:, -1].max()
    if gap < 2 * hz - 1e-9:
        raise GeometryError(
            f"sources must sit at least {2 * hz} m above the receiver layer, "
            f"closest approach is {gap} m"
        )


@dataclass(frozen=True)
class Provenance:
    """How a data set was made: synthesis grid, noise seed, target SNR."""

    grid_shape: tuple
    grid_extent: tuple
    snr_db: float
    seed: int


@dataclass(frozen=True, eq=False)
class CauchyDataSet:
    """Per-source pressure and normal-derivative traces on the receivers."""

    receivers: ReceiverArray
    obs_sources: SourceSet
    g: np.ndarray
    dg: np.ndarray
    freq_hz: float
    provenance: Provenance

    def __post_init__(self):
        shape = (self.obs_sources.n_sources, self.receivers.n_receivers)
        g = np.asarray(self.g, dtype=complex)
        dg = np.asarray(self.dg, dtype=complex)
        if g.shape != shape or dg.shape != shape:
            raise GeometryError(
                f"trace matrices must have shape {shape}, got {g.shape} and {dg.shape}"
            )
        if not (np.isfinite(g).all() and np.isfinite(dg).all()):
            raise ValueError("traces contain non-finite values")
        g = g.copy()
        g.setflags(write=False)
        dg = dg.copy()
        dg.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "dg", dg)

    @property
    def n_sources(self):
        return self.obs_sources.n_sources

    @property
    def n_receivers(self):
        return self.receivers.n_receivers


def synthesize(true_field, obs_sources, receivers, phys):
    """Solve the true model once per observation source and record traces.

    true_field may live on a refinement of the receiver grid; receiver
    positions must coincide with its nodes.  Every source is one solve
    against a shared factorization.
    """
    fine = true_field.grid
    rec_fine = receivers.on_grid(fine)
    validate_geometry(obs_sources, rec_fine, fine)
    system = assemble(fine, true_field, phys)
    specs = [SourceSpec.from_position(fine, p) for p in obs_sources.positions]
    fields = system.green_many(specs)
    g, dg = helmholtz.traces_many(fields, fine, rec_fine)
    prov = Provenance(fine.shape, fine.extent, math.inf, 0)
    return CauchyDataSet(receivers, obs_sources, g, dg, phys.freq_hz, prov)


def add_noise(data, snr_db, seed):
    """Add circular complex Gaussian noise at a target SNR in dB.

    Noise is drawn independently for every source, receiver, and component;
    the per-trace variance is the trace's mean power scaled by
    10^(-snr/10).  A +inf SNR disables noise.  Deterministic per seed.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return replace(data, provenance=replace(data.provenance, snr_db=math.inf, seed=seed))
    rng = np.random.default_rng(seed)
    factor = 10.0 ** (-snr_db / 10.0)
    g = np.array(data.g)
    dg = np.array(data.dg)
    for mat, name in ((g, "pressure"), (dg, "derivative")):
        for s in range(mat.shape[0]):
            power = np.mean(np.abs(mat[s]) ** 2)
            if power == 0:
                raise UndefinedSnrError(
                    f"{name} trace of source {s} is identically zero"
                )
            sigma = math.sqrt(power * factor / 2.0)
            noise = sigma * (
                rng.standard_normal(mat.shape[1])
                + 1j * rng.standard_normal(mat.shape[1])
            )
            mat[s] += noise
    prov = replace(data.provenance, snr_db=float(snr_db), seed=int(seed))
    return CauchyDataSet(data.receivers, data.obs_sources, g, dg, data.freq_hz, prov)


def write_data(data, path):
    """Text format: header lines then one CSV row per (source, receiver)."""
    snr = data.provenance.snr_db
    snr_text = "inf" if math.isinf(snr) else f"{snr:.17g}"
    lines = [
        "cauchy v1",
        f"freq {data.freq_hz:.17g}",
        f"nsrc {data.n_sources}",
        f"nrcv {data.n_receivers}",
        f"snr {snr_text}",
        f"seed {data.provenance.seed}",
        "grid " + " ".join(
            [str(len(data.provenance.grid_shape))]
            + [str(n) for n in data.provenance.grid_shape]
            + [f"{e:.17g}" for e in data.provenance.grid_extent]
        ),
    ]
    for s in range(data.n_sources):
        for r in range(data.n_receivers):
            gv, dv = data.g[s, r], data.dg[s, r]
            lines.append(
                f"{s}, {r}, {gv.real:.17g}, {gv.imag:.17g}, "
                f"{dv.real:.17g}, {dv.imag:.17g}"
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_data(path, receivers, obs_sources, expect_freq=None):
    """Read a data file back; receivers and sources come from geometry files.

    Raises DataFormatError naming the byte offset of the first problem.
    """
    with open(path, "rb") as f:
        raw = f.read()
    offset = 0
    lines = []
    for chunk in raw.split(b"\n"):
        lines.append((offset, chunk.decode("utf-8", errors="replace")))
        offset += len(chunk) + 1
    lines = [(off, ln.strip()) for off, ln in lines if ln.strip()]

    def take(i, prefix):
        if i >= len(lines):
            raise DataFormatError(f"{path}: truncated before {prefix!r}", len(raw))
        off, ln = lines[i]
        if not ln.startswith(prefix):
            raise DataFormatError(f"{path}: expected {prefix!r}, got {ln!r}", off)
        return off, ln[len(prefix):].strip()

    _, version = take(0, "cauchy")
    if version != "v1":
        raise DataFormatError(f"{path}: unsupported version {version!r}", lines[0][0])
    off, freq_text = take(1, "freq")
    freq = float(freq_text)
    if expect_freq is not None and abs(freq - expect_freq) > 1e-9 * max(1.0, expect_freq):
        raise DataFormatError(
            f"{path}: file frequency {freq} Hz does not match expected {expect_freq} Hz",
            off,
        )
    off, nsrc_text = take(2, "nsrc")
    nsrc = int(nsrc_text)
    off, nrcv_text = take(3, "nrcv")
    nrcv = int(nrcv_text)
    _, snr_text = take(4, "snr")
    snr = math.inf if snr_text == "inf" else float(snr_text)
    _, seed_text = take(5, "seed")
    seed = int(seed_text)
    off, grid_text = take(6, "grid")
    toks = grid_text.split()
    gdim = int(toks[0])
    if len(toks) != 1 + 2 * gdim:
        raise DataFormatError(f"{path}: malformed grid provenance", off)
    gshape = tuple(int(t) for t in toks[1 : 1 + gdim])
    gextent = tuple(float(t) for t in toks[1 + gdim :])

    if nsrc != obs_sources.n_sources:
        raise DataFormatError(
            f"{path}: {nsrc} sources in file, geometry has {obs_sources.n_sources}",
            lines[2][0],
        )
    if nrcv != receivers.n_receivers:
        raise DataFormatError(
            f"{path}: {nrcv} receivers in file, geometry has {receivers.n_receivers}",
            lines[3][0],
        )

    g = np.zeros((nsrc, nrcv), dtype=complex)
    dg = np.zeros((nsrc, nrcv), dtype=complex)
    body = lines[7:]
    if len(body) != nsrc * nrcv:
        off = body[-1][0] if body else len(raw)
        raise DataFormatError(
            f"{path}: expected {nsrc * nrcv} trace rows, found {len(body)}", off
        )
    for off, ln in body:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != 6:
            raise DataFormatError(f"{path}: malformed trace row {ln!r}", off)
        try:
            s, r = int(parts[0]), int(parts[1])
            nums = [float(p) for p in parts[2:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}", off) from exc
        if not (0 <= s < nsrc and 0 <= r < nrcv):
            raise DataFormatError(f"{path}: trace index ({s}, {r}) out of range", off)
        g[s, r] = complex(nums[0], nums[1])
        dg[s, r] = complex(nums[2], nums[3])
    prov = Provenance(gshape, gextent, snr, seed)
    return CauchyDataSet(receivers, obs_sources, g, dg, freq, prov)


def write_geometry_csv(path, positions, weights):
    """CSV rows 'id, x,[ y,] z, weight' for receivers or sources."""
    with open(path, "w") as f:
        for i, (pos, w) in enumerate(zip(np.atleast_2d(positions), weights)):
            coords = ", ".join(f"{x:.17g}" for x in pos)
            f.write(f"{i}, {coords}, {w:.17g}\n")


def read_geometry_csv(path, dim):
    positions = []
    weights = []
    with open(path) as f:
        for ln in f:
            ln = ln.strip()
            if not ln:
                continue
            parts = [p.strip() for p in ln.split(",")]
            if len(parts) != dim + 2:
                raise DataFormatError(f"{path}: malformed geometry row {ln!r}")
            positions.append([float(p) for p in parts[1 : 1 + dim]])
            weights.append(float(parts[-1]))
    return np.array(positions), np.array(weights)
