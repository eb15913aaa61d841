import numpy as np
import pytest
from scipy.special import hankel1

from cauchyfwi.acquisition import receiver_layer
from cauchyfwi.errors import AssemblyError, InvalidSourceError
from cauchyfwi.geometry import Grid, NodalField
from cauchyfwi.helmholtz import (
    PhysicsConfig,
    SourceSpec,
    assemble,
    points_per_wavelength,
    read_field_structured_points,
    traces,
    write_field_structured_points,
)


PHYS = PhysicsConfig(freq_hz=25.0, water_speed=1500.0)


def constant_speed(grid, c=1500.0):
    return NodalField(grid, np.full(grid.n_nodes, c), unit="m/s")


def dense_reference_matrix(grid, speed, phys, free_surface=True):
    """Hand-rolled dense assembly, node by node, for cross-checking.

    Centered interior stencil, ghost-eliminated radiation rows with the
    2^-(boundary faces) scaling, Dirichlet identity rows on the top face.
    """
    dim = grid.dim
    shape = grid.shape
    h = grid.spacing
    k2 = phys.k ** 2
    ik0 = 1j * phys.absorbing_k0
    c = speed.values
    m = grid.n_nodes
    a = np.zeros((m, m), dtype=complex)

    def flat(multi):
        return int(np.ravel_multi_index(multi, shape))

    for multi in np.ndindex(*shape):
        row = flat(multi)
        if free_surface and multi[-1] == 0:
            a[row, row] = 1.0
            continue
        n_bound = 0
        entries = {row: k2 / c[row] ** 2}
        for d in range(dim):
            entries[row] = entries[row] - 2.0 / h[d] ** 2
            for step in (-1, +1):
                nb = list(multi)
                nb[d] += step
                if 0 <= nb[d] < shape[d]:
                    col = flat(tuple(nb))
                    entries[col] = entries.get(col, 0.0) + 1.0 / h[d] ** 2
                else:
                    # ghost: u_ghost = u_mirror + 2 h i k0 u_center
                    mirror = list(multi)
                    mirror[d] -= step
                    col = flat(tuple(mirror))
                    entries[col] = entries.get(col, 0.0) + 1.0 / h[d] ** 2
                    entries[row] = entries[row] + 2.0 * ik0 / h[d]
            if multi[d] == 0 or multi[d] == shape[d] - 1:
                n_bound += 1
        scale = 0.5 ** n_bound
        for col, val in entries.items():
            if free_surface:
                col_multi = np.unravel_index(col, shape)
                if col_multi[-1] == 0:
                    continue
            a[row, col] = val * scale
    return a


class TestAssemble:
    def test_interior_stencil_on_3x3(self):
        grid = Grid((20.0, 20.0), (3, 3))
        speed = constant_speed(grid)
        system = assemble(grid, speed, PHYS)
        a = system.matrix.toarray()
        assert a.shape == (9, 9)
        h = 10.0
        center = grid.ravel_index((1, 1))
        expected_diag = -4.0 / h ** 2 + PHYS.k ** 2 / 1500.0 ** 2
        assert a[center, center] == pytest.approx(expected_diag, rel=1e-14)
        for nb in ((0, 1), (2, 1), (1, 2)):
            col = grid.ravel_index(nb)
            assert a[center, col] == pytest.approx(1.0 / h ** 2, rel=1e-14)
        # the (1, 0) neighbor sits on the pressure-free face: dropped
        assert a[center, grid.ravel_index((1, 0))] == 0.0

    @pytest.mark.parametrize("free_surface", [True, False])
    def test_matrix_symmetric_entrywise(self, free_surface):
        grid = Grid((50.0, 40.0), (6, 5))
        rng = np.random.default_rng(2)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS, free_surface=free_surface)
        diff = (system.matrix - system.matrix.T).toarray()
        assert np.max(np.abs(diff)) == 0.0

    def test_matrix_symmetric_3d(self):
        grid = Grid((30.0, 24.0, 20.0), (4, 4, 3))
        rng = np.random.default_rng(3)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS)
        diff = (system.matrix - system.matrix.T).toarray()
        assert np.max(np.abs(diff)) == 0.0

    @pytest.mark.parametrize("free_surface", [True, False])
    def test_matches_dense_reference_on_4x4(self, free_surface):
        grid = Grid((30.0, 30.0), (4, 4))
        rng = np.random.default_rng(4)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS, free_surface=free_surface)
        ref = dense_reference_matrix(grid, speed, PHYS, free_surface)
        got = system.matrix.toarray()
        assert np.max(np.abs(got - ref)) <= 1e-13 * np.max(np.abs(ref))

    def test_matches_dense_reference_3d(self):
        grid = Grid((20.0, 20.0, 20.0), (3, 3, 3))
        rng = np.random.default_rng(5)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS)
        ref = dense_reference_matrix(grid, speed, PHYS)
        got = system.matrix.toarray()
        assert np.max(np.abs(got - ref)) <= 1e-13 * np.max(np.abs(ref))

    def test_nonfinite_speed_rejected(self):
        grid = Grid((30.0, 30.0), (4, 4))
        vals = np.full(grid.n_nodes, 1500.0)
        vals[5] = np.nan
        with pytest.raises(AssemblyError):
            assemble(grid, NodalField(grid, vals), PHYS)

    def test_points_per_wavelength(self):
        grid = Grid((600.0, 300.0), (81, 41))
        assert points_per_wavelength(grid, PHYS, 1500.0) == pytest.approx(8.0)


class TestSolve:
    def test_zero_rhs_gives_zero(self):
        grid = Grid((40.0, 40.0), (5, 5))
        system = assemble(grid, constant_speed(grid), PHYS)
        x = system.solve(np.zeros(grid.n_nodes, dtype=complex))
        assert np.all(x == 0)

    def test_residual_bound(self):
        grid = Grid((40.0, 40.0), (5, 5))
        system = assemble(grid, constant_speed(grid), PHYS)
        rng = np.random.default_rng(6)
        b = rng.normal(size=grid.n_nodes) + 1j * rng.normal(size=grid.n_nodes)
        x = system.solve(b)
        residual = np.linalg.norm(system.matrix @ x - b)
        assert residual <= 1e-10 * np.linalg.norm(b)

    def test_agrees_with_dense_lu(self):
        grid = Grid((40.0, 40.0), (5, 5))
        rng = np.random.default_rng(7)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS)
        b = rng.normal(size=grid.n_nodes) + 1j * rng.normal(size=grid.n_nodes)
        x = system.solve(b)
        x_dense = np.linalg.solve(system.matrix.toarray(), b)
        assert np.linalg.norm(x - x_dense) <= 1e-10 * np.linalg.norm(x_dense)

    def test_solve_linear_in_rhs(self):
        grid = Grid((40.0, 40.0), (5, 5))
        system = assemble(grid, constant_speed(grid), PHYS)
        rng = np.random.default_rng(8)
        b1 = rng.normal(size=grid.n_nodes) + 1j * rng.normal(size=grid.n_nodes)
        b2 = rng.normal(size=grid.n_nodes) + 1j * rng.normal(size=grid.n_nodes)
        a, c = 1.3 - 0.2j, -0.7 + 2.1j
        lhs = system.solve(a * b1 + c * b2)
        rhs = a * system.solve(b1) + c * system.solve(b2)
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_block_solve_matches_column_solves(self):
        grid = Grid((40.0, 40.0), (5, 5))
        system = assemble(grid, constant_speed(grid), PHYS)
        rng = np.random.default_rng(9)
        b = rng.normal(size=(grid.n_nodes, 3)) + 1j * rng.normal(size=(grid.n_nodes, 3))
        block = system.solve(b)
        for col in range(3):
            single = system.solve(b[:, col])
            assert np.allclose(block[:, col], single, rtol=0, atol=1e-14)


class TestGreen:
    def test_reciprocity_between_interior_points(self):
        grid = Grid((100.0, 80.0), (21, 17))
        rng = np.random.default_rng(10)
        speed = NodalField(grid, rng.uniform(1400, 1700, grid.n_nodes))
        system = assemble(grid, speed, PHYS)
        src_a = SourceSpec.from_position(grid, (30.0, 40.0))
        src_b = SourceSpec.from_position(grid, (70.0, 25.0))
        g_a = system.green(src_a)
        g_b = system.green(src_b)
        lhs = g_a.values[src_b.node]
        rhs = g_b.values[src_a.node]
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_dirichlet_trace_exactly_zero(self):
        grid = Grid((100.0, 80.0), (21, 17))
        system = assemble(grid, constant_speed(grid), PHYS)
        field = system.green(SourceSpec.from_position(grid, (50.0, 40.0)))
        top = field.values[grid.free_surface_mask()]
        assert np.all(top == 0.0)

    def test_source_on_free_surface_rejected(self):
        grid = Grid((100.0, 80.0), (21, 17))
        with pytest.raises(InvalidSourceError):
            SourceSpec.from_position(grid, (50.0, 0.0))

    def test_free_space_magnitude_all_robin(self):
        # homogeneous medium, radiation condition on every face: |G| must
        # track the outgoing free-space response at mid-range radii
        grid = Grid((360.0, 360.0), (97, 97))
        system = assemble(grid, constant_speed(grid), PHYS, free_surface=False)
        center = (180.0, 180.0)
        field = system.green(SourceSpec.from_position(grid, center))
        kappa = PHYS.k / 1500.0
        pos = grid.node_positions()
        r = np.linalg.norm(pos - np.array(center), axis=1)
        h = grid.spacing[0]
        ring = (r >= 2 * h) & (r <= 90.0)
        exact = np.abs(0.25j * hankel1(0, kappa * r[ring]))
        got = np.abs(field.values[ring])
        rel = np.abs(got - exact) / exact
        assert np.median(rel) < 0.05
        assert rel.max() < 0.10


class TestTraces:
    def test_depth_linear_field_has_unit_upward_derivative(self):
        grid = Grid((100.0, 80.0), (11, 9))
        receivers = receiver_layer(grid, depth_m=40.0)
        field = NodalField(grid, grid.node_positions()[:, -1])
        vals, dnu = traces(field, receivers)
        assert np.allclose(vals, 40.0)
        assert np.allclose(dnu, -1.0, atol=1e-13)

    def test_constant_field_has_zero_derivative(self):
        grid = Grid((100.0, 80.0), (11, 9))
        receivers = receiver_layer(grid, depth_m=40.0)
        field = NodalField(grid, np.full(grid.n_nodes, 3.3))
        _, dnu = traces(field, receivers)
        assert np.all(dnu == 0.0)

    def test_centered_difference_converges_second_order(self):
        def smooth(grid):
            pos = grid.node_positions()
            return NodalField(grid, np.sin(0.05 * pos[:, 0]) * np.exp(-0.02 * pos[:, 1]))

        errors = []
        for shape in ((11, 9), (21, 17)):
            grid = Grid((100.0, 80.0), shape)
            receivers = receiver_layer(grid, depth_m=40.0, count=5, margin_m=10.0)
            _, dnu = traces(smooth(grid), receivers)
            x = receivers.positions[:, 0]
            exact = 0.02 * np.sin(0.05 * x) * np.exp(-0.02 * 40.0)
            errors.append(np.max(np.abs(dnu - exact)))
        order = np.log2(errors[0] / errors[1])
        assert order >= 1.8


class TestSolverBreakdown:
    def test_singular_factorization_reported(self):
        from cauchyfwi.errors import SolverBreakdownError
        from cauchyfwi.helmholtz import HelmholtzSystem
        import scipy.sparse as sp

        grid = Grid((20.0, 20.0), (3, 3))
        speed = constant_speed(grid)
        singular = sp.csc_matrix((9, 9), dtype=complex)
        system = HelmholtzSystem(grid, speed, PHYS, singular, True,
                                 grid.free_surface_mask())
        with pytest.raises(SolverBreakdownError):
            system.factorization


class TestFieldExport:
    def test_structured_points_round_trip(self, tmp_path):
        grid = Grid((50.0, 30.0), (6, 4))
        rng = np.random.default_rng(12)
        field = NodalField(grid, rng.normal(size=grid.n_nodes))
        path = tmp_path / "field.txt"
        write_field_structured_points(field, path)
        back = read_field_structured_points(path)
        assert back.grid == grid
        assert np.array_equal(back.values, field.values)
