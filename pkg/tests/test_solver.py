from dataclasses import replace

import numpy as np
import pytest

from headfield.errors import ConvergenceError, LayoutError, NoConductivePathError
from headfield.geometry import ElectrodeLayout, place_pair
from headfield.phantom import PhantomSpec, default_phantom_spec, make_phantom
from headfield.solver import (
    PotentialSolution,
    SolveParams,
    assemble_system,
    field_magnitude,
    linearity_check,
    solve_potential,
)
from headfield.volume import (
    CSF,
    GREY,
    WHITE,
    GridMeta,
    LabelVolume,
    TissueEntry,
    TissueTable,
    default_tissue_table,
)


def uniform_table(pairs):
    """Tissue table with given {label: sigma}; eps fixed at 1."""
    entries = {0: TissueEntry(0.0, 1.0, "air")}
    for lab, sig in pairs.items():
        entries[lab] = TissueEntry(sig, 1.0)
    return TissueTable(entries)


from conftest import series_bar_oracle


class TestHomogeneousBar:
    def test_phi_linear_along_axis(self, bar_factory):
        vol, layout = bar_factory(ny=21, cross=5, spacing=1.0)
        table = uniform_table({WHITE: 1.0})
        sol = solve_potential(vol, table, layout, SolveParams(rel_residual_tol=1e-10))
        phi = sol.phi
        y = np.arange(21)
        expected = 1.0 - 2.0 * y / 20.0  # +1 V at y=0, -1 V at y=20
        for yy in range(21):
            np.testing.assert_allclose(phi[:, yy, :], expected[yy], atol=1e-8)
        assert abs(phi[2, 10, 2]) < 1e-8  # midplane

    def test_same_voltage_gives_constant(self, bar_factory):
        vol, layout = bar_factory(ny=11, cross=4)
        table = uniform_table({WHITE: 1.0})
        sol = solve_potential(
            vol, table, layout, SolveParams(voltage_a=1.0, voltage_b=1.0)
        )
        np.testing.assert_allclose(sol.phi[sol.solved_mask], 1.0, atol=1e-9)

    def test_field_magnitude_uniform(self, bar_factory):
        vol, layout = bar_factory(ny=21, cross=5, spacing=1.0)
        table = uniform_table({WHITE: 1.0})
        sol = solve_potential(vol, table, layout, SolveParams(rel_residual_tol=1e-10))
        emag = field_magnitude(sol).values
        # E = 2 V / 20 mm = 0.1 V/mm = 1 V/cm everywhere away from the faces
        interior = emag[:, 1:-1, :]
        np.testing.assert_allclose(interior, 1.0, rtol=1e-7)


@pytest.fixture(scope="module")
def two_layer():
    from conftest import make_bar

    ny = 21
    labels_by_y = {y: (WHITE if y < 10 else GREY) for y in range(ny)}
    vol, layout = make_bar(ny=ny, cross=5, spacing=1.0, labels_by_y=labels_by_y)
    table = uniform_table({WHITE: 1.0, GREY: 0.5})
    sol = solve_potential(vol, table, layout, SolveParams(rel_residual_tol=1e-11))
    return vol, layout, table, sol


class TestTwoLayerBar:

    def test_interface_potential_matches_series_oracle(self, two_layer):
        vol, layout, table, sol = two_layer
        sigmas = [1.0 if y < 10 else 0.5 for y in range(21)]
        want = series_bar_oracle(sigmas, 1.0, 1.0, -1.0)
        got = sol.phi[2, :, 2]
        np.testing.assert_allclose(got, want, atol=1e-8)

    def test_layer_fields_match_series_oracle(self, two_layer):
        vol, layout, table, sol = two_layer
        sigmas = [1.0 if y < 10 else 0.5 for y in range(21)]
        phi = series_bar_oracle(sigmas, 1.0, 1.0, -1.0)
        # oracle interior fields per layer, via central differences of the
        # oracle profile (V/mm -> V/cm)
        emag = field_magnitude(sol).values
        for y in (3, 6):  # interior of sigma=1.0 layer
            want = abs(phi[y + 1] - phi[y - 1]) / 2.0 * 10.0
            np.testing.assert_allclose(emag[2, y, 2], want, rtol=1e-7)
        for y in (14, 17):  # interior of sigma=0.5 layer
            want = abs(phi[y + 1] - phi[y - 1]) / 2.0 * 10.0
            np.testing.assert_allclose(emag[2, y, 2], want, rtol=1e-7)

    def test_field_ratio_is_inverse_conductivity_ratio(self, two_layer):
        _, _, _, sol = two_layer
        emag = field_magnitude(sol).values
        e1 = emag[2, 4, 2]
        e2 = emag[2, 16, 2]
        assert e2 / e1 == pytest.approx(2.0, rel=1e-6)


class TestFieldMagnitude:
    @staticmethod
    def manual_solution(meta, phi, mask=None):
        if mask is None:
            mask = np.ones(meta.dims, dtype=bool)
        return PotentialSolution(
            meta=meta,
            phi=phi,
            solved_mask=mask,
            conductive_mask=mask,
            iterations=0,
            final_residual=0.0,
            voltage_lo=float(phi.min()),
            voltage_hi=float(phi.max()),
        )

    def test_linear_potential_gives_10_v_per_cm(self):
        meta = GridMeta((6, 8, 6), (1.0, 1.0, 1.0))
        y = np.arange(8, dtype=np.float64)
        phi = np.broadcast_to(y[None, :, None], meta.dims).copy()
        sol = self.manual_solution(meta, phi)
        emag = field_magnitude(sol).values
        np.testing.assert_allclose(emag, 10.0, rtol=1e-12)

    def test_constant_potential_gives_zero(self):
        meta = GridMeta((4, 4, 4), (2.0, 2.0, 2.0))
        sol = self.manual_solution(meta, np.full(meta.dims, 3.0))
        assert np.all(field_magnitude(sol).values == 0.0)

    def test_air_gets_zero(self, small_phantom):
        layout = place_pair(small_phantom, "AP")
        sol = solve_potential(small_phantom, default_tissue_table(), layout)
        emag = field_magnitude(sol).values
        assert np.all(emag[~sol.solved_mask] == 0.0)


@pytest.fixture(scope="module")
def phantom_solution(small_phantom):
    layout = place_pair(small_phantom, "AP")
    table = default_tissue_table()
    params = SolveParams()
    sol = solve_potential(small_phantom, table, layout, params)
    return small_phantom, layout, table, params, sol


class TestInvariants:

    def test_maximum_principle(self, phantom_solution):
        *_, sol = phantom_solution
        phi = sol.phi[sol.solved_mask]
        assert phi.min() >= sol.voltage_lo
        assert phi.max() <= sol.voltage_hi

    def test_current_conservation(self, phantom_solution):
        vol, layout, table, params, sol = phantom_solution
        from headfield.volume import lookup_properties

        sigma = lookup_properties(table, vol)[0].values.astype(np.float64)
        sigma = np.where(sol.solved_mask, sigma, 0.0)
        dirichlet = layout.patch_mask(vol.meta)
        dir_vals = np.where(dirichlet, sol.phi, 0.0)
        A, b, uid = assemble_system(sigma, dirichlet, dir_vals, vol.meta.spacing)
        x = sol.phi[uid >= 0]
        residual = np.abs(A @ x - b)
        # net face current per unknown voxel, bounded by the residual contract
        assert residual.max() <= 10.0 * params.rel_residual_tol * np.linalg.norm(b)

    def test_linearity_on_phantom(self, phantom_solution):
        vol, layout, table, params, _ = phantom_solution
        report = linearity_check(vol, table, layout, params)
        assert report.max_rel_deviation < 1e-6

    def test_linearity_on_bar(self, bar_factory):
        vol, layout = bar_factory(ny=11, cross=4)
        report = linearity_check(vol, uniform_table({WHITE: 1.0}), layout)
        assert report.max_rel_deviation < 1e-9

    def test_permittivity_independence(self, small_phantom):
        layout = place_pair(small_phantom, "AP")
        base = default_tissue_table()
        bumped = TissueTable(
            {
                code: TissueEntry(e.sigma_S_per_m, e.eps_rel * 7.5 + 1.0, e.name)
                for code, e in base.entries.items()
            }
        )
        e1 = field_magnitude(solve_potential(small_phantom, base, layout)).values
        e2 = field_magnitude(solve_potential(small_phantom, bumped, layout)).values
        np.testing.assert_array_equal(e1, e2)

    def test_mirror_symmetry(self):
        spec = PhantomSpec(
            meta=GridMeta((24, 24, 24), (3.0, 3.0, 3.0)),
            seed=0,
            semi_axes_mm=(30.0, 30.0, 30.0),
            tumor_offset_mm=(0.0, 0.0, 0.0),
            jitter_semi_axes_mm=0.0,
            jitter_tumor_center_mm=0.0,
            jitter_tumor_radius_mm=0.0,
        )
        vol = make_phantom(spec)
        layout = place_pair(vol, "LR")
        tol = 1e-10
        sol = solve_potential(
            vol, default_tissue_table(), layout, SolveParams(rel_residual_tol=tol)
        )
        emag = field_magnitude(sol).values
        flipped = emag[::-1, :, :]
        scale = emag.max()
        assert np.abs(emag - flipped).max() <= 10 * tol * scale


class TestErrorPaths:
    def test_no_conductive_path(self):
        meta = GridMeta((9, 5, 5), (1.0, 1.0, 1.0))
        labels = np.zeros(meta.dims, dtype=np.uint8)
        labels[0:3] = WHITE  # island A
        labels[6:9] = WHITE  # island B
        vol = LabelVolume(meta, labels)
        layout = ElectrodeLayout(
            "LR",
            [meta.linear_index(0, 2, 2)],
            [meta.linear_index(8, 2, 2)],
            (0.0, 2.0, 2.0),
            (8.0, 2.0, 2.0),
            1.0,
        )
        with pytest.raises(NoConductivePathError):
            solve_potential(vol, uniform_table({WHITE: 1.0}), layout)

    def test_disconnected_island_excluded(self):
        # a powered bar plus a floating conductive blob separated by air
        dims = (8, 15, 8)
        meta = GridMeta(dims, (1.0, 1.0, 1.0))
        arr = np.zeros(dims, dtype=np.uint8)
        arr[0:5, :, 0:5] = WHITE  # main bar
        arr[6:8, 6:8, 6:8] = WHITE  # floating island
        vol = LabelVolume(meta, arr)
        xs, zs = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
        la = meta.linear_index(xs.ravel(), np.zeros(25, dtype=int), zs.ravel())
        lb = meta.linear_index(xs.ravel(), np.full(25, 14), zs.ravel())
        layout = ElectrodeLayout("AP", np.sort(la), np.sort(lb), (2, 0, 2), (2, 14, 2), 0.0)
        sol = solve_potential(vol, uniform_table({WHITE: 1.0}), layout)
        assert not sol.solved_mask[6:8, 6:8, 6:8].any()
        assert sol.conductive_mask[7, 7, 7]
        emag = field_magnitude(sol).values
        assert np.all(emag[6:8, 6:8, 6:8] == 0.0)

    def test_iteration_budget_exhausted(self, small_phantom):
        layout = place_pair(small_phantom, "AP")
        with pytest.raises(ConvergenceError, match="budget"):
            solve_potential(
                small_phantom,
                default_tissue_table(),
                layout,
                SolveParams(rel_residual_tol=1e-12, max_iterations=3),
            )

    def test_patch_off_surface_rejected(self, small_phantom):
        meta = small_phantom.meta
        cx, cy, cz = (d // 2 for d in meta.dims)
        inner = meta.linear_index(cx, cy, cz)
        good = place_pair(small_phantom, "AP")
        bad = ElectrodeLayout(
            "AP", [int(inner)], good.patch_b, (cx * 4.0, cy * 4.0, cz * 4.0),
            good.center_b, 1.0,
        )
        with pytest.raises(LayoutError, match="surface"):
            solve_potential(small_phantom, default_tissue_table(), bad)

    def test_tolerance_validated(self):
        with pytest.raises(ValueError):
            SolveParams(rel_residual_tol=0.0)
