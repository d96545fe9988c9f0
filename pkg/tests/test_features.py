import numpy as np
import pytest

from headfield.errors import DatasetError
from headfield.features import (
    FeatureDataset,
    air_target_count,
    dataset_to_csv,
    extract_features,
    feature_matrix,
    load_dataset,
    save_dataset,
    split_loocv,
    subsample_air,
)
from headfield.geometry import place_pair
from headfield.solver import field_magnitude, solve_potential
from headfield.volume import AIR, CSF, GridMeta, default_tissue_table


@pytest.fixture(scope="module")
def case(small_phantom):
    layout = place_pair(small_phantom, "AP")
    table = default_tissue_table()
    sol = solve_potential(small_phantom, table, layout)
    gold = field_magnitude(sol)
    ds = extract_features(small_phantom, table, layout, gold, phantom_id="p0")
    return small_phantom, layout, table, gold, ds


def synthetic_dataset(tissue, seed=0, phantom_id="p", axis="AP"):
    """Dataset with given tissue codes and arbitrary valid columns."""
    rng = np.random.default_rng(seed)
    n = len(tissue)
    feats = np.abs(rng.standard_normal((n, 5))).astype(np.float32)
    return FeatureDataset(
        phantom_id=phantom_id,
        axis=axis,
        meta=GridMeta((n, 1, 1), (1.0, 1.0, 1.0)),
        features=feats,
        target=np.abs(rng.standard_normal(n)).astype(np.float32),
        voxel_index=np.arange(n, dtype=np.int64),
        tissue=np.asarray(tissue, dtype=np.uint8),
    )


class TestExtract:
    def test_row_count_is_full_grid(self, case):
        vol, *_ , ds = case
        assert ds.n_rows == vol.meta.n_voxels

    def test_chosen_row_matches_independent_recompute(self, case):
        vol, layout, table, gold, ds = case
        meta = vol.meta
        spacing = np.asarray(meta.spacing)
        rng = np.random.default_rng(5)
        patch_pts = np.stack(
            [np.asarray(meta.coords_of(i)) for i in np.concatenate([layout.patch_a, layout.patch_b])]
        ) * spacing
        csf_pts = np.argwhere(vol.labels == CSF) * spacing
        p0 = np.asarray(layout.center_a)
        p1 = np.asarray(layout.center_b)
        seg = p1 - p0
        for i in rng.integers(0, ds.n_rows, 20):
            row = ds.row(int(i))
            x, y, z = (int(v) for v in meta.coords_of(row.voxel_index))
            p = np.array([x, y, z]) * spacing
            code = int(vol.labels[x, y, z])
            assert row.tissue == code
            assert row.conductivity == np.float32(table.sigma(code))
            assert row.permittivity == np.float32(table.eps(code))
            d_e = np.linalg.norm(patch_pts - p, axis=1).min()
            d_c = np.linalg.norm(csf_pts - p, axis=1).min()
            t = np.clip(np.dot(p - p0, seg) / np.dot(seg, seg), 0, 1)
            d_l = np.linalg.norm(p - (p0 + t * seg))
            assert row.dist_electrode_mm == pytest.approx(d_e, rel=1e-6)
            assert row.dist_csf_mm == pytest.approx(d_c, rel=1e-6)
            assert row.dist_midline_mm == pytest.approx(d_l, rel=1e-6)
            assert row.target_v_per_cm == np.float32(gold.values[x, y, z])

    def test_patch_voxels_have_zero_electrode_distance(self, case):
        *_, ds = case
        vol, layout = case[0], case[1]
        patch = set(layout.patch_a.tolist()) | set(layout.patch_b.tolist())
        sel = np.isin(ds.voxel_index, list(patch))
        assert np.all(ds.features[sel, 2] == 0.0)

    def test_csf_voxels_have_zero_csf_distance(self, case):
        *_, ds = case
        sel = ds.tissue == CSF
        assert np.all(ds.features[sel, 3] == 0.0)

    def test_meta_mismatch_rejected(self, case):
        vol, layout, table, gold, _ = case
        from headfield.volume import ScalarField

        wrong = ScalarField(GridMeta((2, 2, 2), (1, 1, 1)), np.zeros((2, 2, 2)), "volt-per-cm")
        with pytest.raises(DatasetError, match="grids"):
            extract_features(vol, table, layout, wrong)

    def test_feature_matrix_works_without_gold(self, case):
        vol, layout, table, *_ = case
        X = feature_matrix(vol, table, layout)
        assert X.shape == (vol.meta.n_voxels, 5)


class TestSubsample:
    def test_mean_count_formula(self):
        tissue = [0] * 1000 + [1] * 100 + [2] * 200 + [3] * 300
        ds = synthetic_dataset(tissue)
        assert air_target_count(ds.tissue) == 200
        sub = subsample_air(ds, seed=1)
        assert int((sub.tissue == AIR).sum()) == 200
        # non-air rows untouched
        for code, count in ((1, 100), (2, 200), (3, 300)):
            assert int((sub.tissue == code).sum()) == count

    def test_no_air_unchanged(self):
        ds = synthetic_dataset([1, 2, 3, 4] * 10)
        sub = subsample_air(ds, seed=0)
        assert sub is ds

    def test_air_below_target_unchanged(self):
        ds = synthetic_dataset([0] * 5 + [1] * 100 + [2] * 300)
        sub = subsample_air(ds, seed=0)
        assert sub.n_rows == ds.n_rows

    def test_deterministic(self):
        ds = synthetic_dataset([0] * 500 + [1] * 50 + [5] * 150, seed=2)
        a = subsample_air(ds, seed=99)
        b = subsample_air(ds, seed=99)
        np.testing.assert_array_equal(a.voxel_index, b.voxel_index)
        c = subsample_air(ds, seed=100)
        assert not np.array_equal(a.voxel_index, c.voxel_index)

    def test_row_order_preserved(self):
        ds = synthetic_dataset([0, 1, 0, 2, 0, 3] * 100, seed=3)
        sub = subsample_air(ds, seed=7)
        assert np.all(np.diff(sub.voxel_index) > 0)


class TestSplit:
    @staticmethod
    def cohort(n_phantoms=4, rows=60):
        cases = []
        for p in range(n_phantoms):
            for axis in ("AP", "LR"):
                tissue = ([0] * (rows // 2)) + ([1, 2, 3] * (rows // 6))
                cases.append(
                    synthetic_dataset(tissue, seed=p * 7 + len(axis), phantom_id=f"ph{p}", axis=axis)
                )
        return cases

    def test_counts(self):
        cases = self.cohort(8)
        train, test = split_loocv(cases, "ph3", seed=0)
        assert len(train) == 14
        assert len(test) == 2
        assert all(c.phantom_id == "ph3" for c in test)

    def test_two_phantoms(self):
        cases = self.cohort(2)
        train, test = split_loocv(cases, "ph0", seed=0)
        assert len(train) == 2 and len(test) == 2

    def test_partition_of_case_ids(self):
        cases = self.cohort(5)
        train, test = split_loocv(cases, "ph2", seed=0)
        got = {c.case_id for c in train} | {c.case_id for c in test}
        assert got == {c.case_id for c in cases}
        assert not ({c.case_id for c in train} & {c.case_id for c in test})

    def test_test_not_subsampled_train_subsampled(self):
        cases = self.cohort(3)
        train, test = split_loocv(cases, "ph1", seed=0)
        for c in test:
            assert c.n_rows == 60
        for c in train:
            assert (c.tissue == AIR).sum() == air_target_count(c.tissue)

    def test_unknown_id_raises(self):
        with pytest.raises(DatasetError, match="unknown"):
            split_loocv(self.cohort(2), "nope", seed=0)

    def test_single_phantom_raises(self):
        cases = [c for c in self.cohort(2) if c.phantom_id == "ph0"]
        with pytest.raises(DatasetError, match="2 phantoms"):
            split_loocv(cases, "ph0", seed=0)


class TestSerialization:
    def test_binary_round_trip(self, case, tmp_path):
        *_, ds = case
        save_dataset(tmp_path / "d.vfds", ds)
        back = load_dataset(tmp_path / "d.vfds")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.target, ds.target)
        np.testing.assert_array_equal(back.voxel_index, ds.voxel_index)
        np.testing.assert_array_equal(back.tissue, ds.tissue)
        assert back.case_id == ds.case_id
        assert back.meta == ds.meta

    def test_csv_export_parses(self):
        ds = synthetic_dataset([0, 1, 2, 3])
        text = dataset_to_csv(ds)
        lines = text.strip().split("\n")
        assert len(lines) == 5
        header = lines[0].split(",")
        row = lines[1].split(",")
        assert len(header) == len(row) == 8
        assert float(row[0]) == ds.features[0, 0]

    def test_duplicate_voxel_index_rejected(self):
        with pytest.raises(DatasetError, match="duplicate"):
            FeatureDataset(
                phantom_id="p",
                axis="AP",
                meta=GridMeta((2, 1, 1), (1, 1, 1)),
                features=np.zeros((2, 5), dtype=np.float32),
                target=np.zeros(2, dtype=np.float32),
                voxel_index=np.array([0, 0]),
                tissue=np.zeros(2, dtype=np.uint8),
            )
