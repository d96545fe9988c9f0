"""Per-voxel feature assembly, air subsampling, and leave-one-out splits.

Each voxel contributes one row of five features (conductivity, permittivity,
distance to the nearest electrode voxel, distance to the nearest CSF voxel,
distance to the electrode-center midline) and the gold field magnitude as
target. Air dominates the grid, so training sets subsample it down to the
mean per-tissue count; evaluation always uses the full, unsubsampled rows.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import DatasetError
from .geometry import ElectrodeLayout, csf_distance, distance_to_segment, electrode_distance
from .volume import AIR, CSF, GridMeta, LabelVolume, ScalarField, TissueTable, lookup_properties

FEATURE_COLUMNS = (
    "conductivity",
    "permittivity",
    "dist_electrode_mm",
    "dist_csf_mm",
    "dist_midline_mm",
)
TARGET_COLUMN = "target_v_per_cm"
N_FEATURES = len(FEATURE_COLUMNS)

_MAGIC = "VFDS1"
# On-disk payload is f32 columns; integer columns must be exactly representable.
_MAX_EXACT_F32_INT = 2**24


@dataclass(frozen=True)
class FeatureRow:
    conductivity: float
    permittivity: float
    dist_electrode_mm: float
    dist_csf_mm: float
    dist_midline_mm: float
    target_v_per_cm: float
    voxel_index: int
    tissue: int


@dataclass(frozen=True)
class FeatureDataset:
    """Columnar per-voxel rows for one (phantom, layout) case."""

    phantom_id: str
    axis: str
    meta: GridMeta
    features: np.ndarray  # (n, 5) float32, FEATURE_COLUMNS order
    target: np.ndarray  # (n,) float32, V/cm
    voxel_index: np.ndarray  # (n,) int64
    tissue: np.ndarray  # (n,) uint8

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        target = np.ascontiguousarray(self.target, dtype=np.float32)
        vox = np.ascontiguousarray(self.voxel_index, dtype=np.int64)
        tissue = np.ascontiguousarray(self.tissue, dtype=np.uint8)
        n = feats.shape[0]
        if n == 0:
            raise DatasetError("feature dataset must be non-empty")
        if feats.shape != (n, N_FEATURES):
            raise DatasetError(f"features must be (n, {N_FEATURES}), got {feats.shape}")
        if target.shape != (n,) or vox.shape != (n,) or tissue.shape != (n,):
            raise DatasetError("column lengths disagree")
        if not np.all(np.isfinite(feats)) or not np.all(np.isfinite(target)):
            raise DatasetError("features and target must be finite")
        if feats[:, 2:].min() < 0 or target.min() < 0:
            raise DatasetError("distances and target must be >= 0")
        if np.unique(vox).size != n:
            raise DatasetError("duplicate voxel_index rows")
        for arr in (feats, target, vox, tissue):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "voxel_index", vox)
        object.__setattr__(self, "tissue", tissue)

    @property
    def case_id(self) -> str:
        return f"{self.phantom_id}_{self.axis}"

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def row(self, i: int) -> FeatureRow:
        return FeatureRow(
            *(float(v) for v in self.features[i]),
            target_v_per_cm=float(self.target[i]),
            voxel_index=int(self.voxel_index[i]),
            tissue=int(self.tissue[i]),
        )

    def select(self, mask: np.ndarray) -> "FeatureDataset":
        return replace(
            self,
            features=self.features[mask],
            target=self.target[mask],
            voxel_index=self.voxel_index[mask],
            tissue=self.tissue[mask],
        )


def feature_matrix(
    volume: LabelVolume, table: TissueTable, layout: ElectrodeLayout
) -> np.ndarray:
    """The (n_voxels, 5) feature matrix in linear voxel order, without targets."""
    if not np.any(volume.labels == CSF):
        raise DatasetError("volume contains no CSF voxels; dist_csf is undefined")
    meta = volume.meta
    sigma, eps = lookup_properties(table, volume)
    d_e = electrode_distance(meta, layout)
    d_c = csf_distance(volume)
    d_l = distance_to_segment(meta, layout.center_a, layout.center_b)
    cols = [sigma.values, eps.values, d_e.values, d_c.values, d_l.values]
    return np.stack([c.ravel(order="F").astype(np.float32) for c in cols], axis=1)


def extract_features(
    volume: LabelVolume,
    table: TissueTable,
    layout: ElectrodeLayout,
    gold: ScalarField,
    phantom_id: str = "phantom",
) -> FeatureDataset:
    """One row per voxel (air included; subsampling is a separate step)."""
    meta = volume.meta
    if gold.meta.dims != meta.dims or gold.meta.spacing != meta.spacing:
        raise DatasetError("gold field and volume grids do not match")
    feats = feature_matrix(volume, table, layout)
    return FeatureDataset(
        phantom_id=phantom_id,
        axis=layout.axis,
        meta=meta,
        features=feats,
        target=gold.values.ravel(order="F").astype(np.float32),
        voxel_index=np.arange(meta.n_voxels, dtype=np.int64),
        tissue=volume.labels.ravel(order="F"),
    )


def air_target_count(tissue: np.ndarray) -> int:
    """Rounded mean row count over the non-air labels present."""
    labels, counts = np.unique(tissue[tissue != AIR], return_counts=True)
    if labels.size == 0:
        return 0
    return int(np.round(counts.mean()))


def subsample_air(dataset: FeatureDataset, seed: int) -> FeatureDataset:
    """Downsample air rows to the mean non-air tissue count (seeded, without
    replacement, original row order preserved). Non-air rows pass through."""
    air_rows = np.flatnonzero(dataset.tissue == AIR)
    if air_rows.size == 0:
        return dataset
    target = air_target_count(dataset.tissue)
    if air_rows.size <= target:
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    keep_air = rng.choice(air_rows, size=target, replace=False)
    keep = np.zeros(dataset.n_rows, dtype=bool)
    keep[dataset.tissue != AIR] = True
    keep[keep_air] = True
    return dataset.select(keep)


def case_subsample_seed(master_seed: int, case_id: str) -> int:
    """Deterministic per-case seed for air subsampling."""
    return int(
        np.random.SeedSequence(
            (int(master_seed), zlib.crc32(case_id.encode("utf-8")))
        ).generate_state(1)[0]
    )


def split_loocv(
    cases: list[FeatureDataset], held_out: str, seed: int = 0
) -> tuple[list[FeatureDataset], list[FeatureDataset]]:
    """Hold out every case of one phantom; air-subsample the training cases.

    Test cases are returned untouched so evaluation covers the full volume.
    """
    phantom_ids = {c.phantom_id for c in cases}
    if held_out not in phantom_ids:
        raise DatasetError(f"unknown phantom id {held_out!r}; have {sorted(phantom_ids)}")
    if len(phantom_ids) < 2:
        raise DatasetError("leave-one-out needs at least 2 phantoms")
    test = [c for c in cases if c.phantom_id == held_out]
    train = [
        subsample_air(c, case_subsample_seed(seed, c.case_id))
        for c in cases
        if c.phantom_id != held_out
    ]
    return train, test


def stack_cases(cases: list[FeatureDataset]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate cases into one training matrix (features, target)."""
    if not cases:
        raise DatasetError("no cases to stack")
    X = np.concatenate([c.features for c in cases], axis=0)
    y = np.concatenate([c.target for c in cases], axis=0)
    return X, y


# --------------------------------------------------------------------------
# Columnar container: JSON header line + consecutive little-endian f32 columns.
# --------------------------------------------------------------------------

_COLUMN_ORDER = FEATURE_COLUMNS + (TARGET_COLUMN, "voxel_index", "tissue")


def save_dataset(path, dataset: FeatureDataset) -> None:
    if dataset.voxel_index.max() >= _MAX_EXACT_F32_INT:
        raise DatasetError(
            f"voxel_index exceeds {_MAX_EXACT_F32_INT}, not exactly representable in f32 columns"
        )
    header = {
        "magic": _MAGIC,
        "case_id": dataset.case_id,
        "phantom_id": dataset.phantom_id,
        "axis": dataset.axis,
        "dims": list(dataset.meta.dims),
        "spacing_mm": list(dataset.meta.spacing),
        "n_rows": dataset.n_rows,
        "columns": list(_COLUMN_ORDER),
    }
    cols = [dataset.features[:, i] for i in range(N_FEATURES)]
    cols += [dataset.target, dataset.voxel_index, dataset.tissue]
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode())
        for col in cols:
            fh.write(np.asarray(col, dtype="<f4").tobytes())


def load_dataset(path) -> FeatureDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed header: {exc}") from exc
    if header.get("magic") != _MAGIC:
        raise DatasetError(f"{path}: bad magic {header.get('magic')!r}")
    n = int(header["n_rows"])
    if header.get("columns") != list(_COLUMN_ORDER):
        raise DatasetError(f"{path}: unexpected column layout {header.get('columns')}")
    payload = raw[nl + 1 :]
    expected = 4 * n * len(_COLUMN_ORDER)
    if len(payload) != expected:
        raise DatasetError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4").reshape(len(_COLUMN_ORDER), n)
    return FeatureDataset(
        phantom_id=header["phantom_id"],
        axis=header["axis"],
        meta=GridMeta(tuple(header["dims"]), tuple(header["spacing_mm"])),
        features=np.ascontiguousarray(flat[:N_FEATURES].T),
        target=flat[N_FEATURES],
        voxel_index=flat[N_FEATURES + 1].astype(np.int64),
        tissue=flat[N_FEATURES + 2].astype(np.uint8),
    )


def dataset_to_csv(dataset: FeatureDataset) -> str:
    lines = [",".join(_COLUMN_ORDER)]
    for i in range(dataset.n_rows):
        feats = [repr(float(v)) for v in dataset.features[i]]
        lines.append(
            ",".join(
                feats
                + [
                    repr(float(dataset.target[i])),
                    str(int(dataset.voxel_index[i])),
                    str(int(dataset.tissue[i])),
                ]
            )
        )
    return "\n".join(lines) + "\n"
