"""Run configuration: one JSON-serializable object that pins a whole run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .evaluate import DEFAULT_NEAR_FAR_MM
from .forest import ForestParams
from .linear import LinearGuards
from .phantom import PhantomSpec, cohort_seed
from .solver import SolveParams
from .volume import GridMeta, TissueTable, default_tissue_table


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/default"
    tissue_table_path: str | None = None  # None: built-in default table
    cohort_size: int = 8
    master_seed: int = 1234

    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)

    semi_axes_mm: tuple[float, float, float] = (34.0, 40.0, 36.0)
    skin_mm: float = 4.0
    skull_mm: float = 4.0
    csf_mm: float = 4.0
    grey_mm: float = 6.0
    tumor_offset_mm: tuple[float, float, float] = (5.0, 8.0, 4.0)
    tumor_enhancing_radius_mm: float = 7.0
    tumor_necrotic_radius_mm: float = 3.0
    jitter_semi_axes_mm: float = 2.0
    jitter_tumor_center_mm: float = 2.5
    jitter_tumor_radius_mm: float = 1.0

    patch_radius_mm: float = 15.0

    voltage_a: float = 1.0
    voltage_b: float = -1.0
    rel_residual_tol: float = 1e-8
    max_iterations: int | None = None
    sigma_floor: float = 1e-9

    n_trees: int = 30
    min_samples_leaf: int = 5
    max_depth: int | None = None
    features_per_split: int = 5
    bootstrap: bool = True

    clamp_mm: float | None = None  # None: half the smallest voxel spacing
    lin_sigma_floor: float = 1e-9
    lin_eps_floor: float = 1.0

    near_far_threshold_mm: float = DEFAULT_NEAR_FAR_MM

    def grid_meta(self) -> GridMeta:
        return GridMeta(self.dims, self.spacing_mm)

    def phantom_spec(self, index: int) -> PhantomSpec:
        return PhantomSpec(
            meta=self.grid_meta(),
            seed=cohort_seed(self.master_seed, index),
            semi_axes_mm=self.semi_axes_mm,
            skin_mm=self.skin_mm,
            skull_mm=self.skull_mm,
            csf_mm=self.csf_mm,
            grey_mm=self.grey_mm,
            tumor_offset_mm=self.tumor_offset_mm,
            tumor_enhancing_radius_mm=self.tumor_enhancing_radius_mm,
            tumor_necrotic_radius_mm=self.tumor_necrotic_radius_mm,
            jitter_semi_axes_mm=self.jitter_semi_axes_mm,
            jitter_tumor_center_mm=self.jitter_tumor_center_mm,
            jitter_tumor_radius_mm=self.jitter_tumor_radius_mm,
        )

    def solve_params(self) -> SolveParams:
        return SolveParams(
            voltage_a=self.voltage_a,
            voltage_b=self.voltage_b,
            rel_residual_tol=self.rel_residual_tol,
            max_iterations=self.max_iterations,
            sigma_floor=self.sigma_floor,
        )

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees,
            min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth,
            features_per_split=self.features_per_split,
            bootstrap=self.bootstrap,
        )

    def guards(self) -> LinearGuards:
        clamp = self.clamp_mm if self.clamp_mm is not None else min(self.spacing_mm) / 2.0
        return LinearGuards(
            clamp_mm=clamp, sigma_floor=self.lin_sigma_floor, eps_floor=self.lin_eps_floor
        )

    def tissue_table(self) -> TissueTable:
        if self.tissue_table_path is None:
            return default_tissue_table()
        return TissueTable.load(self.tissue_table_path)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**obj)
        # JSON turns tuples into lists; normalize back
        return replace(
            cfg,
            dims=tuple(cfg.dims),
            spacing_mm=tuple(cfg.spacing_mm),
            semi_axes_mm=tuple(cfg.semi_axes_mm),
            tumor_offset_mm=tuple(cfg.tumor_offset_mm),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())
