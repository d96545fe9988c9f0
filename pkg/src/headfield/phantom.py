"""Synthetic layered-head phantoms.

A phantom is a stack of concentric ellipsoidal shells (skin, skull, CSF,
grey matter, white matter filling the interior) with a two-zone spherical
tumor embedded in the white/grey region. Geometry is jittered per phantom
from a seeded RNG so that cross-validation folds differ.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError
from .volume import (
    AIR,
    CSF,
    GREY,
    SKIN,
    SKULL,
    TUMOR_ENHANCING,
    TUMOR_NECROTIC,
    WHITE,
    GridMeta,
    LabelVolume,
)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of one synthetic head, in mm, plus jitter amplitudes."""

    meta: GridMeta
    seed: int = 0
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

    def __post_init__(self):
        object.__setattr__(self, "semi_axes_mm", tuple(float(v) for v in self.semi_axes_mm))
        object.__setattr__(self, "tumor_offset_mm", tuple(float(v) for v in self.tumor_offset_mm))
        th = (self.skin_mm, self.skull_mm, self.csf_mm, self.grey_mm)
        if any(t <= 0 for t in th):
            raise PhantomSpecError(f"layer thicknesses must be > 0, got {th}")
        if sum(th) >= min(self.semi_axes_mm):
            raise PhantomSpecError(
                f"layer thicknesses sum {sum(th)} must stay below the smallest semi-axis "
                f"{min(self.semi_axes_mm)}"
            )
        if not (0 < self.tumor_necrotic_radius_mm < self.tumor_enhancing_radius_mm):
            raise PhantomSpecError(
                "necrotic radius must satisfy 0 < necrotic < enhancing, got "
                f"{self.tumor_necrotic_radius_mm} vs {self.tumor_enhancing_radius_mm}"
            )
        for amp in (self.jitter_semi_axes_mm, self.jitter_tumor_center_mm, self.jitter_tumor_radius_mm):
            if amp < 0:
                raise PhantomSpecError("jitter amplitudes must be >= 0")

    def to_json(self) -> str:
        obj = asdict(self)
        obj["meta"] = {"dims": list(self.meta.dims), "spacing_mm": list(self.meta.spacing)}
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        try:
            obj = json.loads(text)
            raw_meta = obj.pop("meta")
            meta = GridMeta(tuple(raw_meta["dims"]), tuple(raw_meta["spacing_mm"]))
            obj["semi_axes_mm"] = tuple(obj["semi_axes_mm"])
            obj["tumor_offset_mm"] = tuple(obj["tumor_offset_mm"])
            return cls(meta=meta, **obj)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PhantomSpecError(f"invalid phantom spec JSON: {exc}") from exc

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_json(Path(path).read_text())


def default_phantom_spec(
    dims: tuple[int, int, int] = (48, 48, 48),
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0),
    seed: int = 0,
) -> PhantomSpec:
    return PhantomSpec(meta=GridMeta(dims, spacing), seed=seed)


def _jittered_geometry(spec: PhantomSpec):
    """Draw the randomized geometry for one phantom. Draw order is fixed."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    axes = np.asarray(spec.semi_axes_mm) + rng.uniform(
        -spec.jitter_semi_axes_mm, spec.jitter_semi_axes_mm, 3
    )
    offset = np.asarray(spec.tumor_offset_mm) + rng.uniform(
        -spec.jitter_tumor_center_mm, spec.jitter_tumor_center_mm, 3
    )
    r_enh = spec.tumor_enhancing_radius_mm + rng.uniform(
        -spec.jitter_tumor_radius_mm, spec.jitter_tumor_radius_mm
    )
    r_nec = spec.tumor_necrotic_radius_mm + rng.uniform(
        -spec.jitter_tumor_radius_mm, spec.jitter_tumor_radius_mm
    )
    total = spec.skin_mm + spec.skull_mm + spec.csf_mm + spec.grey_mm
    if total >= axes.min():
        raise PhantomSpecError("jittered semi-axes no longer fit the shell thicknesses")
    if not (0 < r_nec < r_enh):
        raise PhantomSpecError("jittered tumor radii violate 0 < necrotic < enhancing")
    return axes, offset, r_enh, r_nec


def make_phantom(spec: PhantomSpec) -> LabelVolume:
    """Build the labeled head volume for ``spec``.

    Deterministic for a fixed (spec, seed). Each voxel is classified by the
    ellipsoidal shell its center falls in; the tumor then overwrites
    white/grey voxels only, and a spec that would push it into another tissue
    is rejected.
    """
    axes, offset, r_enh, r_nec = _jittered_geometry(spec)
    nx, ny, nz = spec.meta.dims
    sx, sy, sz = spec.meta.spacing
    center = np.array([(nx - 1) / 2 * sx, (ny - 1) / 2 * sy, (nz - 1) / 2 * sz])

    x = np.arange(nx) * sx - center[0]
    y = np.arange(ny) * sy - center[1]
    z = np.arange(nz) * sz - center[2]
    px, py, pz = np.meshgrid(x, y, z, indexing="ij")

    labels = np.full(spec.meta.dims, AIR, dtype=np.uint8)
    shrink = np.cumsum([0.0, spec.skin_mm, spec.skull_mm, spec.csf_mm, spec.grey_mm])
    shell_labels = (SKIN, SKULL, CSF, GREY, WHITE)
    for t, lab in zip(shrink, shell_labels):
        a = axes - t
        inside = (px / a[0]) ** 2 + (py / a[1]) ** 2 + (pz / a[2]) ** 2 <= 1.0
        labels[inside] = lab

    d2 = (px - offset[0]) ** 2 + (py - offset[1]) ** 2 + (pz - offset[2]) ** 2
    ball = d2 <= r_enh**2
    host = labels[ball]
    if host.size and not np.all((host == WHITE) | (host == GREY)):
        bad = np.unique(host[(host != WHITE) & (host != GREY)])
        raise PhantomSpecError(
            f"tumor ball leaves the white/grey region (touches labels {bad.tolist()})"
        )
    labels[ball] = TUMOR_ENHANCING
    labels[d2 <= r_nec**2] = TUMOR_NECROTIC
    return LabelVolume(spec.meta, labels)


def cohort_seed(master_seed: int, index: int) -> int:
    """Deterministic per-phantom seed derived from the master seed."""
    return int(np.random.SeedSequence((int(master_seed), int(index))).generate_state(1)[0])


def make_cohort(n: int, base: PhantomSpec, master_seed: int) -> list[LabelVolume]:
    """Generate ``n`` phantoms with per-phantom seeds derived from ``master_seed``."""
    if n < 1:
        raise PhantomSpecError(f"cohort size must be >= 1, got {n}")
    return [make_phantom(replace(base, seed=cohort_seed(master_seed, i))) for i in range(n)]
