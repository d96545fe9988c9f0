"""Exact Euclidean distance transforms and electrode layout construction.

The distance transform is the separable lower-envelope algorithm on squared
distances, one pass per axis, each pass weighted by that axis' spacing; the
result is the exact (not chamfer) Euclidean distance between voxel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import LayoutError
from .volume import AIR, CSF, GridMeta, LabelVolume, ScalarField

_FAR = 1e30  # placeholder "infinity" for squared distances; real values stay far below


@njit(cache=True)
def _envelope_pass(g: np.ndarray, h2: float) -> None:
    """One 1-D lower-envelope pass over every row of ``g`` (squared distances)."""
    nlines, n = g.shape
    v = np.empty(n, dtype=np.int64)
    zb = np.empty(n + 1, dtype=np.float64)
    f = np.empty(n, dtype=np.float64)
    for li in range(nlines):
        for i in range(n):
            f[i] = g[li, i]
        k = 0
        v[0] = 0
        zb[0] = -np.inf
        zb[1] = np.inf
        for q in range(1, n):
            fq = f[q] + h2 * q * q
            while True:
                p = v[k]
                s = (fq - f[p] - h2 * p * p) / (2.0 * h2 * (q - p))
                if s <= zb[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            zb[k] = s
            zb[k + 1] = np.inf
        k = 0
        for q in range(n):
            while zb[k + 1] < q:
                k += 1
            d = q - v[k]
            g[li, q] = h2 * d * d + f[v[k]]


def _squared_edt(mask: np.ndarray, spacing: tuple[float, float, float]) -> np.ndarray:
    g = np.where(mask, 0.0, _FAR)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        flat = moved.reshape(-1, moved.shape[-1])
        _envelope_pass(flat, float(spacing[axis]) ** 2)
        g = np.moveaxis(flat.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(g)


def distance_transform(mask: np.ndarray, meta: GridMeta) -> ScalarField:
    """Exact per-voxel Euclidean distance (mm) to the True set of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != meta.dims:
        raise ValueError(f"mask shape {mask.shape} does not match dims {meta.dims}")
    if not mask.any():
        raise ValueError("distance transform of an empty mask is undefined")
    return ScalarField(meta, np.sqrt(_squared_edt(mask, meta.spacing)), "mm")


def distance_to_segment(meta: GridMeta, p0, p1) -> ScalarField:
    """Per-voxel distance (mm) from the voxel center to the closed segment [p0, p1]."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    seg = p1 - p0
    seg2 = float(seg @ seg)
    if seg2 == 0.0:
        raise ValueError("degenerate segment: endpoints coincide")
    pts = meta.centers_mm() - p0
    t = np.clip(np.tensordot(pts, seg, axes=([-1], [0])) / seg2, 0.0, 1.0)
    closest = t[..., None] * seg
    return ScalarField(meta, np.linalg.norm(pts - closest, axis=-1), "mm")


def surface_mask(volume: LabelVolume) -> np.ndarray:
    """Non-air voxels with at least one 6-neighbor that is air or out of bounds."""
    body = volume.labels != AIR
    exposed = np.zeros_like(body)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, 1)
        hi[axis] = slice(-1, None)
        shifted = np.roll(~body, 1, axis=axis)
        shifted[tuple(lo)] = True  # grid boundary counts as air
        exposed |= shifted
        shifted = np.roll(~body, -1, axis=axis)
        shifted[tuple(hi)] = True
        exposed |= shifted
    return body & exposed


_AXIS_INDEX = {"LR": 0, "AP": 1}


@dataclass(frozen=True)
class ElectrodeLayout:
    """Two opposing surface electrode patches and the segment between their centers."""

    axis: str
    patch_a: np.ndarray  # sorted linear voxel indices
    patch_b: np.ndarray
    center_a: tuple[float, float, float]  # mm, centroid of patch_a voxel centers
    center_b: tuple[float, float, float]
    patch_radius_mm: float

    def __post_init__(self):
        if self.axis not in _AXIS_INDEX:
            raise LayoutError(f"axis must be one of {sorted(_AXIS_INDEX)}, got {self.axis!r}")
        pa = np.asarray(self.patch_a, dtype=np.int64)
        pb = np.asarray(self.patch_b, dtype=np.int64)
        if pa.size == 0 or pb.size == 0:
            raise LayoutError("electrode patches must be non-empty")
        pa = np.unique(pa)
        pb = np.unique(pb)
        if np.intersect1d(pa, pb).size:
            raise LayoutError("electrode patches overlap")
        ca = tuple(float(v) for v in self.center_a)
        cb = tuple(float(v) for v in self.center_b)
        if ca == cb:
            raise LayoutError("patch centers coincide")
        pa.setflags(write=False)
        pb.setflags(write=False)
        object.__setattr__(self, "patch_a", pa)
        object.__setattr__(self, "patch_b", pb)
        object.__setattr__(self, "center_a", ca)
        object.__setattr__(self, "center_b", cb)

    @property
    def midline(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        return (self.center_a, self.center_b)

    def patch_mask(self, meta: GridMeta) -> np.ndarray:
        mask = np.zeros(meta.n_voxels, dtype=bool)
        mask[self.patch_a] = True
        mask[self.patch_b] = True
        return mask.reshape(meta.dims, order="F")

    def to_json(self) -> str:
        return json.dumps(
            {
                "axis": self.axis,
                "patch_a": self.patch_a.tolist(),
                "patch_b": self.patch_b.tolist(),
                "center_a": list(self.center_a),
                "center_b": list(self.center_b),
                "patch_radius_mm": self.patch_radius_mm,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ElectrodeLayout":
        try:
            obj = json.loads(text)
            return cls(
                axis=obj["axis"],
                patch_a=np.asarray(obj["patch_a"], dtype=np.int64),
                patch_b=np.asarray(obj["patch_b"], dtype=np.int64),
                center_a=tuple(obj["center_a"]),
                center_b=tuple(obj["center_b"]),
                patch_radius_mm=float(obj["patch_radius_mm"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"invalid layout JSON: {exc}") from exc

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ElectrodeLayout":
        return cls.from_json(Path(path).read_text())


def place_pair(volume: LabelVolume, axis: str, patch_radius_mm: float = 15.0) -> ElectrodeLayout:
    """Place two opposing electrode patches on the head surface.

    A ray along +/- the chosen axis (LR = x, AP = y) through the head centroid
    picks the two outermost surface voxels; each patch is every surface voxel
    within ``patch_radius_mm`` of its hit point.
    """
    if axis not in _AXIS_INDEX:
        raise LayoutError(f"axis must be one of {sorted(_AXIS_INDEX)}, got {axis!r}")
    ax = _AXIS_INDEX[axis]
    body = volume.labels != AIR
    if not body.any():
        raise LayoutError("volume contains no head voxels")
    meta = volume.meta
    spacing = np.asarray(meta.spacing)
    coords = np.argwhere(body)
    centroid_idx = np.round(coords.mean(axis=0)).astype(np.int64)

    line_sel: list = list(centroid_idx)
    line_sel[ax] = slice(None)
    line = body[tuple(line_sel)]
    hits = np.flatnonzero(line)
    if hits.size == 0:
        raise LayoutError(f"axis ray through the centroid misses the head ({axis})")
    hit_a = centroid_idx.copy()
    hit_a[ax] = hits.max()
    hit_b = centroid_idx.copy()
    hit_b[ax] = hits.min()

    surf = surface_mask(volume)
    surf_idx = np.argwhere(surf)
    surf_mm = surf_idx * spacing

    def build_patch(hit):
        d = np.linalg.norm(surf_mm - hit * spacing, axis=1)
        sel = surf_idx[d <= patch_radius_mm]
        if sel.size == 0:
            raise LayoutError("electrode patch is empty")
        lin = meta.linear_index(sel[:, 0], sel[:, 1], sel[:, 2])
        center = (sel * spacing).mean(axis=0)
        return np.sort(lin), tuple(center)

    patch_a, center_a = build_patch(hit_a)
    patch_b, center_b = build_patch(hit_b)
    return ElectrodeLayout(
        axis=axis,
        patch_a=patch_a,
        patch_b=patch_b,
        center_a=center_a,
        center_b=center_b,
        patch_radius_mm=float(patch_radius_mm),
    )


def electrode_distance(meta: GridMeta, layout: ElectrodeLayout) -> ScalarField:
    """Distance (mm) to the nearest voxel of either electrode patch."""
    return distance_transform(layout.patch_mask(meta), meta)


def csf_distance(volume: LabelVolume) -> ScalarField:
    """Distance (mm) to the nearest CSF voxel."""
    mask = volume.labels == CSF
    if not mask.any():
        raise ValueError("volume contains no CSF voxels")
    return distance_transform(mask, volume.meta)
