"""Core voxel-grid types, the tissue property table, and VVOL1 file I/O.

Conventions used everywhere in this package:

* voxel (x, y, z) maps to linear index ``x + nx * (y + ny * z)`` (x fastest);
* arrays are held as ``(nx, ny, nz)`` numpy arrays, so the linear order is
  Fortran ravel order;
* the world coordinate (mm) of a voxel center is ``index * spacing`` per axis;
* label volumes are uint8, scalar fields are float32 (the on-disk dtype, so
  save/load round-trips are bit exact).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TissueTableError, VolumeFormatError

# Fixed tissue enumeration. Phantoms use 0-7; 8 is reserved.
AIR = 0
SKIN = 1
SKULL = 2
CSF = 3
WHITE = 4
GREY = 5
TUMOR_ENHANCING = 6
TUMOR_NECROTIC = 7
RESECTION_CAVITY = 8

TISSUE_NAMES = {
    AIR: "air",
    SKIN: "skin_muscle",
    SKULL: "skull",
    CSF: "csf",
    WHITE: "white_matter",
    GREY: "grey_matter",
    TUMOR_ENHANCING: "tumor_enhancing",
    TUMOR_NECROTIC: "tumor_necrotic",
    RESECTION_CAVITY: "resection_cavity",
}

MAX_LABEL = RESECTION_CAVITY

SCALAR_UNITS = ("volt", "volt-per-cm", "mm", "dimensionless")

_MAGIC = "VVOL1"


@dataclass(frozen=True)
class GridMeta:
    """Voxel counts and physical spacing of a regular 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("dims and spacing must be triples")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacing components must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def linear_index(self, x, y, z):
        """Linear index of voxel (x, y, z); x varies fastest."""
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def coords_of(self, linear):
        """Inverse of :meth:`linear_index`."""
        nx, ny, _ = self.dims
        linear = np.asarray(linear)
        x = linear % nx
        y = (linear // nx) % ny
        z = linear // (nx * ny)
        return x, y, z

    def centers_mm(self) -> np.ndarray:
        """Voxel-center world coordinates, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing
        x = np.arange(nx) * sx
        y = np.arange(ny) * sy
        z = np.arange(nz) * sz
        return np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1)


def _check_shape(meta: GridMeta, arr: np.ndarray, what: str):
    if arr.shape != meta.dims:
        raise ValueError(f"{what} shape {arr.shape} does not match dims {meta.dims}")


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of uint8 tissue codes."""

    meta: GridMeta
    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        _check_shape(self.meta, labels, "labels")
        if labels.size and labels.max() > MAX_LABEL:
            raise ValueError(f"label codes must be <= {MAX_LABEL}, found {labels.max()}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def present_labels(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True)
class ScalarField:
    """3D grid of real values with a unit tag.

    Values are float32 or float64 in memory; anything else is coerced to
    float32, the container dtype. Fields loaded from disk are always float32,
    so load(save(f)) is bit exact for them; float64 fields keep full precision
    in memory and are rounded to f32 only when written.
    """

    meta: GridMeta
    values: np.ndarray
    unit: str

    def __post_init__(self):
        if self.unit not in SCALAR_UNITS:
            raise ValueError(f"unsupported unit tag {self.unit!r}; expected one of {SCALAR_UNITS}")
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        values = np.ascontiguousarray(values)
        _check_shape(self.meta, values, "values")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains NaN or infinity")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TissueEntry:
    sigma_S_per_m: float
    eps_rel: float
    name: str = ""


@dataclass(frozen=True)
class TissueTable:
    """Electrical properties per tissue label.

    The shipped defaults (see :func:`default_tissue_table`) are typical
    published low-frequency values and are meant as configurable placeholders,
    not measured ground truth; any table with the same schema can be loaded
    from JSON instead.
    """

    entries: dict[int, TissueEntry] = field(default_factory=dict)

    def __post_init__(self):
        for code, e in self.entries.items():
            if not (0 <= int(code) <= 255):
                raise TissueTableError(f"label code {code} outside uint8 range")
            if not np.isfinite(e.sigma_S_per_m) or e.sigma_S_per_m < 0:
                raise TissueTableError(f"label {code}: conductivity must be finite and >= 0")
            if not np.isfinite(e.eps_rel) or e.eps_rel < 0:
                raise TissueTableError(f"label {code}: permittivity must be finite and >= 0")

    def sigma(self, code: int) -> float:
        return self._get(code).sigma_S_per_m

    def eps(self, code: int) -> float:
        return self._get(code).eps_rel

    def _get(self, code: int) -> TissueEntry:
        try:
            return self.entries[int(code)]
        except KeyError:
            raise TissueTableError(f"no tissue table entry for label {code}") from None

    def to_json(self) -> str:
        obj = {
            str(code): {
                "sigma_S_per_m": e.sigma_S_per_m,
                "eps_rel": e.eps_rel,
                "name": e.name,
            }
            for code, e in sorted(self.entries.items())
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TissueTable":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TissueTableError(f"invalid tissue table JSON: {exc}") from exc
        entries = {}
        for code, body in raw.items():
            try:
                entries[int(code)] = TissueEntry(
                    sigma_S_per_m=float(body["sigma_S_per_m"]),
                    eps_rel=float(body["eps_rel"]),
                    name=str(body.get("name", "")),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TissueTableError(f"bad tissue entry for label {code!r}: {exc}") from exc
        return cls(entries)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TissueTable":
        return cls.from_json(Path(path).read_text())


def default_tissue_table() -> TissueTable:
    """Implementer-default 200 kHz-ish properties for the fixed label set."""
    vals = {
        AIR: (0.0, 1.0),
        SKIN: (0.4, 1100.0),
        SKULL: (0.008, 200.0),
        CSF: (1.79, 110.0),
        WHITE: (0.12, 2000.0),
        GREY: (0.25, 3000.0),
        TUMOR_ENHANCING: (0.24, 2000.0),
        TUMOR_NECROTIC: (1.0, 1000.0),
        RESECTION_CAVITY: (1.79, 110.0),
    }
    return TissueTable(
        {code: TissueEntry(s, e, TISSUE_NAMES[code]) for code, (s, e) in vals.items()}
    )


# --------------------------------------------------------------------------
# VVOL1 container: one UTF-8 JSON header line, '\n', then the raw
# little-endian payload in x-fastest order.
# --------------------------------------------------------------------------


def _header_bytes(kind: str, meta: GridMeta, dtype: str, unit: str | None) -> bytes:
    header = {
        "magic": _MAGIC,
        "kind": kind,
        "dims": list(meta.dims),
        "spacing_mm": list(meta.spacing),
        "dtype": dtype,
    }
    if unit is not None:
        header["unit"] = unit
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def save_volume(path, volume: LabelVolume | ScalarField) -> None:
    """Write a volume to ``path`` in the VVOL1 container format.

    Scalar payloads are stored as little-endian f32; float64 fields are
    rounded to that precision on write.
    """
    if isinstance(volume, LabelVolume):
        head = _header_bytes("labels", volume.meta, "u8", None)
        payload = volume.labels.ravel(order="F").tobytes()
    elif isinstance(volume, ScalarField):
        head = _header_bytes("scalar", volume.meta, "f32", volume.unit)
        payload = volume.values.ravel(order="F").astype("<f4", copy=False).tobytes()
    else:
        raise TypeError(f"cannot save object of type {type(volume).__name__}")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload)


def load_volume(path) -> LabelVolume | ScalarField:
    """Read a VVOL1 file, validating the header against the payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: no header line found")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header: {exc}") from exc
    if header.get("magic") != _MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {header.get('magic')!r}")
    try:
        meta = GridMeta(tuple(header["dims"]), tuple(header["spacing_mm"]))
        kind = header["kind"]
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: invalid header fields: {exc}") from exc

    payload = raw[nl + 1 :]
    if kind == "labels":
        if dtype != "u8":
            raise VolumeFormatError(f"{path}: label volumes must be u8, got {dtype}")
        expected = meta.n_voxels
        if len(payload) != expected:
            raise VolumeFormatError(
                f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
            )
        flat = np.frombuffer(payload, dtype=np.uint8)
        if flat.size and flat.max() > MAX_LABEL:
            raise VolumeFormatError(f"{path}: unknown label code {flat.max()}")
        labels = flat.reshape(meta.dims, order="F")
        return LabelVolume(meta, np.ascontiguousarray(labels))
    if kind == "scalar":
        if dtype != "f32":
            raise VolumeFormatError(f"{path}: scalar volumes must be f32, got {dtype}")
        expected = meta.n_voxels * 4
        if len(payload) != expected:
            raise VolumeFormatError(
                f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
            )
        unit = header.get("unit")
        if unit not in SCALAR_UNITS:
            raise VolumeFormatError(f"{path}: unsupported unit tag {unit!r}")
        flat = np.frombuffer(payload, dtype="<f4")
        values = flat.reshape(meta.dims, order="F")
        if not np.all(np.isfinite(values)):
            raise VolumeFormatError(f"{path}: scalar payload contains NaN or infinity")
        return ScalarField(meta, np.ascontiguousarray(values), unit)
    raise VolumeFormatError(f"{path}: unknown volume kind {kind!r}")


def lookup_properties(table: TissueTable, volume: LabelVolume) -> tuple[ScalarField, ScalarField]:
    """Map tissue labels to per-voxel conductivity and permittivity fields."""
    present = volume.present_labels()
    sigma_lut = np.zeros(MAX_LABEL + 1, dtype=np.float32)
    eps_lut = np.zeros(MAX_LABEL + 1, dtype=np.float32)
    for code in present:
        sigma_lut[code] = table.sigma(int(code))
        eps_lut[code] = table.eps(int(code))
    sigma = ScalarField(volume.meta, sigma_lut[volume.labels], "dimensionless")
    eps = ScalarField(volume.meta, eps_lut[volume.labels], "dimensionless")
    return sigma, eps
