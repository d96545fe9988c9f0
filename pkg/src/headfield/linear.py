"""Multilinear baseline: least squares on a fixed 7-term transformed basis.

The basis is [1, 1/conductivity, 1/permittivity, 1/D, 1/D^2, dist_csf,
dist_midline] with D the electrode distance floored at ``clamp_mm``;
reciprocal guards keep on-electrode and air rows finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ModelFormatError, RankDeficiencyError

BASIS_NAMES = (
    "intercept",
    "inv_conductivity",
    "inv_permittivity",
    "inv_dist_electrode",
    "inv_dist_electrode_sq",
    "dist_csf",
    "dist_midline",
)
N_BASIS = len(BASIS_NAMES)


@dataclass(frozen=True)
class LinearGuards:
    clamp_mm: float = 1.0  # distance floor; pick half the smallest voxel spacing
    sigma_floor: float = 1e-9
    eps_floor: float = 1.0

    def __post_init__(self):
        if self.clamp_mm <= 0 or self.sigma_floor <= 0 or self.eps_floor <= 0:
            raise ValueError("guards must be > 0")


def default_guards(spacing: tuple[float, float, float]) -> LinearGuards:
    return LinearGuards(clamp_mm=min(spacing) / 2.0)


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray  # (7,), BASIS_NAMES order
    guards: LinearGuards

    def __post_init__(self):
        coef = np.ascontiguousarray(self.coef, dtype=np.float64)
        if coef.shape != (N_BASIS,):
            raise ValueError(f"coefficients must have shape ({N_BASIS},)")
        if not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    def to_json(self) -> str:
        return json.dumps(
            {
                "coef": {name: float(c) for name, c in zip(BASIS_NAMES, self.coef)},
                "guards": {
                    "clamp_mm": self.guards.clamp_mm,
                    "sigma_floor": self.guards.sigma_floor,
                    "eps_floor": self.guards.eps_floor,
                },
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        try:
            obj = json.loads(text)
            coef = np.array([obj["coef"][name] for name in BASIS_NAMES], dtype=np.float64)
            return cls(coef=coef, guards=LinearGuards(**obj["guards"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"invalid linear model JSON: {exc}") from exc

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.from_json(Path(path).read_text())


def lin_basis(X: np.ndarray, guards: LinearGuards) -> np.ndarray:
    """Transform (n, 5) feature rows into the (n, 7) regression basis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    sigma = np.maximum(X[:, 0], guards.sigma_floor)
    eps = np.maximum(X[:, 1], guards.eps_floor)
    d = np.maximum(X[:, 2], guards.clamp_mm)
    out = np.empty((X.shape[0], N_BASIS))
    out[:, 0] = 1.0
    out[:, 1] = 1.0 / sigma
    out[:, 2] = 1.0 / eps
    out[:, 3] = 1.0 / d
    out[:, 4] = 1.0 / (d * d)
    out[:, 5] = X[:, 3]
    out[:, 6] = X[:, 4]
    return out


def fit_linear(X: np.ndarray, y: np.ndarray, guards: LinearGuards) -> LinearModel:
    """Ordinary least squares on the transformed basis (QR-based lstsq).

    Columns are equilibrated to unit norm before solving: the reciprocal
    guards put the basis columns on wildly different scales (air rows carry
    1/sigma ~ 1e9), and rank detection must reflect collinearity, not scaling.
    """
    B = lin_basis(X, guards)
    y = np.asarray(y, dtype=np.float64)
    if B.shape[0] < N_BASIS:
        raise ValueError(f"need at least {N_BASIS} rows, got {B.shape[0]}")
    norms = np.linalg.norm(B, axis=0)
    norms[norms == 0.0] = 1.0
    scaled = B / norms
    coef, _, rank, _ = np.linalg.lstsq(scaled, y, rcond=None)
    if rank < N_BASIS:
        # name the dependent columns via pivoted QR
        _, _, piv = scipy.linalg.qr(scaled, mode="economic", pivoting=True)
        dependent = sorted(BASIS_NAMES[j] for j in piv[rank:])
        raise RankDeficiencyError(
            f"design matrix rank {rank} < {N_BASIS}; dependent columns: {', '.join(dependent)}",
            dependent_columns=dependent,
        )
    return LinearModel(coef=coef / norms, guards=guards)


def predict_linear(model: LinearModel, X: np.ndarray) -> np.ndarray:
    """Basis dot coefficients, clamped at 0 (the target is a magnitude)."""
    raw = lin_basis(X, model.guards) @ model.coef
    return np.maximum(raw, 0.0)
