"""Quasi-static potential solver on the labeled voxel grid.

Solves div(sigma grad phi) = 0 with a 7-point finite-volume stencil:
face conductivity is the harmonic mean of the two adjacent voxels (exact for
1-D layered media), electrode patches are Dirichlet voxels, and faces toward
air or the domain boundary carry zero flux. The model is purely resistive:
permittivity never enters, so the computed field is invariant to it.

The assembled system is symmetric positive definite and is solved with
Jacobi-preconditioned conjugate gradients to a relative-residual tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import label as cc_label
from scipy.sparse.linalg import cg

from .errors import ConvergenceError, LayoutError, NoConductivePathError
from .geometry import ElectrodeLayout, surface_mask
from .volume import GridMeta, LabelVolume, ScalarField, TissueTable, lookup_properties


@dataclass(frozen=True)
class SolveParams:
    voltage_a: float = 1.0
    voltage_b: float = -1.0
    rel_residual_tol: float = 1e-8
    max_iterations: int | None = None  # None: 200 * n_unknowns**(1/3)
    sigma_floor: float = 1e-9  # S/m; below this a voxel is insulating

    def __post_init__(self):
        if not (self.rel_residual_tol > 0):
            raise ValueError("rel_residual_tol must be > 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def iteration_budget(self, n_unknowns: int) -> int:
        if self.max_iterations is not None:
            return int(self.max_iterations)
        return max(1, int(math.ceil(200.0 * n_unknowns ** (1.0 / 3.0))))


@dataclass(frozen=True)
class PotentialSolution:
    """Solved potential plus the masks needed to interpret it.

    ``phi`` is float64 and zero outside ``solved_mask``; ``solved_mask`` is
    the conductive region connected to at least one electrode voxel, and
    ``conductive_mask`` every voxel above the conductivity floor.
    """

    meta: GridMeta
    phi: np.ndarray
    solved_mask: np.ndarray
    conductive_mask: np.ndarray
    iterations: int
    final_residual: float
    voltage_lo: float
    voltage_hi: float

    def phi_field(self) -> ScalarField:
        """Potential as a saveable f32 scalar field (volts)."""
        vals = np.clip(self.phi.astype(np.float32), np.float32(self.voltage_lo), np.float32(self.voltage_hi))
        vals[~self.solved_mask] = 0.0
        return ScalarField(self.meta, vals, "volt")


def _face_weights(sigma: np.ndarray, spacing, axis: int):
    """Harmonic-mean face conductance sigma_f * area / h along ``axis``."""
    h = spacing[axis]
    area = math.prod(spacing) / h
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    s_lo = sigma[tuple(lo)]
    s_hi = sigma[tuple(hi)]
    both = (s_lo > 0) & (s_hi > 0)
    w = np.zeros_like(s_lo)
    w[both] = 2.0 * s_lo[both] * s_hi[both] / (s_lo[both] + s_hi[both]) * area / h
    return tuple(lo), tuple(hi), w, both


def assemble_system(
    sigma: np.ndarray,
    dirichlet: np.ndarray,
    dirichlet_values: np.ndarray,
    spacing,
):
    """Build the SPD system for the unknown (conductive, non-Dirichlet) voxels.

    ``sigma`` must already be zeroed outside the solve domain. Returns
    (A, b, unknown_ids) where unknown_ids maps grid voxels to matrix rows
    (-1 for non-unknowns).
    """
    unknown = (sigma > 0) & ~dirichlet
    n_unknowns = int(unknown.sum())
    uid = np.full(sigma.shape, -1, dtype=np.int64)
    uid[unknown] = np.arange(n_unknowns)

    rows, cols, vals = [], [], []
    diag = np.zeros(n_unknowns)
    b = np.zeros(n_unknowns)
    for axis in range(3):
        lo, hi, w, both = _face_weights(sigma, spacing, axis)
        u_lo, u_hi = uid[lo], uid[hi]
        d_lo, d_hi = dirichlet[lo], dirichlet[hi]
        v_lo, v_hi = dirichlet_values[lo], dirichlet_values[hi]

        m = both & (u_lo >= 0) & (u_hi >= 0)
        rows.append(u_lo[m])
        cols.append(u_hi[m])
        vals.append(-w[m])
        rows.append(u_hi[m])
        cols.append(u_lo[m])
        vals.append(-w[m])

        m = both & (u_lo >= 0)
        np.add.at(diag, u_lo[m], w[m])
        m = both & (u_hi >= 0)
        np.add.at(diag, u_hi[m], w[m])

        m = both & (u_lo >= 0) & d_hi
        np.add.at(b, u_lo[m], w[m] * v_hi[m])
        m = both & (u_hi >= 0) & d_lo
        np.add.at(b, u_hi[m], w[m] * v_lo[m])

    rows.append(np.arange(n_unknowns))
    cols.append(np.arange(n_unknowns))
    vals.append(diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_unknowns, n_unknowns),
    )
    return A, b, uid


def solve_potential(
    volume: LabelVolume,
    table: TissueTable,
    layout: ElectrodeLayout,
    params: SolveParams = SolveParams(),
) -> PotentialSolution:
    """Solve for the potential driven by the layout's two electrode patches."""
    meta = volume.meta
    sigma_field, _ = lookup_properties(table, volume)
    sigma = sigma_field.values.astype(np.float64)
    conductive = sigma >= params.sigma_floor
    sigma = np.where(conductive, sigma, 0.0)

    patch_mask_a = np.zeros(meta.n_voxels, dtype=bool)
    patch_mask_a[layout.patch_a] = True
    patch_mask_a = patch_mask_a.reshape(meta.dims, order="F")
    patch_mask_b = np.zeros(meta.n_voxels, dtype=bool)
    patch_mask_b[layout.patch_b] = True
    patch_mask_b = patch_mask_b.reshape(meta.dims, order="F")

    surf = surface_mask(volume)
    for name, pm in (("a", patch_mask_a), ("b", patch_mask_b)):
        if not np.all(conductive[pm]):
            raise LayoutError(f"patch_{name} touches non-conductive voxels")
        if not np.all(surf[pm]):
            raise LayoutError(f"patch_{name} does not lie on the head surface")

    # Components of the conductive region; the solve domain is every component
    # that contains an electrode voxel. Other conductive islands are left out
    # of the solve (phi and |E| report 0 there, outside solved_mask).
    comp, _ = cc_label(conductive, structure=np.array(
        [[[0, 0, 0], [0, 1, 0], [0, 0, 0]],
         [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
         [[0, 0, 0], [0, 1, 0], [0, 0, 0]]], dtype=int))
    comps_a = np.unique(comp[patch_mask_a])
    comps_b = np.unique(comp[patch_mask_b])
    if not np.intersect1d(comps_a, comps_b).size:
        raise NoConductivePathError(
            "no conductive path connects the two electrode patches"
        )
    powered = np.union1d(comps_a, comps_b)
    domain = np.isin(comp, powered) & conductive
    sigma_dom = np.where(domain, sigma, 0.0)

    dirichlet = patch_mask_a | patch_mask_b
    dir_vals = np.zeros(meta.dims)
    dir_vals[patch_mask_a] = params.voltage_a
    dir_vals[patch_mask_b] = params.voltage_b

    A, b, uid = assemble_system(sigma_dom, dirichlet, dir_vals, meta.spacing)
    n_unknowns = A.shape[0]
    budget = params.iteration_budget(n_unknowns)

    x = np.zeros(n_unknowns)
    iterations = 0
    norm_b = np.linalg.norm(b)
    if n_unknowns and norm_b > 0:
        M = sp.diags(1.0 / A.diagonal())
        tol = params.rel_residual_tol

        def rel_residual(vec):
            return float(np.linalg.norm(A @ vec - b) / norm_b)

        # cg stops on its recurrence residual; verify the true residual and
        # continue (warm-started) if it has drifted above tolerance.
        while True:
            it_count = [0]
            x, _ = cg(
                A,
                b,
                x0=x,
                rtol=tol,
                atol=0.0,
                maxiter=budget - iterations,
                M=M,
                callback=lambda _: it_count.__setitem__(0, it_count[0] + 1),
            )
            iterations += it_count[0]
            res = rel_residual(x)
            if res <= tol:
                break
            if iterations >= budget:
                raise ConvergenceError(
                    f"solver used {iterations} iterations (budget {budget}) "
                    f"without reaching tolerance: residual {res:.3e} > {tol:.3e}"
                )
        final_residual = res
    else:
        final_residual = 0.0

    v_lo = min(params.voltage_a, params.voltage_b)
    v_hi = max(params.voltage_a, params.voltage_b)
    phi = np.zeros(meta.dims)
    phi[dirichlet] = dir_vals[dirichlet]
    phi[uid >= 0] = np.clip(x, v_lo, v_hi)  # project CG overshoot onto the exact bounds
    solved = (uid >= 0) | dirichlet
    return PotentialSolution(
        meta=meta,
        phi=phi,
        solved_mask=solved,
        conductive_mask=conductive,
        iterations=iterations,
        final_residual=final_residual,
        voltage_lo=v_lo,
        voltage_hi=v_hi,
    )


def field_magnitude(solution: PotentialSolution, meta: GridMeta | None = None) -> ScalarField:
    """|grad phi| in V/cm: central differences inside the solved region,
    one-sided at its boundary, 0 outside."""
    if meta is None:
        meta = solution.meta
    elif meta.dims != solution.meta.dims or meta.spacing != solution.meta.spacing:
        raise ValueError("meta does not match the solution grid")
    phi = solution.phi
    m = solution.solved_mask
    total = np.zeros(meta.dims)
    for axis in range(3):
        h = meta.spacing[axis]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, 1)
        hi[axis] = slice(-1, None)

        m_plus = np.roll(m, -1, axis=axis)
        m_plus[tuple(hi)] = False
        m_minus = np.roll(m, 1, axis=axis)
        m_minus[tuple(lo)] = False
        phi_plus = np.roll(phi, -1, axis=axis)
        phi_minus = np.roll(phi, 1, axis=axis)

        g = np.zeros(meta.dims)
        sel = m & m_plus & m_minus
        g[sel] = (phi_plus[sel] - phi_minus[sel]) / (2.0 * h)
        sel = m & m_plus & ~m_minus
        g[sel] = (phi_plus[sel] - phi[sel]) / h
        sel = m & ~m_plus & m_minus
        g[sel] = (phi[sel] - phi_minus[sel]) / h
        total += g * g
    emag = np.zeros(meta.dims)
    emag[m] = 10.0 * np.sqrt(total[m])  # V/mm -> V/cm
    return ScalarField(meta, emag, "volt-per-cm")


@dataclass(frozen=True)
class LinearityReport:
    max_rel_deviation: float
    iterations: tuple[int, int]
    residuals: tuple[float, float]


def linearity_check(
    volume: LabelVolume,
    table: TissueTable,
    layout: ElectrodeLayout,
    params: SolveParams = SolveParams(),
) -> LinearityReport:
    """Solve at (va, vb) and (2va, 2vb); report how far |E| is from scaling by 2."""
    sol1 = solve_potential(volume, table, layout, params)
    params2 = SolveParams(
        voltage_a=2.0 * params.voltage_a,
        voltage_b=2.0 * params.voltage_b,
        rel_residual_tol=params.rel_residual_tol,
        max_iterations=params.max_iterations,
        sigma_floor=params.sigma_floor,
    )
    sol2 = solve_potential(volume, table, layout, params2)
    e1 = field_magnitude(sol1).values
    e2 = field_magnitude(sol2).values
    mask = sol1.solved_mask
    scale = float(np.abs(e2[mask]).max()) if mask.any() else 0.0
    if scale == 0.0:
        dev = 0.0
    else:
        dev = float(np.abs(2.0 * e1[mask] - e2[mask]).max() / scale)
    return LinearityReport(
        max_rel_deviation=dev,
        iterations=(sol1.iterations, sol2.iterations),
        residuals=(sol1.final_residual, sol2.final_residual),
    )
