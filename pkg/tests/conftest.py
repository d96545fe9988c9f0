import numpy as np
import pytest

from headfield import geometry, phantom, volume


@pytest.fixture(scope="session")
def default_phantom():
    """48^3 zero-jitter phantom used by several modules."""
    spec = phantom.default_phantom_spec(seed=7)
    spec = _zero_jitter(spec)
    return phantom.make_phantom(spec)


@pytest.fixture(scope="session")
def small_phantom():
    spec = phantom.default_phantom_spec(dims=(24, 24, 24), spacing=(4.0, 4.0, 4.0), seed=11)
    return phantom.make_phantom(spec)


def _zero_jitter(spec):
    from dataclasses import replace

    return replace(
        spec,
        jitter_semi_axes_mm=0.0,
        jitter_tumor_center_mm=0.0,
        jitter_tumor_radius_mm=0.0,
    )


@pytest.fixture
def zero_jitter():
    return _zero_jitter


def make_bar(ny=21, cross=6, spacing=1.0, labels_by_y=None):
    """Bar volume spanning the full grid, layered along y.

    labels_by_y maps y index -> tissue label (default: all white matter).
    Returns (volume, layout) with full-face electrode patches at y=0 / y=ny-1.
    """
    dims = (cross, ny, cross)
    meta = volume.GridMeta(dims, (spacing, spacing, spacing))
    arr = np.full(dims, volume.WHITE, dtype=np.uint8)
    if labels_by_y:
        for yy, lab in labels_by_y.items():
            arr[:, yy, :] = lab
    vol = volume.LabelVolume(meta, arr)

    xs, zs = np.meshgrid(np.arange(cross), np.arange(cross), indexing="ij")
    lin_a = meta.linear_index(xs.ravel(), np.full(xs.size, 0), zs.ravel())
    lin_b = meta.linear_index(xs.ravel(), np.full(xs.size, ny - 1), zs.ravel())
    c = (cross - 1) / 2 * spacing
    layout = geometry.ElectrodeLayout(
        axis="AP",
        patch_a=np.sort(lin_a),
        patch_b=np.sort(lin_b),
        center_a=(c, 0.0, c),
        center_b=(c, (ny - 1) * spacing, c),
        patch_radius_mm=0.0,
    )
    return vol, layout


@pytest.fixture
def bar_factory():
    return make_bar


def series_bar_oracle(sigmas_per_voxel, spacing, va, vb):
    """Independent 1-D series-conductance solution for a layered bar.

    Returns voxel-center potentials; faces use the harmonic mean, so this is
    the exact solution of the discrete system for bars.
    """
    n = len(sigmas_per_voxel)
    face_resistance = []
    for i in range(n - 1):
        s1, s2 = sigmas_per_voxel[i], sigmas_per_voxel[i + 1]
        face_resistance.append(spacing / (2 * s1 * s2 / (s1 + s2)))
    total = sum(face_resistance)
    current = (va - vb) / total
    phi = [va]
    for r in face_resistance:
        phi.append(phi[-1] - current * r)
    return np.array(phi)
