"""Tensor-fit, eigensolver, masking, and FA/MD contract tests."""

import math

import numpy as np
import pytest

from neurofuse.dti import (
    EmptyMask,
    InsufficientDirections,
    TensorField,
    brain_mask,
    eigvals_sym3x3,
    fit_tensor,
    fractional_anisotropy,
    mean_diffusivity,
)
from neurofuse.nifti import DiffusionSeries, Volume3D

#### independent oracles (scalar, straight off the formulas) ####


def fa_oracle(l1, l2, l3):
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    if den == 0.0:
        return 0.0
    return math.sqrt(0.5) * math.sqrt(num) / math.sqrt(den)


def md_oracle(l1, l2, l3):
    return (l1 + l2 + l3) / 3.0


# frozen by exact rational evaluation of the FA formula
FA_REFERENCE = 0.7990222037494894


def directions(n, seed=None):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    g = np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1)
    if seed is not None:
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        g = g @ q.T
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def tensor_to_comps(d):
    return np.array([d[0, 0], d[0, 1], d[0, 2], d[1, 1], d[1, 2], d[2, 2]])


def synthetic_series(tensor, dims=(6, 6, 6), n_dirs=12, b=1000.0, s0=100.0, n_b0=1):
    """Noiseless Stejskal-Tanner forward signals for one uniform tensor."""
    g = directions(n_dirs)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, b)])
    bvecs = np.vstack([np.zeros((n_b0, 3)), g])
    aff = np.diag([2.0, 2.0, 2.0, 1.0])
    vols = []
    for bv, gv in zip(bvals, bvecs):
        atten = math.exp(-bv * float(gv @ tensor @ gv)) if bv > 0 else 1.0
        vols.append(Volume3D(dims, (2, 2, 2), aff, np.full(dims, s0 * atten)))
    return DiffusionSeries(vols, bvals, bvecs)


def random_pd_tensor(rng, scale=1e-3):
    a = rng.normal(size=(3, 3))
    d = a @ a.T
    return d * scale / np.trace(d)


#### eigensolver ####


def test_eigvals_match_numpy_on_random_matrices():
    rng = np.random.default_rng(0)
    mats = []
    for _ in range(2000):
        a = rng.normal(size=(3, 3))
        mats.append((a + a.T) / 2)
    comps = np.stack([tensor_to_comps(m) for m in mats])
    ours = eigvals_sym3x3(comps)
    ref = np.sort(np.linalg.eigvalsh(np.stack(mats)), axis=1)[:, ::-1]
    assert np.allclose(ours, ref, atol=1e-10)


def test_eigvals_diagonal_exact():
    comps = np.array([[3.0, 0.0, 0.0, -1.0, 0.0, 2.0]])
    assert np.array_equal(eigvals_sym3x3(comps)[0], [3.0, 2.0, -1.0])


def test_eigvals_isotropic_exact():
    comps = np.array([[0.7e-3, 0.0, 0.0, 0.7e-3, 0.0, 0.7e-3]])
    assert np.allclose(eigvals_sym3x3(comps)[0], 0.7e-3, atol=0)


def test_eigvals_descending_property():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5000, 3, 3))
    sym = (a + np.transpose(a, (0, 2, 1))) / 2
    comps = np.stack([tensor_to_comps(m) for m in sym])
    e = eigvals_sym3x3(comps)
    assert np.all(e[:, 0] >= e[:, 1] - 1e-12)
    assert np.all(e[:, 1] >= e[:, 2] - 1e-12)


#### FA / MD ####


def field_from_eigenvalues(eigs):
    """Wrap an (n, 3) eigenvalue list as a fully masked 1-D-ish field."""
    n = eigs.shape[0]
    dims = (n, 1, 1)
    return TensorField(
        dims,
        (1.0, 1.0, 1.0),
        np.eye(4),
        np.zeros(dims + (6,)),
        eigs.reshape(dims + (3,)),
        np.ones(dims, dtype=bool),
    )


def test_fa_trivial_values():
    eigs = np.array(
        [
            [1e-3, 1e-3, 1e-3],  # isotropic -> 0
            [1.0, 0.0, 0.0],  # stick -> 1
            [1.7e-3, 3e-4, 3e-4],  # frozen reference
            [0.0, 0.0, 0.0],  # degenerate -> 0 by convention
        ]
    )
    fa = fractional_anisotropy(field_from_eigenvalues(eigs)).volume.data.ravel()
    assert fa[0] == 0.0
    assert fa[1] == 1.0
    assert abs(fa[2] - FA_REFERENCE) < 1e-12
    assert fa[3] == 0.0


def test_md_trivial_values():
    eigs = np.array([[1.7e-3, 3e-4, 3e-4], [0.7e-3, 0.7e-3, 0.7e-3]])
    md = mean_diffusivity(field_from_eigenvalues(eigs)).volume.data.ravel()
    assert abs(md[0] - 7.666666666666667e-4) < 1e-12
    assert abs(md[1] - 0.7e-3) < 1e-15


def test_fa_md_match_oracle_on_random_tensors():
    rng = np.random.default_rng(42)
    eigs = np.sort(rng.uniform(0.0, 3e-3, size=(1000, 3)), axis=1)[:, ::-1]
    field = field_from_eigenvalues(eigs)
    fa = fractional_anisotropy(field).volume.data.ravel()
    md = mean_diffusivity(field).volume.data.ravel()
    for i in range(1000):
        assert abs(fa[i] - fa_oracle(*eigs[i])) < 1e-12
        assert abs(md[i] - md_oracle(*eigs[i])) < 1e-12


def test_fa_stays_in_unit_interval():
    rng = np.random.default_rng(3)
    eigs = np.sort(rng.uniform(0, 1, size=(5000, 3)), axis=1)[:, ::-1]
    fa = fractional_anisotropy(field_from_eigenvalues(eigs)).volume.data
    assert np.all(fa >= 0.0)
    assert np.all(fa <= 1.0)


def test_scalar_maps_zero_outside_mask():
    eigs = np.tile([1.7e-3, 3e-4, 3e-4], (4, 1))
    field = field_from_eigenvalues(eigs)
    field.mask[2:] = False
    field.eigenvalues[~field.mask] = 0.0
    fa = fractional_anisotropy(field).volume.data.ravel()
    md = mean_diffusivity(field).volume.data.ravel()
    assert np.all(fa[2:] == 0.0)
    assert np.all(md[2:] == 0.0)
    assert fa[0] > 0.7


#### tensor fit ####


def test_fit_recovers_diagonal_tensor():
    d = np.diag([1.7e-3, 3e-4, 3e-4])
    series = synthetic_series(d, n_dirs=12)
    mask = np.ones(series.dims, dtype=bool)
    field = fit_tensor(series, mask)
    assert field.mask.all()
    expect = tensor_to_comps(d)
    assert np.max(np.abs(field.tensor - expect)) < 1e-9
    assert np.max(np.abs(field.eigenvalues - [1.7e-3, 3e-4, 3e-4])) < 1e-9
    fa = fractional_anisotropy(field).volume.data
    assert np.max(np.abs(fa - FA_REFERENCE)) < 1e-9


def test_fit_recovers_isotropic_tensor():
    d = np.eye(3) * 0.7e-3
    series = synthetic_series(d, n_dirs=12)
    field = fit_tensor(series, np.ones(series.dims, dtype=bool))
    assert np.max(np.abs(field.eigenvalues - 0.7e-3)) < 1e-10
    fa = fractional_anisotropy(field).volume.data
    assert np.max(fa) < 1e-6


def test_fit_rotation_invariance_of_fa_md():
    rng = np.random.default_rng(11)
    for _ in range(5):
        d = random_pd_tensor(rng)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        d_rot = q @ d @ q.T
        f1 = fit_tensor(synthetic_series(d, dims=(3, 3, 3), n_dirs=16), np.ones((3, 3, 3), bool))
        f2 = fit_tensor(
            synthetic_series(d_rot, dims=(3, 3, 3), n_dirs=16), np.ones((3, 3, 3), bool)
        )
        fa1 = fractional_anisotropy(f1).volume.data[0, 0, 0]
        fa2 = fractional_anisotropy(f2).volume.data[0, 0, 0]
        md1 = mean_diffusivity(f1).volume.data[0, 0, 0]
        md2 = mean_diffusivity(f2).volume.data[0, 0, 0]
        assert abs(fa1 - fa2) < 1e-9
        assert abs(md1 - md2) < 1e-9


def test_eigenvalue_scale_equivariance():
    rng = np.random.default_rng(5)
    comps = np.stack([tensor_to_comps(random_pd_tensor(rng)) for _ in range(200)])
    e1 = eigvals_sym3x3(comps)
    # power-of-two factor: exact in binary floating point
    assert np.array_equal(eigvals_sym3x3(comps * 2.0), 2.0 * e1)
    e2 = eigvals_sym3x3(comps * 2.5)
    assert np.allclose(e2, 2.5 * e1, rtol=1e-9, atol=1e-15)


def test_fit_insufficient_directions():
    # 12 b>0 volumes but only 5 distinct direction lines -> rank < 6
    d = np.diag([1e-3, 1e-3, 1e-3])
    base = directions(5)
    g = np.vstack([base, base, base[:2]])
    dims = (3, 3, 3)
    aff = np.eye(4)
    bvals = np.concatenate([[0.0], np.full(12, 1000.0)])
    bvecs = np.vstack([np.zeros(3), g])
    vols = [Volume3D(dims, (1, 1, 1), aff, np.full(dims, 100.0)) for _ in range(13)]
    series = DiffusionSeries(vols, bvals, bvecs)
    with pytest.raises(InsufficientDirections):
        fit_tensor(series, np.ones(dims, dtype=bool))


def test_nonpositive_signal_unmasks_voxel():
    d = np.diag([1.7e-3, 3e-4, 3e-4])
    series = synthetic_series(d, dims=(4, 4, 4), n_dirs=12)
    # poke a zero into one DWI volume at one voxel
    series.volumes[3].data[1, 2, 3] = 0.0
    field = fit_tensor(series, np.ones((4, 4, 4), dtype=bool))
    assert not field.mask[1, 2, 3]
    assert np.all(field.tensor[1, 2, 3] == 0.0)
    assert np.all(field.eigenvalues[1, 2, 3] == 0.0)
    assert field.mask.sum() == 64 - 1


def test_negative_eigenvalues_clamped():
    # craft signals that rise with b so the fitted tensor goes negative
    dims = (2, 2, 2)
    aff = np.eye(4)
    g = directions(12)
    bvals = np.concatenate([[0.0], np.full(12, 1000.0)])
    bvecs = np.vstack([np.zeros(3), g])
    vols = [Volume3D(dims, (1, 1, 1), aff, np.full(dims, 100.0))]
    vols += [Volume3D(dims, (1, 1, 1), aff, np.full(dims, 150.0)) for _ in range(12)]
    series = DiffusionSeries(vols, bvals, bvecs)
    field = fit_tensor(series, np.ones(dims, dtype=bool))
    assert np.all(field.eigenvalues >= 0.0)


#### brain mask ####


def sphere_volume(dims=(24, 24, 24), radius=8.0, value=100.0):
    center = (np.array(dims) - 1) / 2
    idx = np.indices(dims)
    dist = np.sqrt(sum((idx[i] - center[i]) ** 2 for i in range(3)))
    data = np.where(dist <= radius, value, 0.0)
    return Volume3D(dims, (1, 1, 1), np.eye(4), data), dist


def test_mask_recovers_sphere_within_one_voxel_shell():
    vol, dist = sphere_volume()
    mask = brain_mask(vol, 0.2)
    inner = dist <= 7.0  # sphere eroded by one voxel
    outer = dist <= 9.0  # sphere dilated by one voxel
    assert np.all(mask[inner])
    assert not np.any(mask[~outer])


def test_mask_all_zero_raises():
    vol = Volume3D((8, 8, 8), (1, 1, 1), np.eye(4), np.zeros((8, 8, 8)))
    with pytest.raises(EmptyMask):
        brain_mask(vol)


def bfs_components(fg):
    """Brute-force 6-connected components, independent of scipy."""
    fg = np.asarray(fg, dtype=bool)
    seen = np.zeros_like(fg)
    comps = []
    dims = fg.shape
    for start in zip(*np.nonzero(fg)):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            x, y, z = stack.pop()
            comp.append((x, y, z))
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (x + dx, y + dy, z + dz)
                if all(0 <= n[i] < dims[i] for i in range(3)) and fg[n] and not seen[n]:
                    seen[n] = True
                    stack.append(n)
        comps.append(comp)
    return comps


def test_mask_keeps_largest_component_against_bfs_oracle():
    dims = (20, 20, 20)
    data = np.zeros(dims)
    data[2:10, 2:10, 2:10] = 100.0  # 512 voxels
    data[14:18, 14:18, 14:18] = 100.0  # 64 voxels
    vol = Volume3D(dims, (1, 1, 1), np.eye(4), data)
    mask = brain_mask(vol, 0.2)
    fg = data >= 0.2 * np.percentile(data, 99)
    comps = bfs_components(fg)
    largest = max(comps, key=len)
    expect = np.zeros(dims, dtype=bool)
    for v in largest:
        expect[v] = True
    # closing cannot shrink the kept component
    assert np.all(mask[expect])
    # and the small blob must be gone
    assert not mask[15, 15, 15]


def test_mask_closing_fills_single_voxel_pit():
    vol, dist = sphere_volume()
    vol.data[12, 12, 12] = 0.0  # carve an interior pinhole
    mask = brain_mask(vol, 0.2)
    assert mask[12, 12, 12]


def test_mask_is_deterministic():
    vol, _ = sphere_volume()
    assert np.array_equal(brain_mask(vol), brain_mask(vol))
