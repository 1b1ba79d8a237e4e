"""Transform algebra, resampling, MI, and registration recovery tests."""

import numpy as np
import pytest

from neurofuse.nifti import Volume3D
from neurofuse.phantom import make_registration_phantom
from neurofuse.registration import (
    AffineTransform,
    DegenerateHistogram,
    JointHistogram,
    NonInvertibleTransform,
    RegistrationConfig,
    build_joint_histogram,
    downsample,
    mi_from_histogram,
    mutual_information,
    register_affine,
    resample,
)


def entropy_oracle(data, bins=32):
    """Shannon entropy (nats) of the nonzero voxels, min/max binned."""
    v = data[data != 0].ravel()
    lo, hi = v.min(), v.max()
    idx = np.minimum(((v - lo) * (bins / (hi - lo))).astype(int), bins - 1)
    p = np.bincount(idx, minlength=bins).astype(float)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


def rotation_angle(mat3):
    u, _, vt = np.linalg.svd(mat3)
    r = u @ vt
    return float(np.arccos(np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)))


def recovery_error(true, recovered):
    """Residual of true composed with recovered vs identity: (mm, rad)."""
    e = true.matrix() @ recovered.matrix()
    return float(np.linalg.norm(e[:3, 3])), rotation_angle(e[:3, :3])


#### transform algebra ####


def test_identity_params_give_exact_identity_matrix():
    assert np.array_equal(AffineTransform().matrix(), np.eye(4))


def test_composition_order_translation_after_linear():
    t = AffineTransform(translation=(1.0, 2.0, 3.0), scale=(2.0, 2.0, 2.0))
    p = t.matrix() @ np.array([1.0, 1.0, 1.0, 1.0])
    assert np.allclose(p[:3], [3.0, 4.0, 5.0])  # scale first, then translate


def test_shear_is_upper_triangular():
    t = AffineTransform(shear=(0.5, 0.0, 0.0))
    m = t.matrix()
    assert m[0, 1] == 0.5
    assert m[1, 0] == 0.0


def test_rotation_z_quarter_turn():
    t = AffineTransform(rotation=(0.0, 0.0, np.pi / 2))
    p = t.matrix() @ np.array([1.0, 0.0, 0.0, 1.0])
    assert np.allclose(p[:3], [0.0, 1.0, 0.0], atol=1e-12)


def test_params_and_json_roundtrip():
    t = AffineTransform((1, -2, 3), (0.1, 0.0, -0.2), (1.1, 0.9, 1.0), (0.05, 0.0, -0.02))
    r = AffineTransform.from_params(t.to_params())
    assert np.allclose(r.matrix(), t.matrix())
    j = AffineTransform.from_json(t.to_json())
    assert np.allclose(j.matrix(), t.matrix())
    assert len(t.to_params()) == 12


def test_nonpositive_scale_rejected():
    with pytest.raises(NonInvertibleTransform):
        AffineTransform(scale=(1.0, 0.0, 1.0))


#### resampling ####


def structured(dims=(12, 13, 14), seed=0, affine=None):
    rng = np.random.default_rng(seed)
    if affine is None:
        affine = np.eye(4)
    spacing = tuple(float(np.linalg.norm(affine[:3, i])) for i in range(3))
    return Volume3D(dims, spacing, affine, rng.random(dims))


def test_resample_identity_nearest_is_exact():
    v = structured()
    out = resample(v, AffineTransform(), v, "nearest")
    assert np.array_equal(out.data, v.data)


def test_resample_identity_trilinear_within_1e12():
    v = structured()
    out = resample(v, AffineTransform(), v, "trilinear")
    assert np.max(np.abs(out.data - v.data)) < 1e-12


def test_resample_one_voxel_translation_nearest():
    v = structured(dims=(8, 6, 5))
    out = resample(v, AffineTransform(translation=(1.0, 0.0, 0.0)), v, "nearest")
    # sampling one voxel ahead in x: content shifts down-index, far plane zero
    assert np.array_equal(out.data[:-1], v.data[1:])
    assert np.all(out.data[-1] == 0.0)


def test_resample_nearest_introduces_no_new_values():
    src = make_registration_phantom((48, 48, 48), seed=1)
    ref_aff = src.affine.copy()
    ref_aff[:3, :3] *= 48.0 / 224.0
    ref = Volume3D((224, 224, 32), tuple(s * 48 / 224 for s in src.spacing), ref_aff, np.zeros((224, 224, 32)))
    t = AffineTransform(translation=(2.0, -1.0, 0.5), rotation=(0.02, 0.0, -0.01))
    out = resample(src, t, ref, "nearest")
    assert np.isin(out.data.ravel(), np.concatenate([[0.0], src.data.ravel()])).all()


def test_resample_out_of_field_is_zero():
    v = structured()
    out = resample(v, AffineTransform(translation=(1000.0, 0.0, 0.0)), v, "trilinear")
    assert np.all(out.data == 0.0)


def test_downsample_preserves_block_mean_and_geometry():
    v = structured(dims=(8, 8, 8), affine=np.diag([2.0, 2.0, 2.0, 1.0]))
    d = downsample(v, 2)
    assert d.dims == (4, 4, 4)
    assert np.allclose(d.data[0, 0, 0], v.data[:2, :2, :2].mean())
    # voxel (0,0,0) of the coarse grid sits at the mean world position
    # of the 2x2x2 block it averages
    block = [(i, j, k) for i in range(2) for j in range(2) for k in range(2)]
    world = np.mean([v.affine @ np.array([*b, 1.0]) for b in block], axis=0)
    assert np.allclose(d.affine @ np.array([0, 0, 0, 1.0]), world)


#### mutual information ####


def test_mi_of_image_with_itself_equals_entropy():
    v = make_registration_phantom((32, 32, 32), seed=2)
    mi = mutual_information(v, v, bins=32)
    h = entropy_oracle(v.data, bins=32)
    assert abs(mi - h) < 1e-12


def test_mi_independent_noise_is_small():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.1, 1.0, size=(100, 100, 10))
        b = rng.uniform(0.1, 1.0, size=(100, 100, 10))
        assert mutual_information(a, b, bins=32) < 0.05


def test_mi_exactly_independent_pattern_is_zero():
    # f varies only along x, m only along y: joint = product of marginals
    x = np.arange(32, dtype=np.float64) + 1.0
    f = np.broadcast_to(x[:, None, None], (32, 32, 4)).copy()
    m = np.broadcast_to(x[None, :, None], (32, 32, 4)).copy()
    assert mutual_information(f, m, bins=32) == 0.0


def test_mi_symmetry_and_nonnegativity():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a = rng.random((20, 20, 20))
        b = rng.random((20, 20, 20))
        ab = mutual_information(a, b)
        ba = mutual_information(b, a)
        assert abs(ab - ba) < 1e-12
        assert ab >= 0.0


def test_constant_image_raises_degenerate():
    a = np.full((10, 10, 10), 3.0)
    b = np.random.default_rng(0).random((10, 10, 10))
    with pytest.raises(DegenerateHistogram):
        mutual_information(a, b)


def test_all_zero_images_raise_degenerate():
    z = np.zeros((5, 5, 5))
    with pytest.raises(DegenerateHistogram):
        mutual_information(z, z)


def test_single_occupied_marginal_bin_raises():
    counts = np.zeros((4, 4))
    counts[1, 1] = 10.0
    with pytest.raises(DegenerateHistogram):
        mi_from_histogram(JointHistogram(counts, (0, 1), (0, 1)))


def test_histogram_counts_match_numpy_oracle():
    rng = np.random.default_rng(4)
    a = rng.random((15, 15, 15))
    b = rng.random((15, 15, 15))
    h = build_joint_histogram(a, b, bins=16)
    # oracle: numpy histogram2d with identical edge conventions
    edges_a = np.linspace(a.min(), a.max(), 17)
    edges_b = np.linspace(b.min(), b.max(), 17)
    ref, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=[edges_a, edges_b])
    assert h.counts.sum() == a.size
    assert np.allclose(h.counts, ref)


#### registration ####


def test_register_self_recovers_near_identity():
    fixed = make_registration_phantom((48, 48, 48), seed=3)
    res = register_affine(fixed, fixed)
    # every corner of the volume must move less than half a voxel
    corners = np.array(
        [[i, j, k, 1.0] for i in (0, 47) for j in (0, 47) for k in (0, 47)]
    )
    world = (fixed.affine @ corners.T).T[:, :3]
    mapped = (res.transform.matrix() @ np.c_[world, np.ones(8)].T).T[:, :3]
    assert np.max(np.linalg.norm(mapped - world, axis=1)) <= 0.5 * min(fixed.spacing)


def test_register_recovers_known_transform():
    fixed = make_registration_phantom((48, 48, 48), seed=4)
    true = AffineTransform(translation=(5.0, -3.0, 2.0), rotation=(0.0, 0.05, 0.0))
    moving = resample(fixed, true, fixed, "trilinear")
    res = register_affine(fixed, moving)
    terr, aerr = recovery_error(true, res.transform)
    assert terr <= min(fixed.spacing)  # within one voxel
    assert aerr <= 0.01
    assert res.final_mi >= res.initial_mi


def test_register_recovers_large_pure_shift():
    # a 10-voxel shift destroys a band of the moving image, so self-MI is
    # unreachable; the transform itself must still come back sub-voxel
    fixed = make_registration_phantom((48, 48, 48), seed=5)
    true = AffineTransform(translation=(20.0, 0.0, 0.0))
    moving = resample(fixed, true, fixed, "trilinear")
    res = register_affine(fixed, moving)
    terr, aerr = recovery_error(true, res.transform)
    assert terr <= min(fixed.spacing)
    assert aerr <= 0.01
    assert res.final_mi > res.initial_mi


def test_register_self_is_flagged_no_improvement():
    # identity init already attains the MI maximum, so nothing can
    # strictly improve and the initialization comes back flagged
    fixed = make_registration_phantom((32, 32, 32), seed=6)
    res = register_affine(fixed, fixed, RegistrationConfig(levels=(2, 1), max_cycles=3))
    assert res.no_improvement
    assert res.final_mi == res.initial_mi
    assert res.transform.translation == (0.0, 0.0, 0.0)
    assert res.transform.rotation == (0.0, 0.0, 0.0)


def test_register_constant_moving_is_handled():
    fixed = make_registration_phantom((32, 32, 32), seed=6)
    flat = Volume3D(fixed.dims, fixed.spacing, fixed.affine, np.full(fixed.dims, 7.0))
    res = register_affine(fixed, flat, RegistrationConfig(levels=(2,), max_cycles=2))
    assert res.final_mi >= res.initial_mi


def test_register_never_returns_worse_than_init():
    fixed = make_registration_phantom((32, 32, 32), seed=7)
    true = AffineTransform(translation=(4.0, 4.0, -4.0))
    moving = resample(fixed, true, fixed, "trilinear")
    res = register_affine(fixed, moving, RegistrationConfig(levels=(2, 1), max_cycles=3))
    assert res.final_mi >= res.initial_mi
