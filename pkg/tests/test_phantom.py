"""Forward-model correctness and determinism of the synthetic volumes."""

import hashlib
import math
import os

import numpy as np
import pytest

from neurofuse.dti import brain_mask, fit_tensor, fractional_anisotropy, mean_diffusivity
from neurofuse.phantom import (
    DWI_S0,
    InvalidTensor,
    PhantomSpec,
    Region,
    default_bvals_bvecs,
    generate_classification_set,
    generate_dwi,
    generate_intensity,
    ground_truth_maps,
    make_class_specs,
    tensor_from_fa_md,
)


def fa_oracle(l1, l2, l3):
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    return math.sqrt(0.5 * num / den) if den > 0 else 0.0


def sphere_spec(noise=0.0, seed=0, tensor=None, dims=(24, 24, 24)):
    if tensor is None:
        tensor = np.diag([1.7e-3, 3e-4, 3e-4])
    region = Region("sphere", center=tuple((d - 1) / 2 for d in dims), radius=8.0, tensor=tensor)
    return PhantomSpec(dims, [region], noise_sigma=noise, seed=seed)


def file_hashes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in sorted(names):
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = hashlib.sha256(f.read()).hexdigest()
    return out


#### dwi forward model ####


def test_noiseless_b0_is_indicator_times_s0():
    spec = sphere_spec()
    series = generate_dwi(spec)
    labels = np.zeros(spec.dims)
    idx = np.indices(spec.dims, dtype=np.float64)
    c = (np.array(spec.dims) - 1) / 2
    inside = sum((idx[i] - c[i]) ** 2 for i in range(3)) <= 8.0**2
    expected = np.where(inside, DWI_S0, 0.0)
    assert np.array_equal(series.volumes[0].data, expected)


def test_attenuation_matches_tensor_quadratic_form():
    tensor = np.diag([1.7e-3, 3e-4, 3e-4])
    spec = sphere_spec(tensor=tensor)
    bvals, bvecs = default_bvals_bvecs(n_dirs=6, b=1000.0)
    series = generate_dwi(spec, bvals, bvecs)
    center = tuple(int((d - 1) // 2) for d in spec.dims)
    for b, g, vol in zip(bvals, bvecs, series.volumes):
        expected = DWI_S0 * math.exp(-b * float(g @ tensor @ g))
        assert abs(vol.data[center] - expected) < 1e-9


def test_fit_recovers_prescribed_eigenvalues():
    tensor = np.diag([1.7e-3, 3e-4, 3e-4])
    spec = sphere_spec(tensor=tensor)
    series = generate_dwi(spec)
    mask = brain_mask(series.mean_b0())
    field = fit_tensor(series, mask)
    inside = field.mask
    assert inside.sum() > 100
    ev = field.eigenvalues[inside]
    assert np.max(np.abs(ev[:, 0] - 1.7e-3)) < 1e-9
    assert np.max(np.abs(ev[:, 1] - 3e-4)) < 1e-9
    assert np.max(np.abs(ev[:, 2] - 3e-4)) < 1e-9
    fa = fractional_anisotropy(field)
    md = mean_diffusivity(field)
    assert abs(fa.volume.data[12, 12, 12] - fa_oracle(1.7e-3, 3e-4, 3e-4)) < 1e-9
    assert abs(md.volume.data[12, 12, 12] - (1.7e-3 + 3e-4 + 3e-4) / 3) < 1e-9


def test_noise_is_seeded_and_geometry_stable():
    a = generate_dwi(sphere_spec(noise=1.0, seed=5))
    b = generate_dwi(sphere_spec(noise=1.0, seed=5))
    c = generate_dwi(sphere_spec(noise=1.0, seed=6))
    assert np.array_equal(a.volumes[3].data, b.volumes[3].data)
    assert not np.array_equal(a.volumes[3].data, c.volumes[3].data)
    assert np.array_equal(a.volumes[0].affine, c.volumes[0].affine)
    assert np.all(a.volumes[3].data >= 0)  # noise clamped at zero


def test_asymmetric_tensor_rejected():
    t = np.eye(3) * 1e-3
    t[0, 1] = 1e-4  # not mirrored below the diagonal
    with pytest.raises(InvalidTensor):
        generate_dwi(sphere_spec(tensor=t))


def test_negative_eigenvalue_tensor_rejected():
    with pytest.raises(InvalidTensor):
        generate_dwi(sphere_spec(tensor=np.diag([1e-3, 1e-3, -1e-5])))


def test_missing_tensor_rejected():
    spec = sphere_spec()
    spec.regions[0].tensor = None
    with pytest.raises(InvalidTensor):
        generate_dwi(spec)


def test_world_origin_sits_at_volume_center():
    spec = sphere_spec(dims=(24, 20, 16))
    vol = generate_intensity(spec)
    center_vox = (np.array(spec.dims) - 1) / 2
    world = vol.affine @ np.append(center_vox, 1.0)
    assert np.allclose(world[:3], 0.0)


#### fa/md target construction ####


def test_tensor_from_fa_md_hits_targets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        fa_t = rng.uniform(0.0, 0.95)
        md_t = rng.uniform(2e-4, 2e-3)
        axis = rng.normal(size=3)
        t = tensor_from_fa_md(fa_t, md_t, axis=axis)
        ev = np.linalg.eigvalsh(t)[::-1]
        assert ev.min() >= 0
        assert abs(fa_oracle(*ev) - fa_t) < 1e-12
        assert abs(ev.mean() - md_t) < 1e-15


def test_tensor_from_fa_md_rejects_out_of_range():
    with pytest.raises(ValueError):
        tensor_from_fa_md(1.0, 1e-3)
    with pytest.raises(ValueError):
        tensor_from_fa_md(-0.1, 1e-3)


def test_ground_truth_maps_carry_exact_region_values():
    specs = make_class_specs(dims=(32, 32, 32))
    fa, md = ground_truth_maps(specs[0])
    center = (15, 15, 15)  # inside the core
    assert abs(fa.data[center] - 0.75) < 1e-12
    assert abs(md.data[center] - 0.65e-3) < 1e-15
    # shell voxel: halfway between core and outer radius along x
    r_outer = 0.20 * 32
    x = int(round(15.5 + 0.75 * r_outer))
    assert abs(fa.data[x, 15, 15] - 0.25) < 1e-12
    assert abs(md.data[x, 15, 15] - 1.1e-3) < 1e-15
    assert fa.data[0, 0, 0] == 0.0


#### classification sets ####


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    specs = make_class_specs(dims=(20, 20, 20), noise_sigma=0.5)
    manifest = generate_classification_set(specs, 4, out, seed=11)
    return out, manifest


def test_set_manifest_rows_and_files(small_set):
    out, manifest = small_set
    with open(manifest) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    header, rows = lines[0], lines[1:]
    assert header == "subject_id,session_id,label,t1w_path,dwi_path,bval_path,bvec_path"
    assert len(rows) == 12
    labels = [r.split(",")[2] for r in rows]
    assert labels.count("NC") == labels.count("MCI") == labels.count("AD") == 4
    for r in rows:
        parts = r.split(",")
        for p in parts[3:]:
            if p:
                assert not os.path.isabs(p)  # manifest stays relocatable
                assert os.path.exists(os.path.join(out, p))
    assert os.path.isfile(os.path.join(out, "nc0000", "fa.nii.gz"))
    assert os.path.isfile(os.path.join(out, "ad0003", "md.nii.gz"))


def test_set_regeneration_is_byte_identical(tmp_path):
    specs = make_class_specs(dims=(16, 16, 16))
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_classification_set(specs, 2, a, seed=3)
    generate_classification_set(specs, 2, b, seed=3)
    ha, hb = file_hashes(a), file_hashes(b)
    assert ha == hb
    c = tmp_path / "c"
    generate_classification_set(specs, 2, c, seed=4)
    assert file_hashes(c) != ha


def test_withholding_blanks_manifest_columns(tmp_path):
    specs = make_class_specs(dims=(16, 16, 16))
    manifest = generate_classification_set(specs, 5, tmp_path, seed=7, withhold=(0.2, 0.4))
    with open(manifest) as f:
        rows = [ln.strip().split(",") for ln in f][1:]
    for label in ("NC", "MCI", "AD"):
        mine = [r for r in rows if r[2] == label]
        t1w_only = [r for r in mine if r[3] and not r[4]]
        dti_only = [r for r in mine if r[4] and not r[3]]
        both = [r for r in mine if r[3] and r[4]]
        assert len(t1w_only) == 1  # floor(5 * 0.2)
        assert len(dti_only) == 2  # floor(5 * 0.4)
        assert len(both) == 2
        # the files themselves exist regardless of manifest withholding
        subj = t1w_only[0][0]
        assert os.path.isfile(os.path.join(tmp_path, subj, "dwi.nii.gz"))


def test_classes_separable_by_mean_intensity(small_set):
    """A scalar threshold on mean T1w intensity should separate the
    classes nearly perfectly: geometry (region size) carries the label."""
    from neurofuse.nifti import read_nifti

    out, manifest = small_set
    with open(manifest) as f:
        rows = [ln.strip().split(",") for ln in f][1:]
    feats, ys = [], []
    for r in rows:
        vol = read_nifti(os.path.join(out, r[3]))
        feats.append(float(vol.data.mean()))
        ys.append({"NC": 0, "MCI": 1, "AD": 2}[r[2]])
    feats = np.array(feats)
    ys = np.array(ys)
    correct = 0
    for i in range(len(ys)):  # leave-one-out nearest-class-mean
        keep = np.arange(len(ys)) != i
        means = [feats[keep][ys[keep] == k].mean() for k in range(3)]
        correct += int(np.argmin(np.abs(feats[i] - np.array(means))) == ys[i])
    assert correct / len(ys) >= 0.9


def test_jitter_varies_geometry_within_class(small_set):
    from neurofuse.nifti import read_nifti

    out, _ = small_set
    a = read_nifti(os.path.join(out, "nc0000", "t1w.nii.gz"))
    b = read_nifti(os.path.join(out, "nc0001", "t1w.nii.gz"))
    assert not np.array_equal(a.data > 0, b.data > 0)
