"""Synthetic volumes with analytically known structure.

Two families: DWI series following the Stejskal-Tanner forward model over
piecewise-constant tensor fields, and 3-class classification sets where
class identity is encoded purely in region geometry (size), with per-sample
jitter. Identical (spec, seed) pairs produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .nifti import DiffusionSeries, Volume3D, write_dwi_series, write_nifti

DWI_S0 = 100.0  # b=0 signal inside regions; background is exactly 0


class PhantomError(Exception):
    pass


class InvalidTensor(PhantomError):
    pass


@dataclass
class Region:
    """One geometric primitive painted into the volume (later wins).

    kind: 'sphere' (center, radius), 'box' (lo, hi half-open), or 'tube'
    (axis 0/1/2, center in the two cross axes, radius). Coordinates are in
    voxel units. tensor is a 3x3 symmetric PSD diffusion tensor (mm^2/s);
    intensity is the scalar value for intensity phantoms.
    """

    kind: str
    center: tuple = ()
    radius: float = 0.0
    lo: tuple = ()
    hi: tuple = ()
    axis: int = 2
    tensor: np.ndarray | None = None
    intensity: float = 1.0


@dataclass
class PhantomSpec:
    dims: tuple
    regions: list
    noise_sigma: float = 0.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)


def _region_mask(region: Region, dims) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64)
    if region.kind == "sphere":
        c = region.center
        d2 = sum((idx[i] - c[i]) ** 2 for i in range(3))
        return d2 <= region.radius**2
    if region.kind == "box":
        m = np.ones(dims, dtype=bool)
        for i in range(3):
            m &= (idx[i] >= region.lo[i]) & (idx[i] < region.hi[i])
        return m
    if region.kind == "tube":
        axes = [i for i in range(3) if i != region.axis]
        d2 = sum((idx[a] - c) ** 2 for a, c in zip(axes, region.center))
        return d2 <= region.radius**2
    raise ValueError(f"unknown region kind {region.kind!r}")


def _label_map(spec: PhantomSpec) -> np.ndarray:
    """Voxel -> region index + 1, painter's order; 0 = background."""
    labels = np.zeros(spec.dims, dtype=np.int32)
    for i, region in enumerate(spec.regions):
        labels[_region_mask(region, spec.dims)] = i + 1
    return labels


def _affine(spec: PhantomSpec) -> np.ndarray:
    # world origin at the volume center (scanner-isocenter convention);
    # keeps world-frame rotations decoupled from translations
    aff = np.diag([spec.spacing[0], spec.spacing[1], spec.spacing[2], 1.0])
    aff[:3, 3] = -(np.array(spec.dims) - 1) / 2.0 * np.array(spec.spacing)
    return aff


def _check_tensors(spec: PhantomSpec):
    for i, region in enumerate(spec.regions):
        if region.tensor is None:
            raise InvalidTensor(f"region {i} has no tensor")
        t = np.asarray(region.tensor, dtype=np.float64)
        if t.shape != (3, 3) or not np.allclose(t, t.T):
            raise InvalidTensor(f"region {i} tensor is not symmetric 3x3")
        if np.linalg.eigvalsh(t).min() < 0:
            raise InvalidTensor(f"region {i} tensor has a negative eigenvalue")


def default_bvals_bvecs(n_dirs: int = 12, b: float = 1000.0):
    """One b=0 plus n golden-spiral directions at the given b-value."""
    i = np.arange(n_dirs) + 0.5
    phi = np.arccos(1 - 2 * i / n_dirs)
    theta = np.pi * (1 + 5**0.5) * i
    g = np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    bvals = np.concatenate([[0.0], np.full(n_dirs, b)])
    bvecs = np.vstack([np.zeros(3), g])
    return bvals, bvecs


def generate_dwi(spec: PhantomSpec, bvals=None, bvecs=None) -> DiffusionSeries:
    """Noisy Stejskal-Tanner signals over the spec's tensor regions.

    S_i = S0 * exp(-b_i g_i^T D g_i) with S0 = 100 inside regions and 0
    outside; Gaussian noise (noise_sigma, seeded) is added and the result
    clamped at 0. Tensors are constant per region, so attenuation is a
    per-region lookup.
    """
    _check_tensors(spec)
    if bvals is None or bvecs is None:
        bvals, bvecs = default_bvals_bvecs()
    bvals = np.asarray(bvals, dtype=np.float64)
    bvecs = np.asarray(bvecs, dtype=np.float64)
    labels = _label_map(spec)
    s0 = np.where(labels > 0, DWI_S0, 0.0)
    tensors = [np.asarray(r.tensor, dtype=np.float64) for r in spec.regions]
    rng = np.random.default_rng(spec.seed)
    affine = _affine(spec)
    volumes = []
    for b, g in zip(bvals, bvecs):
        if b > 0:
            atten = np.array([1.0] + [math.exp(-b * float(g @ t @ g)) for t in tensors])
            data = s0 * atten[labels]
        else:
            data = s0.copy()
        if spec.noise_sigma > 0:
            data = data + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
            np.maximum(data, 0.0, out=data)
        volumes.append(Volume3D(spec.dims, spec.spacing, affine, data))
    return DiffusionSeries(volumes, bvals, bvecs)


def generate_intensity(spec: PhantomSpec, smooth_sigma: float = 0.0) -> Volume3D:
    """Scalar phantom from the regions' intensity values (plus noise)."""
    labels = _label_map(spec)
    values = np.array([0.0] + [r.intensity for r in spec.regions])
    data = values[labels]
    if smooth_sigma > 0:
        data = ndimage.gaussian_filter(data, smooth_sigma)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        np.maximum(data, 0.0, out=data)
    return Volume3D(spec.dims, spec.spacing, _affine(spec), data)


def make_registration_phantom(dims=(64, 64, 64), seed: int = 0, spacing=(2.0, 2.0, 2.0)) -> Volume3D:
    """Structured multi-blob volume for exercising co-registration."""
    rng = np.random.default_rng(seed)
    lo, hi = 0.25, 0.75
    regions = [
        Region(
            "sphere",
            center=tuple((np.array(dims) - 1) / 2),
            radius=0.42 * min(dims),
            intensity=0.25,
        )
    ]
    for _ in range(6):
        c = tuple(rng.uniform(lo * d, hi * d) for d in dims)
        regions.append(
            Region(
                "sphere",
                center=c,
                radius=rng.uniform(0.06, 0.14) * min(dims),
                intensity=rng.uniform(0.5, 1.0),
            )
        )
    regions.append(
        Region(
            "tube",
            axis=int(rng.integers(0, 3)),
            center=tuple(rng.uniform(0.35 * d, 0.65 * d) for d in dims[:2]),
            radius=0.05 * min(dims),
            intensity=rng.uniform(0.6, 0.9),
        )
    )
    spec = PhantomSpec(dims, regions, noise_sigma=0.0, seed=seed, spacing=spacing)
    vol = generate_intensity(spec, smooth_sigma=1.0)
    return vol


#### 3-class classification sets ####


def tensor_from_fa_md(fa: float, md: float, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Axially symmetric tensor hitting exact FA and MD targets."""
    if not 0.0 <= fa < 1.0:
        raise ValueError(f"fa must be in [0, 1), got {fa}")
    delta = fa / math.sqrt(3.0 - 2.0 * fa * fa)
    l_par = md * (1.0 + 2.0 * delta)
    l_perp = md * (1.0 - delta)
    n = np.asarray(axis, dtype=np.float64)
    n /= np.linalg.norm(n)
    return l_perp * np.eye(3) + (l_par - l_perp) * np.outer(n, n)


def make_class_specs(
    dims=(48, 48, 48),
    radii=(0.20, 0.28, 0.36),
    noise_sigma: float = 0.5,
    spacing=(2.0, 2.0, 2.0),
):
    """Base specs for (NC, MCI, AD): concentric spheres, class = size.

    Outer shell: dim T1w signal, low FA, fast diffusion; core: bright,
    high FA, slower diffusion. Only the radii differ across classes.
    """
    center = tuple((np.array(dims) - 1) / 2)
    specs = []
    for r_frac in radii:
        r = r_frac * min(dims)
        shell = Region(
            "sphere",
            center=center,
            radius=r,
            tensor=tensor_from_fa_md(0.25, 1.1e-3, axis=(1.0, 0.0, 0.0)),
            intensity=0.55,
        )
        core = Region(
            "sphere",
            center=center,
            radius=0.5 * r,
            tensor=tensor_from_fa_md(0.75, 0.65e-3, axis=(0.0, 0.0, 1.0)),
            intensity=1.0,
        )
        specs.append(PhantomSpec(dims, [shell, core], noise_sigma=noise_sigma, spacing=spacing))
    return specs


def ground_truth_maps(spec: PhantomSpec):
    """Noiseless FA and MD volumes implied by the spec's region tensors."""
    labels = _label_map(spec)
    fa_vals, md_vals = [0.0], [0.0]
    for r in spec.regions:
        eig = np.linalg.eigvalsh(np.asarray(r.tensor, dtype=np.float64))
        l1, l2, l3 = eig[::-1]
        den = l1 * l1 + l2 * l2 + l3 * l3
        num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
        fa_vals.append(math.sqrt(0.5 * num / den) if den > 0 else 0.0)
        md_vals.append((l1 + l2 + l3) / 3.0)
    affine = _affine(spec)
    fa = Volume3D(spec.dims, spec.spacing, affine, np.array(fa_vals)[labels])
    md = Volume3D(spec.dims, spec.spacing, affine, np.array(md_vals)[labels])
    return fa, md


def _jitter_spec(spec: PhantomSpec, jitter: float, rng, sample_seed: int) -> PhantomSpec:
    """Per-sample geometry: common radius factor plus a common center shift."""
    factor = 1.0 + rng.uniform(-jitter, jitter)
    shift = rng.uniform(-0.04, 0.04, size=3) * np.array(spec.dims)
    regions = []
    for r in spec.regions:
        r2 = replace(r)
        if r.kind == "sphere":
            r2.radius = r.radius * factor
            r2.center = tuple(np.asarray(r.center) + shift)
        elif r.kind == "tube":
            r2.radius = r.radius * factor
            axes = [i for i in range(3) if i != r.axis]
            r2.center = tuple(np.asarray(r.center) + shift[axes])
        else:
            r2.lo = tuple(np.asarray(r.lo) + shift)
            r2.hi = tuple(np.asarray(r.hi) + shift)
        regions.append(r2)
    return replace(spec, regions=regions, seed=sample_seed)


def generate_classification_set(
    class_specs,
    n_per_class: int,
    out_dir,
    modality_transforms=None,
    jitter: float = 0.1,
    bvals=None,
    bvecs=None,
    seed: int = 0,
    withhold=(0.0, 0.0),
    labels=("NC", "MCI", "AD"),
) -> str:
    """Write a labelled multimodal phantom cohort and its manifest CSV.

    Per sample: t1w.nii.gz, dwi.nii.gz + sidecars, and noiseless reference
    fa.nii.gz / md.nii.gz under <out_dir>/<subject_id>/. Manifest paths are
    relative to the manifest's directory, so regeneration with the same
    (specs, seed) is byte-identical wherever the set lands. Class identity
    is carried by region geometry; per-sample jitter scales radii by
    1 +- jitter and shifts centers. withhold = (t1w_only_frac,
    dti_only_frac): those fractions of each class keep only one modality in
    the manifest (files are still written). Returns the manifest path.
    """
    if len(class_specs) != len(labels):
        raise ValueError("need one spec per class label")
    if modality_transforms is None:
        modality_transforms = {}
    if bvals is None or bvecs is None:
        bvals, bvecs = default_bvals_bvecs()
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    n_t1w_only = int(math.floor(n_per_class * withhold[0]))
    n_dti_only = int(math.floor(n_per_class * withhold[1]))
    rows = []
    for ci, (label, base) in enumerate(zip(labels, class_specs)):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            sample_seed = int(rng.integers(0, 2**31 - 1))
            spec = _jitter_spec(base, jitter, rng, sample_seed)
            subject = f"{label.lower()}{i:04d}"
            sdir = os.path.join(out_dir, subject)
            os.makedirs(sdir, exist_ok=True)

            t1w = generate_intensity(spec)
            if "t1w" in modality_transforms:
                t1w = modality_transforms["t1w"](t1w)
            t1w_path = f"{subject}/t1w.nii.gz"
            write_nifti(t1w, os.path.join(sdir, "t1w.nii.gz"))

            series = generate_dwi(spec, bvals, bvecs)
            dwi_path = f"{subject}/dwi.nii.gz"
            bval_path = f"{subject}/dwi.bval"
            bvec_path = f"{subject}/dwi.bvec"
            write_dwi_series(
                series,
                os.path.join(sdir, "dwi.nii.gz"),
                os.path.join(sdir, "dwi.bval"),
                os.path.join(sdir, "dwi.bvec"),
            )

            fa, md = ground_truth_maps(spec)
            if "fa" in modality_transforms:
                fa = modality_transforms["fa"](fa)
            if "md" in modality_transforms:
                md = modality_transforms["md"](md)
            write_nifti(fa, os.path.join(sdir, "fa.nii.gz"))
            write_nifti(md, os.path.join(sdir, "md.nii.gz"))

            if i < n_t1w_only:
                row = (subject, "s1", label, t1w_path, "", "", "")
            elif i < n_t1w_only + n_dti_only:
                row = (subject, "s1", label, "", dwi_path, bval_path, bvec_path)
            else:
                row = (subject, "s1", label, t1w_path, dwi_path, bval_path, bvec_path)
            rows.append(row)
    with open(manifest_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["subject_id", "session_id", "label", "t1w_path", "dwi_path", "bval_path", "bvec_path"]
        )
        w.writerows(rows)
    return manifest_path
