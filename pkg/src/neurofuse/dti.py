"""Diffusion-tensor scalar maps: brain masking, log-linear fit, FA and MD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .nifti import DiffusionSeries, Volume3D


class DtiError(Exception):
    pass


class EmptyMask(DtiError):
    pass


class InsufficientDirections(DtiError):
    pass


# 6-connectivity (faces only)
_CROSS = ndimage.generate_binary_structure(3, 1)


@dataclass
class TensorField:
    """Voxelwise symmetric tensors with precomputed eigenvalues.

    tensor is (nx, ny, nz, 6) in (xx, xy, xz, yy, yz, zz) order; eigenvalues
    is (nx, ny, nz, 3) sorted descending and clamped to >= 0. Voxels outside
    mask are all-zero in both.
    """

    dims: tuple
    spacing: tuple
    affine: np.ndarray
    tensor: np.ndarray
    eigenvalues: np.ndarray
    mask: np.ndarray


@dataclass
class ScalarMap:
    """A derived scalar volume tagged with what it is ('FA' or 'MD')."""

    volume: Volume3D
    kind: str


def brain_mask(b0: Volume3D, threshold_fraction: float = 0.2) -> np.ndarray:
    """Foreground mask from a (mean) b=0 volume.

    Threshold at threshold_fraction times the 99th intensity percentile,
    keep the largest 6-connected component, then one closing pass
    (dilate + erode, 6-neighbourhood) to fill pinholes.
    """
    data = b0.data
    thr = threshold_fraction * np.percentile(data, 99)
    fg = (data >= thr) & (data > 0)
    if not fg.any():
        raise EmptyMask("no voxels above threshold")
    labels, _ = ndimage.label(fg, structure=_CROSS)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    dilated = ndimage.binary_dilation(keep, structure=_CROSS)
    # border_value=1 so the closing never eats voxels at the array edge
    return ndimage.binary_erosion(dilated, structure=_CROSS, border_value=1)


def eigvals_sym3x3(comps: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices, closed form, descending.

    comps is (..., 6) in (xx, xy, xz, yy, yz, zz) order. Trigonometric
    solution for the characteristic cubic; exact sort on the diagonal
    fast path.
    """
    c = np.asarray(comps, dtype=np.float64)
    xx, xy, xz, yy, yz, zz = (c[..., i] for i in range(6))
    p1 = xy * xy + xz * xz + yz * yz
    q = (xx + yy + zz) / 3.0
    p2 = (xx - q) ** 2 + (yy - q) ** 2 + (zz - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    ps = np.where(p > 0, p, 1.0)
    bxx, byy, bzz = (xx - q) / ps, (yy - q) / ps, (zz - q) / ps
    bxy, bxz, byz = xy / ps, xz / ps, yz / ps
    detb = (
        bxx * (byy * bzz - byz * byz)
        - bxy * (bxy * bzz - byz * bxz)
        + bxz * (bxy * byz - byy * bxz)
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    out = np.stack([l1, l2, l3], axis=-1)
    diag = p1 == 0
    if np.any(diag):
        d = np.sort(np.stack([xx, yy, zz], axis=-1), axis=-1)[..., ::-1]
        out = np.where(diag[..., np.newaxis], d, out)
    return out


def _design_matrix(bvals, bvecs):
    g = bvecs
    cols = np.stack(
        [
            g[:, 0] * g[:, 0],
            2.0 * g[:, 0] * g[:, 1],
            2.0 * g[:, 0] * g[:, 2],
            g[:, 1] * g[:, 1],
            2.0 * g[:, 1] * g[:, 2],
            g[:, 2] * g[:, 2],
        ],
        axis=1,
    )
    return -bvals[:, np.newaxis] * cols


def fit_tensor(series: DiffusionSeries, mask: np.ndarray) -> TensorField:
    """Ordinary least squares on log-attenuations, voxelwise.

    ln(S_i/S_0) = -b_i g_i^T D g_i with S_0 the mean of the bval == 0
    volumes. Voxels where S_0 or any S_i is <= 0 fall back to an all-zero
    tensor and are removed from the mask. Eigenvalues are clamped to >= 0.
    Raises InsufficientDirections when the directions span fewer than 6
    tensor components.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != series.dims:
        raise ValueError(f"mask shape {mask.shape} != series dims {series.dims}")
    dwi = series.bvals > 0
    design = _design_matrix(series.bvals[dwi], series.bvecs[dwi])
    if np.linalg.matrix_rank(design) < 6:
        raise InsufficientDirections(
            f"{int(dwi.sum())} b>0 volumes span rank {np.linalg.matrix_rank(design)} < 6"
        )
    stacked = series.stacked()
    s0 = stacked[..., ~dwi].mean(axis=-1)
    signals = stacked[..., dwi]

    usable = mask & (s0 > 0) & np.all(signals > 0, axis=-1)
    tensor = np.zeros(series.dims + (6,))
    eigenvalues = np.zeros(series.dims + (3,))
    if usable.any():
        y = np.log(signals[usable] / s0[usable, np.newaxis])  # (nvox, m)
        coeffs = y @ np.linalg.pinv(design).T  # (nvox, 6)
        tensor[usable] = coeffs
        eigenvalues[usable] = np.maximum(eigvals_sym3x3(coeffs), 0.0)
    return TensorField(series.dims, series.spacing, series.affine, tensor, eigenvalues, usable)


def fractional_anisotropy(field: TensorField) -> ScalarMap:
    """FA from the eigenvalue field; 0 outside the mask and at zero tensors."""
    l1, l2, l3 = (field.eigenvalues[..., i] for i in range(3))
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    fa = np.zeros(field.dims)
    ok = field.mask & (den > 0)
    fa[ok] = np.sqrt(0.5 * num[ok] / den[ok])
    np.minimum(fa, 1.0, out=fa)  # shave float excess above the algebraic bound
    vol = Volume3D(field.dims, field.spacing, field.affine, fa)
    return ScalarMap(vol, "FA")


def mean_diffusivity(field: TensorField) -> ScalarMap:
    """MD = mean eigenvalue; 0 outside the mask."""
    md = np.zeros(field.dims)
    md[field.mask] = field.eigenvalues[field.mask].mean(axis=-1)
    vol = Volume3D(field.dims, field.spacing, field.affine, md)
    return ScalarMap(vol, "MD")
