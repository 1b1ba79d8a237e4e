"""Intensity-based affine co-registration via mutual information.

The transform maps fixed-image world points to moving-image world points
(pull-back), so resampling composes one voxel-to-voxel matrix per
evaluation. The optimizer is deterministic: multi-resolution pyramid,
cyclic coordinate descent, golden-section line search per parameter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nifti import Volume3D


class RegistrationError(Exception):
    pass


class NonInvertibleTransform(RegistrationError):
    pass


class DegenerateHistogram(RegistrationError):
    pass


@dataclass
class AffineTransform:
    """12-parameter affine: translation mm, rotation rad, scale, shear.

    World matrix composed as T @ R @ Sh @ Sc with R = Rz @ Ry @ Rx
    (x rotation applied first); Sh is upper-triangular unit shear
    (xy, xz, yz). Identity parameters give the exact identity matrix.
    """

    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    shear: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.translation = tuple(float(v) for v in self.translation)
        self.rotation = tuple(float(v) for v in self.rotation)
        self.scale = tuple(float(v) for v in self.scale)
        self.shear = tuple(float(v) for v in self.shear)
        if len(self.translation) != 3 or len(self.rotation) != 3:
            raise ValueError("translation and rotation need 3 components each")
        if len(self.scale) != 3 or len(self.shear) != 3:
            raise ValueError("scale and shear need 3 components each")
        if any(s <= 0 for s in self.scale):
            raise NonInvertibleTransform(f"scale must be positive, got {self.scale}")

    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        cx, sx = math.cos(rx), math.sin(rx)
        cy, sy = math.cos(ry), math.sin(ry)
        cz, sz = math.cos(rz), math.sin(rz)
        rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
        rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
        rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
        hxy, hxz, hyz = self.shear
        sh = np.array([[1, hxy, hxz], [0, 1, hyz], [0, 0, 1]], dtype=np.float64)
        sc = np.diag(self.scale).astype(np.float64)
        out = np.eye(4)
        out[:3, :3] = rot_z @ rot_y @ rot_x @ sh @ sc
        out[:3, 3] = self.translation
        return out

    def to_params(self) -> list:
        return list(self.translation) + list(self.rotation) + list(self.scale) + list(self.shear)

    @classmethod
    def from_params(cls, params) -> "AffineTransform":
        p = [float(v) for v in params]
        if len(p) != 12:
            raise ValueError(f"need 12 parameters, got {len(p)}")
        return cls(tuple(p[0:3]), tuple(p[3:6]), tuple(p[6:9]), tuple(p[9:12]))

    def to_json(self) -> str:
        """Serialize as a flat 12-number JSON array (t, r, s, h order)."""
        return json.dumps(self.to_params())

    @classmethod
    def from_json(cls, text: str) -> "AffineTransform":
        return cls.from_params(json.loads(text))


@dataclass
class JointHistogram:
    """B x B intensity co-occurrence counts over the included voxels."""

    counts: np.ndarray
    fixed_range: tuple
    moving_range: tuple


@dataclass
class RegistrationConfig:
    bins: int = 32
    levels: tuple = (4, 2, 1)
    max_cycles: int = 50
    tolerance: float = 1e-5  # nats per full parameter cycle
    translation_step: float = 10.0
    rotation_step: float = 0.1
    scale_step: float = 0.1
    shear_step: float = 0.05
    line_search_iters: int = 12


@dataclass
class RegistrationResult:
    transform: AffineTransform
    initial_mi: float
    final_mi: float
    no_improvement: bool
    cycles_per_level: list = field(default_factory=list)


#### resampling ####


def _as_data(vol):
    if isinstance(vol, Volume3D):
        return vol.data
    return np.asarray(vol, dtype=np.float64)


def _voxel_map(moving: Volume3D, transform: AffineTransform, reference: Volume3D) -> np.ndarray:
    m = transform.matrix()
    try:
        inv_moving = np.linalg.inv(moving.affine)
    except np.linalg.LinAlgError as e:
        raise NonInvertibleTransform("moving affine is singular") from e
    return inv_moving @ m @ reference.affine


def _map_coords(vox_map, dims):
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    coords = []
    for r in range(3):
        coords.append(vox_map[r, 0] * x + vox_map[r, 1] * y + vox_map[r, 2] * z + vox_map[r, 3])
    return coords


def _sample_nearest(data, cx, cy, cz):
    nx, ny, nz = data.shape
    xi = np.floor(cx + 0.5).astype(np.int64)
    yi = np.floor(cy + 0.5).astype(np.int64)
    zi = np.floor(cz + 0.5).astype(np.int64)
    valid = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny) & (zi >= 0) & (zi < nz)
    out = np.zeros(np.broadcast(cx, cy, cz).shape)
    out[valid] = data[xi[valid], yi[valid], zi[valid]]
    return out


def _sample_trilinear(data, cx, cy, cz):
    nx, ny, nz = data.shape
    valid = (cx >= 0) & (cx <= nx - 1) & (cy >= 0) & (cy <= ny - 1) & (cz >= 0) & (cz <= nz - 1)
    x0 = np.clip(np.floor(cx), 0, max(nx - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(cy), 0, max(ny - 2, 0)).astype(np.int64)
    z0 = np.clip(np.floor(cz), 0, max(nz - 2, 0)).astype(np.int64)
    tx = np.clip(cx - x0, 0.0, 1.0)
    ty = np.clip(cy - y0, 0.0, 1.0)
    tz = np.clip(cz - z0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]
    c00 = c000 * (1 - tx) + c100 * tx
    c10 = c010 * (1 - tx) + c110 * tx
    c01 = c001 * (1 - tx) + c101 * tx
    c11 = c011 * (1 - tx) + c111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    out[~valid] = 0.0
    return out


def resample(
    moving: Volume3D,
    transform: AffineTransform,
    reference: Volume3D,
    interpolation: str = "trilinear",
) -> Volume3D:
    """Pull moving onto the reference grid; out-of-field voxels become 0.

    Each reference voxel center is mapped through the transform to a moving
    world point and sampled there (nearest or trilinear).
    """
    vox_map = _voxel_map(moving, transform, reference)
    cx, cy, cz = _map_coords(vox_map, reference.dims)
    if interpolation == "nearest":
        out = _sample_nearest(moving.data, cx, cy, cz)
    elif interpolation == "trilinear":
        out = _sample_trilinear(moving.data, cx, cy, cz)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return Volume3D(reference.dims, reference.spacing, reference.affine, out)


#### mutual information ####


def build_joint_histogram(fixed, moving, bins: int = 32) -> JointHistogram:
    """Joint histogram over voxels where at least one image is nonzero.

    Bin edges come from per-image min/max over the included voxels; a
    constant image cannot be binned and raises DegenerateHistogram.
    """
    f = _as_data(fixed).ravel()
    m = _as_data(moving).ravel()
    if f.shape != m.shape:
        raise ValueError("images must share shape")
    include = (f != 0) | (m != 0)
    if not include.any():
        raise DegenerateHistogram("both images are identically zero")
    fi = f[include]
    mi = m[include]
    fmin, fmax = float(fi.min()), float(fi.max())
    mmin, mmax = float(mi.min()), float(mi.max())
    if fmax <= fmin or mmax <= mmin:
        raise DegenerateHistogram("constant image over the included voxels")
    bf = np.minimum(((fi - fmin) * (bins / (fmax - fmin))).astype(np.int64), bins - 1)
    bm = np.minimum(((mi - mmin) * (bins / (mmax - mmin))).astype(np.int64), bins - 1)
    counts = np.bincount(bf * bins + bm, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts.astype(np.float64), (fmin, fmax), (mmin, mmax))


def mi_from_histogram(hist: JointHistogram) -> float:
    """Mutual information in nats; 0*ln(0) terms are dropped."""
    total = hist.counts.sum()
    p = hist.counts / total
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    if int((pf > 0).sum()) < 2 or int((pm > 0).sum()) < 2:
        raise DegenerateHistogram("fewer than 2 occupied bins on a marginal")
    nz = p > 0
    denom = np.outer(pf, pm)
    return float(np.sum(p[nz] * np.log(p[nz] / denom[nz])))


def mutual_information(fixed, moving_resampled, bins: int = 32) -> float:
    return mi_from_histogram(build_joint_histogram(fixed, moving_resampled, bins))


#### registration ####


def _center_of_mass_world(vol: Volume3D) -> np.ndarray:
    w = np.maximum(vol.data, 0.0)
    total = w.sum()
    if total <= 0:
        com = (np.array(vol.dims, dtype=np.float64) - 1) / 2
    else:
        idx = np.indices(vol.dims, dtype=np.float64)
        com = np.array([(idx[i] * w).sum() / total for i in range(3)])
    return vol.affine[:3, :3] @ com + vol.affine[:3, 3]


def downsample(vol: Volume3D, factor: int) -> Volume3D:
    """Block-mean downsampling; geometry follows the coarser grid."""
    if factor == 1:
        return vol
    nx, ny, nz = (d // factor for d in vol.dims)
    if min(nx, ny, nz) < 2:
        raise ValueError(f"factor {factor} collapses dims {vol.dims}")
    data = (
        vol.data[: nx * factor, : ny * factor, : nz * factor]
        .reshape(nx, factor, ny, factor, nz, factor)
        .mean(axis=(1, 3, 5))
    )
    affine = vol.affine.copy()
    affine[:3, :3] = vol.affine[:3, :3] * factor
    offset = np.full(3, (factor - 1) / 2.0)
    affine[:3, 3] = vol.affine[:3, :3] @ offset + vol.affine[:3, 3]
    spacing = tuple(s * factor for s in vol.spacing)
    return Volume3D((nx, ny, nz), spacing, affine, data)


class _LevelObjective:
    """MI of (fixed, moving pulled by params) on one pyramid level."""

    def __init__(self, fixed: Volume3D, moving: Volume3D, bins: int):
        self.fixed = fixed
        self.moving = moving
        self.bins = bins
        self.evaluations = 0

    def __call__(self, params) -> float:
        self.evaluations += 1
        transform = AffineTransform.from_params(params)
        vox_map = _voxel_map(self.moving, transform, self.fixed)
        cx, cy, cz = _map_coords(vox_map, self.fixed.dims)
        warped = _sample_trilinear(self.moving.data, cx, cy, cz)
        try:
            return mutual_information(self.fixed.data, warped, self.bins)
        except DegenerateHistogram:
            return -np.inf


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _line_search(objective, params, index, step, current, iters):
    """Golden-section maximization of one coordinate on [x-step, x+step].

    Returns the best evaluated point; the incumbent wins ties so the
    optimizer only ever moves on strict improvement.
    """
    x0 = params[index]
    a, b = x0 - step, x0 + step

    def at(v):
        trial = list(params)
        trial[index] = v
        return objective(trial)

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = at(c), at(d)
    best_v, best_f = (c, fc) if fc >= fd else (d, fd)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = at(c)
            if fc > best_f:
                best_v, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = at(d)
            if fd > best_f:
                best_v, best_f = d, fd
    if best_f > current:
        out = list(params)
        out[index] = best_v
        return out, best_f
    return list(params), current


def register_affine(
    fixed: Volume3D, moving: Volume3D, config: RegistrationConfig | None = None
) -> RegistrationResult:
    """Estimate the affine pulling moving onto fixed by maximizing MI.

    Initialization aligns intensity centers of mass (translation only).
    Each pyramid level runs cyclic coordinate descent over the 12
    parameters with golden-section line search; a level stops when a full
    cycle improves MI by less than config.tolerance or after
    config.max_cycles cycles. The result never has lower full-resolution MI
    than the initialization; if nothing improved, the initialization is
    returned with no_improvement set.
    """
    if config is None:
        config = RegistrationConfig()
    com_fixed = _center_of_mass_world(fixed)
    com_moving = _center_of_mass_world(moving)
    init = AffineTransform(translation=tuple(com_moving - com_fixed))
    init_params = init.to_params()

    steps = (
        [config.translation_step] * 3
        + [config.rotation_step] * 3
        + [config.scale_step] * 3
        + [config.shear_step] * 3
    )
    full = _LevelObjective(fixed, moving, config.bins)
    initial_mi = full(init_params)

    params = list(init_params)
    cycles_per_level = []
    for factor in config.levels:
        objective = (
            full
            if factor == 1
            else _LevelObjective(downsample(fixed, factor), downsample(moving, factor), config.bins)
        )
        current = objective(params)
        cycles = 0
        for _ in range(config.max_cycles):
            cycles += 1
            before = current
            for k in range(12):
                params, current = _line_search(
                    objective, params, k, steps[k], current, config.line_search_iters
                )
            if not np.isfinite(current) or current - before < config.tolerance:
                break
        cycles_per_level.append(cycles)

    final_mi = full(params)
    if not (final_mi > initial_mi):
        return RegistrationResult(init, initial_mi, initial_mi, True, cycles_per_level)
    return RegistrationResult(
        AffineTransform.from_params(params), initial_mi, final_mi, False, cycles_per_level
    )
