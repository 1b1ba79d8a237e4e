"""Single-file NIfTI-1 I/O plus FSL-style bval/bvec sidecars.

Only the subset of the format the pipeline needs: 3-D scalar volumes and 4-D
diffusion series, little-endian on disk, datatypes uint8/int16/int32/
float32/float64, optional gzip envelope. Header/image pairs (.hdr/.img) and
NIfTI-2 are rejected rather than half-supported.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np


class NiftiError(Exception):
    """Base class for file-format failures in this module."""


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class NonInvertibleAffine(NiftiError):
    pass


class UnsupportedFormat(NiftiError):
    pass


class IoFailure(NiftiError):
    pass


class CountMismatch(NiftiError):
    pass


class NonNumericToken(NiftiError):
    pass


HEADER_SIZE = 348
# Single-file data offset: header + 4-byte extension flag.
DATA_OFFSET = 352

# NIfTI-1 datatype codes we accept.
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}

_GZIP_LEVEL = 1  # deterministic output; speed over ratio for large phantoms


@dataclass
class Volume3D:
    """A 3-D scalar volume with voxel->world geometry.

    data is float64 with shape == dims; affine maps homogeneous voxel
    indices to world millimetres. Treated as immutable after construction.
    """

    dims: tuple
    spacing: tuple
    affine: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.allclose(self.affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be [0,0,0,1]")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise NonInvertibleAffine("affine 3x3 block is singular")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.dims}")


@dataclass
class DiffusionSeries:
    """A DWI acquisition: volumes sharing one grid plus b-values/directions.

    Structural invariants are enforced here (lengths line up, shared
    geometry, unit directions for b>0, at least one b=0 and six b>0
    volumes); whether the directions actually span tensor space is the
    fitter's concern.
    """

    volumes: list
    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        n = len(self.volumes)
        if self.bvecs.shape != (n, 3) or self.bvals.shape != (n,):
            raise CountMismatch(
                f"{n} volumes vs {self.bvals.shape[0]} bvals / {self.bvecs.shape} bvecs"
            )
        if n == 0:
            raise ValueError("empty series")
        first = self.volumes[0]
        for v in self.volumes[1:]:
            if v.dims != first.dims or not np.allclose(v.affine, first.affine):
                raise ValueError("series volumes must share dims and affine")
        if np.any(self.bvals < 0):
            raise ValueError("negative bval")
        nonzero = self.bvals > 0
        norms = np.linalg.norm(self.bvecs[nonzero], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("bvecs for bval>0 must be unit length")
        if int(np.sum(self.bvals == 0)) < 1:
            raise ValueError("series needs at least one b=0 volume")
        if int(np.sum(nonzero)) < 6:
            raise ValueError("series needs at least six b>0 volumes")

    @property
    def dims(self):
        return self.volumes[0].dims

    @property
    def affine(self):
        return self.volumes[0].affine

    @property
    def spacing(self):
        return self.volumes[0].spacing

    def stacked(self) -> np.ndarray:
        """All volumes as one (nx, ny, nz, m) float64 array."""
        return np.stack([v.data for v in self.volumes], axis=-1)

    def mean_b0(self) -> Volume3D:
        """Mean over the bval == 0 volumes, as a volume on the series grid."""
        b0 = np.mean([v.data for v, b in zip(self.volumes, self.bvals) if b == 0], axis=0)
        return Volume3D(self.dims, self.spacing, self.affine, b0)


#### header plumbing ####


def _is_gzip(raw: bytes) -> bool:
    return raw[:2] == b"\x1f\x8b"


def _read_raw(path) -> bytes:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if _is_gzip(raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise TruncatedFile(f"broken gzip stream in {path}: {e}") from e
    return raw


def _unpack(fmt, raw, offset):
    vals = struct.unpack_from("<" + fmt, raw, offset)
    return vals[0] if len(vals) == 1 else vals


def _quaternion_rotation(b, c, d):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def _parse(path):
    """Parse a NIfTI-1 file into (data array up to 4-D, spacing, affine)."""
    raw = _read_raw(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")

    magic = _unpack("4s", raw, 344)
    if magic != b"n+1\x00":
        if magic == b"ni1\x00":
            raise UnsupportedFormat(f"{path}: header/image pairs are not supported")
        if magic[:3] in (b"n+2", b"ni2"):
            raise UnsupportedFormat(f"{path}: NIfTI-2 is not supported")
        raise BadMagic(f"{path}: magic {magic!r} is not 'n+1'")
    sizeof_hdr = _unpack("i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise UnsupportedFormat(f"{path}: sizeof_hdr={sizeof_hdr}, expected 348 little-endian")

    dim = np.array(_unpack("8h", raw, 40))
    ndim = int(dim[0])
    if ndim < 1 or ndim > 7:
        raise UnsupportedFormat(f"{path}: dim[0]={ndim} out of range")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise UnsupportedFormat(f"{path}: nonpositive dimension in {shape}")

    datatype = _unpack("h", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    dtype = _DTYPES[datatype]

    pixdim = np.array(_unpack("8f", raw, 76), dtype=np.float64)
    vox_offset = int(round(_unpack("f", raw, 108)))
    if vox_offset < HEADER_SIZE:
        raise UnsupportedFormat(f"{path}: vox_offset {vox_offset} < 348")
    scl_slope = float(_unpack("f", raw, 112))
    scl_inter = float(_unpack("f", raw, 116))
    qform_code = _unpack("h", raw, 252)
    sform_code = _unpack("h", raw, 254)

    if sform_code > 0:
        srow = np.array(_unpack("12f", raw, 280), dtype=np.float64).reshape(3, 4)
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    elif qform_code > 0:
        b, c, d = _unpack("3f", raw, 256)
        offsets = np.array(_unpack("3f", raw, 268), dtype=np.float64)
        rot = _quaternion_rotation(float(b), float(c), float(d))
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        sp = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
        affine = np.eye(4)
        affine[:3, :3] = rot @ np.diag([sp[0], sp[1], sp[2] * qfac])
        affine[:3, 3] = offsets
    else:
        sp = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
        affine = np.diag([sp[0], sp[1], sp[2], 1.0])

    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise NonInvertibleAffine(f"{path}: voxel-to-world matrix is singular")

    spacing = []
    for i in range(3):
        p = abs(float(pixdim[1 + i]))
        spacing.append(p if p > 0 else float(np.linalg.norm(affine[:3, i])))
    spacing = tuple(spacing)

    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    payload = raw[vox_offset : vox_offset + nbytes]
    if len(payload) < nbytes:
        raise TruncatedFile(
            f"{path}: header promises {nbytes} data bytes, file holds {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0,) and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    return data, spacing, affine


def read_nifti(path) -> Volume3D:
    """Read one 3-D volume (trailing singleton dimensions are squeezed)."""
    data, spacing, affine = _parse(path)
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise UnsupportedFormat(f"{path}: expected a 3-D volume, got shape {data.shape}")
    return Volume3D(data.shape, spacing, affine, data)


def _pack_header(dims, spacing, affine, ndim_extra=0):
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    ndim = 3 + (1 if ndim_extra else 0)
    dim = [ndim, dims[0], dims[1], dims[2], ndim_extra or 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(DATA_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<80s", hdr, 148, b"neurofuse")
    struct.pack_into("<h", hdr, 252, 0)  # qform unset
    struct.pack_into("<h", hdr, 254, 1)  # sform carries the geometry
    struct.pack_into("<12f", hdr, 280, *np.asarray(affine, dtype=np.float64)[:3, :].ravel())
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr)


def _write_blob(path, blob: bytes):
    try:
        if str(path).endswith(".gz"):
            with open(path, "wb") as f:
                # mtime/name pinned so identical inputs give identical bytes
                with gzip.GzipFile(
                    filename="", fileobj=f, mode="wb", compresslevel=_GZIP_LEVEL, mtime=0
                ) as g:
                    g.write(blob)
        else:
            with open(path, "wb") as f:
                f.write(blob)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_nifti(volume: Volume3D, path) -> None:
    """Write a volume as little-endian float32, single-file NIfTI-1.

    Geometry goes to the sform rows; data starts at byte 352. '.gz' suffix
    selects a gzip envelope with pinned mtime (byte-deterministic output).
    """
    hdr = _pack_header(volume.dims, volume.spacing, volume.affine)
    payload = np.asfortranarray(volume.data.astype("<f4")).tobytes(order="F")
    _write_blob(path, hdr + b"\x00\x00\x00\x00" + payload)


#### bval / bvec sidecars ####


def _tokens(path):
    try:
        with open(path, "r") as f:
            lines = [ln.split() for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return lines


def _floats(tokens, path):
    vals = []
    for t in tokens:
        try:
            vals.append(float(t))
        except ValueError:
            raise NonNumericToken(f"{path}: token {t!r} is not a number") from None
    return vals


def read_bval_bvec(bval_path, bvec_path):
    """Parse FSL sidecars: one row of b-values, three rows of components.

    Directions with bval > 0 are renormalized to unit length. Returns
    (bvals (m,), bvecs (m, 3)).
    """
    rows = _tokens(bval_path)
    if len(rows) != 1:
        raise CountMismatch(f"{bval_path}: expected one row of b-values, got {len(rows)}")
    bvals = np.array(_floats(rows[0], bval_path), dtype=np.float64)

    vrows = _tokens(bvec_path)
    if len(vrows) != 3:
        raise CountMismatch(f"{bvec_path}: expected three rows, got {len(vrows)}")
    comps = [_floats(r, bvec_path) for r in vrows]
    if len({len(r) for r in comps}) != 1:
        raise CountMismatch(f"{bvec_path}: rows have unequal lengths")
    bvecs = np.array(comps, dtype=np.float64).T
    if bvecs.shape[0] != bvals.shape[0]:
        raise CountMismatch(
            f"{bvals.shape[0]} b-values vs {bvecs.shape[0]} directions"
        )
    norms = np.linalg.norm(bvecs, axis=1)
    for i in range(len(bvals)):
        if bvals[i] > 0:
            if norms[i] < 1e-12:
                raise ValueError(f"direction {i} has bval>0 but zero vector")
            bvecs[i] /= norms[i]
    return bvals, bvecs


def write_bval_bvec(bvals, bvecs, bval_path, bvec_path) -> None:
    bvals = np.asarray(bvals, dtype=np.float64)
    bvecs = np.asarray(bvecs, dtype=np.float64)
    try:
        with open(bval_path, "w") as f:
            f.write(" ".join(f"{b:.10g}" for b in bvals) + "\n")
        with open(bvec_path, "w") as f:
            for axis in range(3):
                f.write(" ".join(f"{g:.10g}" for g in bvecs[:, axis]) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write sidecars: {e}") from e


def read_dwi_series(dwi_path, bval_path, bvec_path) -> DiffusionSeries:
    """Load a 4-D DWI file plus its sidecars into a DiffusionSeries."""
    data, spacing, affine = _parse(dwi_path)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    if data.ndim != 4:
        raise UnsupportedFormat(f"{dwi_path}: expected a 4-D series, got shape {data.shape}")
    bvals, bvecs = read_bval_bvec(bval_path, bvec_path)
    if data.shape[3] != bvals.shape[0]:
        raise CountMismatch(
            f"{dwi_path}: {data.shape[3]} volumes vs {bvals.shape[0]} b-values"
        )
    dims = data.shape[:3]
    volumes = [Volume3D(dims, spacing, affine, data[..., i]) for i in range(data.shape[3])]
    return DiffusionSeries(volumes, bvals, bvecs)


def write_dwi_series(series: DiffusionSeries, dwi_path, bval_path, bvec_path) -> None:
    """Write a series as one 4-D float32 NIfTI plus text sidecars."""
    dims = series.dims
    hdr = _pack_header(dims, series.spacing, series.affine, ndim_extra=len(series.volumes))
    stacked = series.stacked().astype("<f4")
    payload = stacked.tobytes(order="F")
    _write_blob(dwi_path, hdr + b"\x00\x00\x00\x00" + payload)
    write_bval_bvec(series.bvals, series.bvecs, bval_path, bvec_path)
