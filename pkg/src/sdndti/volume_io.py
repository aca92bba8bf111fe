"""Volumes, masks, gradient tables and their on-disk formats.

Three formats are handled here:

* single-file, uncompressed NIfTI-1 (``.nii``) for images, masks, tensor
  fields and metric maps;
* FSL-style ``bvals``/``bvecs`` text files for gradient schemes;
* the ``SDND`` container for denoiser weights (layout in
  ``docs/model_format.md``).

Image arrays are held as ``(nx, ny, nz, nv)`` float64 arrays, i.e. the
usual nibabel-style indexing. Because NIfTI stores x fastest, the memory
image of the array in Fortran order is exactly the file payload.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    FormatError,
    InvalidInputError,
    InvalidSchemeError,
    ShapeError,
    UnsupportedError,
)

DEFAULT_B0_THRESHOLD = 0.05  # ms/um^2

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(_HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy type
_NIFTI_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_WRITE_CODES = {np.dtype(np.float32): 16, np.dtype(np.float64): 64}


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Per-volume b-values (ms/um^2) and unit encoding directions.

    Non-b0 direction vectors are renormalized on construction; a zero vector
    on a diffusion-weighted volume is rejected.
    """

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = DEFAULT_B0_THRESHOLD

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvecs.ndim != 2 or bvecs.shape[1] != 3:
            raise FormatError(f"bvecs must be (N, 3), got {bvecs.shape}")
        if bvecs.shape[0] != bvals.shape[0]:
            raise FormatError(
                f"{bvals.shape[0]} b-values but {bvecs.shape[0]} vectors"
            )
        if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(bvecs))):
            raise InvalidSchemeError("non-finite gradient table entries")
        if np.any(bvals < 0):
            raise InvalidSchemeError("negative b-value")
        norms = np.linalg.norm(bvecs, axis=1)
        is_b0 = bvals <= self.b0_threshold
        bad = ~is_b0 & (norms == 0)
        if np.any(bad):
            raise InvalidSchemeError(
                f"zero direction on diffusion-weighted volume(s) {np.flatnonzero(bad).tolist()}"
            )
        bvecs = bvecs.copy()
        nz = norms > 0
        bvecs[nz] /= norms[nz, None]
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def n_volumes(self) -> int:
        return int(self.bvals.shape[0])

    @property
    def is_b0(self) -> np.ndarray:
        return self.bvals <= self.b0_threshold

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_b0)

    @property
    def dwi_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_b0)

    def subset(self, indices) -> "GradientScheme":
        idx = np.asarray(indices, dtype=int)
        return GradientScheme(self.bvals[idx], self.bvecs[idx], self.b0_threshold)

    def check_fittable(self):
        if len(self.b0_indices) < 1 or len(self.dwi_indices) < 6:
            raise InvalidSchemeError(
                "tensor fitting needs at least one b0 and six diffusion-weighted volumes"
            )

    @classmethod
    def from_directions(cls, dirs, bval=1.0, n_b0=1, b0_threshold=DEFAULT_B0_THRESHOLD):
        """Build a single-shell scheme: ``n_b0`` b=0 volumes followed by one DWI per direction."""
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        bvals = np.concatenate([np.zeros(n_b0), np.full(len(dirs), float(bval))])
        bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
        return cls(bvals, bvecs, b0_threshold)


@dataclass(frozen=True, eq=False)
class Volume4D:
    """An ``(nx, ny, nz, nv)`` float64 image stack."""

    data: np.ndarray
    scheme: GradientScheme | None = None
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"Volume4D data must be 3D or 4D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("volume contains NaN or Inf")
        if self.scheme is not None and self.scheme.n_volumes != data.shape[3]:
            raise ShapeError(
                f"scheme has {self.scheme.n_volumes} volumes, data has {data.shape[3]}"
            )
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise InvalidInputError(f"bad voxel size {self.voxel_size_mm}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def spatial_shape(self):
        return self.dims[:3]

    def with_data(self, data, scheme="keep") -> "Volume4D":
        return Volume4D(data, self.scheme if scheme == "keep" else scheme, self.voxel_size_mm)


@dataclass(frozen=True, eq=False)
class BrainMask:
    """Binary ``(nx, ny, nz)`` mask with at least one voxel set."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {data.shape}")
        data = data != 0
        if not data.any():
            raise InvalidInputError("mask has no voxels set")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def check_matches(self, shape):
        if tuple(shape[:3]) != self.dims:
            raise ShapeError(f"mask dims {self.dims} do not match volume dims {tuple(shape[:3])}")


def as_mask_array(mask, shape=None) -> np.ndarray:
    """Return a boolean array from a BrainMask, array, or None (all voxels)."""
    if mask is None:
        if shape is None:
            raise InvalidInputError("mask or shape required")
        return np.ones(tuple(shape[:3]), dtype=bool)
    arr = mask.data if isinstance(mask, BrainMask) else np.asarray(mask) != 0
    if shape is not None and arr.shape != tuple(shape[:3]):
        raise ShapeError(f"mask dims {arr.shape} do not match volume dims {tuple(shape[:3])}")
    return arr


# ---------------------------------------------------------------- NIfTI-1


def _parse_header(raw: bytes):
    if len(raw) < 348:
        raise FormatError("file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if int(hdr["sizeof_hdr"]) == 348:
            break
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    if bytes(hdr["magic"]) != b"n+1":
        raise FormatError(f"bad magic {bytes(hdr['magic'])!r}; only single-file .nii is supported")
    return hdr, order


def read_nifti(path) -> Volume4D:
    """Read an uncompressed single-file NIfTI-1 image as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr, order = _parse_header(raw)
    dim = [int(v) for v in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"dim[0]={ndim} out of range")
    shape = [max(v, 1) for v in dim[1 : ndim + 1]]
    if any(v < 1 for v in dim[1 : ndim + 1]):
        raise FormatError(f"non-positive dimension in {dim}")
    if ndim > 4 and any(v > 1 for v in shape[4:]):
        raise UnsupportedError("dimensions beyond the 4th are not supported")
    shape = (shape + [1, 1, 1, 1])[:4]
    code = int(hdr["datatype"])
    if code not in _NIFTI_CODES:
        raise UnsupportedError(f"unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_NIFTI_CODES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if offset < 348 or len(raw) - offset != nbytes:
        raise FormatError(
            f"payload size {len(raw) - offset} bytes does not match dims {shape} of {dtype.name}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: image contains NaN or Inf")
    pix = [float(v) for v in hdr["pixdim"][1:4]]
    pix = tuple(p if p > 0 else 1.0 for p in pix)
    return Volume4D(data, None, pix)


def make_header(shape, dtype, voxel_size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """A minimal little-endian NIfTI-1 header for ``shape`` (3D or 4D)."""
    dtype = np.dtype(dtype)
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dims = np.ones(8, dtype=np.int16)
    dims[0] = len(shape)
    dims[1 : len(shape) + 1] = shape
    hdr["dim"] = dims
    hdr["datatype"] = _WRITE_CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pix = np.ones(8, dtype=np.float32)
    pix[1:4] = voxel_size
    hdr["pixdim"] = pix
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = [voxel_size[0], 0, 0, 0]
    hdr["srow_y"] = [0, voxel_size[1], 0, 0]
    hdr["srow_z"] = [0, 0, voxel_size[2], 0]
    hdr["magic"] = b"n+1"
    return hdr


def write_nifti(vol, path, dtype="float64"):
    """Write a Volume4D (or bare array) as a single-file NIfTI-1.

    ``dtype`` is ``float32`` or ``float64``. float32 output rounds each value
    to the nearest float32, so a re-read gives ``float64(float32(x))``.
    Volumes with one frame are written as 3D images.
    """
    dtype = np.dtype(dtype)
    if dtype not in _WRITE_CODES:
        raise UnsupportedError(f"write dtype must be float32 or float64, got {dtype}")
    if not isinstance(vol, Volume4D):
        vol = Volume4D(vol)
    data = vol.data
    shape = data.shape if data.shape[3] > 1 else data.shape[:3]
    if max(shape) > 32767:
        raise UnsupportedError("NIfTI-1 dimensions are limited to int16")
    hdr = make_header(shape, dtype, vol.voxel_size_mm)
    payload = np.asarray(data, dtype=dtype.newbyteorder("<")).reshape(-1, order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(b"\x00\x00\x00\x00")
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def read_mask(path) -> BrainMask:
    return BrainMask(read_nifti(path).data[..., 0])


def write_mask(mask, path):
    write_nifti(Volume4D(as_mask_array(mask).astype(np.float64)), path, dtype="float32")


# ---------------------------------------------------------------- bvals / bvecs


def _read_rows(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                try:
                    rows.append([float(t) for t in line.split()])
                except ValueError as exc:
                    raise FormatError(f"{path}: {exc}") from exc
    return rows


def read_gradients(bvals_path, bvecs_path, b0_threshold=DEFAULT_B0_THRESHOLD, scale=1.0):
    """Read FSL-convention ``bvals``/``bvecs`` files.

    ``scale`` multiplies the b-values (use 1e-3 for files in s/mm^2).
    """
    bval_rows = _read_rows(bvals_path)
    if len(bval_rows) != 1:
        raise FormatError(f"{bvals_path}: expected one row of b-values, found {len(bval_rows)}")
    bvals = np.asarray(bval_rows[0]) * scale
    vec_rows = _read_rows(bvecs_path)
    if len(vec_rows) != 3:
        raise FormatError(f"{bvecs_path}: expected three rows, found {len(vec_rows)}")
    lengths = {len(r) for r in vec_rows}
    if len(lengths) != 1:
        raise FormatError(f"{bvecs_path}: rows have different lengths {sorted(lengths)}")
    if lengths.pop() != len(bvals):
        raise FormatError(
            f"{len(bvals)} b-values but {len(vec_rows[0])} vectors in {bvecs_path}"
        )
    return GradientScheme(bvals, np.asarray(vec_rows).T, b0_threshold)


def write_gradients(scheme: GradientScheme, bvals_path, bvecs_path):
    with open(bvals_path, "w") as fh:
        fh.write(" ".join(f"{b:.17g}" for b in scheme.bvals) + "\n")
    with open(bvecs_path, "w") as fh:
        for row in scheme.bvecs.T:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------- model container

MODEL_MAGIC = b"SDND"
MODEL_VERSION = 1


def save_model(model, path):
    """Serialize a :class:`~sdndti.denoiser.MUNet` to the SDND container."""
    arch = model.architecture
    chunks = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<4I", arch["c"], arch["k"], arch["d"], arch["topology"]),
    ]
    tensors = model.state_items()
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        enc = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(enc)) + enc)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("model file is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, into=None):
    """Read an SDND container.

    With ``into`` given, weights are copied into that existing model, which
    must have the same architecture (else :class:`ShapeError`).
    """
    from .denoiser import MUNet

    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: not an SDND model file")
    (version,) = rd.unpack("<I")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported SDND version {version}")
    c, k, d, topology = rd.unpack("<4I")
    (n,) = rd.unpack("<I")
    state = {}
    for _ in range(n):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        state[name] = arr.astype(np.float32)
    if rd.pos != len(rd.raw):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    if into is None:
        into = MUNet(c, k, d, seed=0, topology=topology)
    else:
        arch = into.architecture
        if (arch["c"], arch["k"], arch["d"], arch["topology"]) != (c, k, d, topology):
            raise ShapeError(
                f"file architecture (c={c}, k={k}, d={d}, topology={topology}) does not match "
                f"target (c={arch['c']}, k={arch['k']}, d={arch['d']}, topology={arch['topology']})"
            )
    into.load_state(state)
    return into
