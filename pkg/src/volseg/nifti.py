"""Minimal NIfTI-1 reader/writer for single-file .nii / .nii.gz volumes.

Only what the pipeline needs: scalar integer/float datatypes, dims and
pixdim from the header, optional gzip. Orientation fields (qform/sform)
are written for interoperability but never applied on read. Masks are
written as uint8, volumes as float32; a write/read round trip is
bit-exact.
"""

import gzip
import os

import numpy as np

from .volume import LabelMask, Volume3D


class NiftiFormatError(ValueError):
    """Malformed or non-NIfTI-1 file content."""


class NiftiUnsupportedError(ValueError):
    """Valid NIfTI-1 header with a datatype this toolkit does not handle."""


_HEADER = np.dtype([
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
])
assert _HEADER.itemsize == 348

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_UINT8_CODE = 2
_FLOAT32_CODE = 16


class _GzipContentOnly(gzip.GzipFile):
    """GzipFile whose output depends only on content (no filename, mtime 0)."""

    def __init__(self, path, mode):
        self._raw = open(path, mode)
        super().__init__(filename="", fileobj=self._raw, mode=mode, mtime=0)

    def close(self):
        try:
            super().close()
        finally:
            self._raw.close()


def _open(path, mode):
    if str(path).endswith(".gz"):
        return _GzipContentOnly(path, mode)
    return open(path, mode)


def read_nifti(path, as_mask: bool = False):
    """Read a NIfTI-1 file as a :class:`Volume3D` (or :class:`LabelMask`).

    Args:
        path: .nii or .nii.gz file.
        as_mask: load an integer-typed file with values in {0, 1, 2} as a
            LabelMask instead of a float volume.
    """
    with _open(path, "rb") as f:
        raw = f.read(_HEADER.itemsize)
        if len(raw) < _HEADER.itemsize:
            raise IOError(f"{path}: file shorter than a NIfTI-1 header")
        byteorder = "="
        hdr = np.frombuffer(raw, dtype=_HEADER)[0]
        if hdr["sizeof_hdr"] != 348:
            byteorder = "S"
            hdr = np.frombuffer(raw, dtype=_HEADER.newbyteorder())[0]
            if hdr["sizeof_hdr"] != 348:
                raise NiftiFormatError(f"{path}: header size field is not 348")
        magic = bytes(hdr["magic"]).rstrip(b"\x00")
        if magic != b"n+1":
            raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected single-file NIfTI-1")

        code = int(hdr["datatype"])
        if code not in _DTYPES:
            raise NiftiUnsupportedError(f"{path}: unsupported datatype code {code}")
        dtype = np.dtype(_DTYPES[code]).newbyteorder(byteorder)

        ndim = int(hdr["dim"][0])
        if ndim == 3:
            channels = 1
        elif ndim == 4:
            channels = max(int(hdr["dim"][4]), 1)
        else:
            raise NiftiFormatError(f"{path}: only 3-D or 4-D images are supported, got dim[0]={ndim}")
        dims = tuple(int(d) for d in hdr["dim"][1:4])
        if min(dims) < 1:
            raise NiftiFormatError(f"{path}: non-positive dims {dims}")
        spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
        if min(spacing) <= 0:
            raise NiftiFormatError(f"{path}: non-positive pixdim {spacing}")

        offset = max(int(hdr["vox_offset"]), _HEADER.itemsize)
        f.seek(offset)
        n_vox = channels * dims[0] * dims[1] * dims[2]
        payload = f.read(n_vox * dtype.itemsize)
        if len(payload) < n_vox * dtype.itemsize:
            raise IOError(
                f"{path}: truncated payload, expected {n_vox * dtype.itemsize} bytes, got {len(payload)}"
            )

    # disk order is x-fastest; bring to (C, X, Y, Z)
    arr = np.frombuffer(payload, dtype=dtype).reshape((channels,) + dims[::-1])
    arr = np.ascontiguousarray(arr.transpose(0, 3, 2, 1))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * slope + inter

    if as_mask:
        if channels != 1:
            raise ValueError(f"{path}: cannot load a {channels}-channel image as a mask")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"{path}: mask request on a non-integer datatype")
        values = np.unique(arr)
        if not np.isin(values, (0, 1, 2)).all():
            raise ValueError(f"{path}: mask values {values.tolist()} outside {{0, 1, 2}}")
        return LabelMask(arr[0].astype(np.uint8), spacing)

    data = np.ascontiguousarray(arr, dtype=np.float32)
    kind = "binary" if np.isin(data, (0.0, 1.0)).all() else "continuous"
    return Volume3D(data, spacing, kind)


def write_nifti(obj, path) -> None:
    """Write a Volume3D (float32) or LabelMask (uint8) as NIfTI-1."""
    if isinstance(obj, LabelMask):
        data = obj.labels[None].astype(np.uint8)
        code = _UINT8_CODE
        spacing = obj.spacing
    elif isinstance(obj, Volume3D):
        data = obj.data.astype(np.float32)
        code = _FLOAT32_CODE
        spacing = obj.spacing
    else:
        raise TypeError(f"expected Volume3D or LabelMask, got {type(obj).__name__}")

    channels = data.shape[0]
    dims = data.shape[1:]
    hdr = np.zeros((), dtype=_HEADER)
    hdr["sizeof_hdr"] = 348
    hdr["dim"][0] = 3 if channels == 1 else 4
    hdr["dim"][1:4] = dims
    hdr["dim"][4] = channels if channels > 1 else 1
    hdr["dim"][5:] = 1
    hdr["datatype"] = code
    hdr["bitpix"] = np.dtype(_DTYPES[code]).itemsize * 8
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = spacing
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"volseg"
    hdr["sform_code"] = 1
    hdr["srow_x"] = (spacing[0], 0, 0, 0)
    hdr["srow_y"] = (0, spacing[1], 0, 0)
    hdr["srow_z"] = (0, 0, spacing[2], 0)
    hdr["magic"] = b"n+1"

    payload = data.transpose(0, 3, 2, 1).tobytes()
    with _open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * 4)  # pad header to vox_offset 352
        f.write(payload)


def atomic_write_nifti(obj, path) -> None:
    """write_nifti via a temp file + rename, so failures leave no partial output."""
    head, tail = os.path.split(str(path))
    tmp = os.path.join(head, f".tmp-{tail}")  # prefix keeps the .gz suffix meaningful
    try:
        write_nifti(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
