"""Reader/writer for the NPY v1.0 format and NPZ (zip of NPY) containers."""
from __future__ import annotations

import ast
import io
import struct
import warnings
import zipfile

import numpy as np

MAGIC = b"\x93NUMPY"

SUPPORTED_DESCR = {"|u1", "|b1", "<f4", "<f8", "<i4", "<i8"}


class NpyFormatError(ValueError):
    pass


class BadMagicError(NpyFormatError):
    pass


class UnsupportedDtypeError(NpyFormatError):
    pass


class FortranOrderError(NpyFormatError):
    pass


class TruncatedPayloadError(NpyFormatError):
    pass


def _check_descr(descr: str) -> np.dtype:
    if descr in SUPPORTED_DESCR:
        return np.dtype(descr)
    if descr.startswith("<U") and descr[2:].isdigit():
        return np.dtype(descr)
    raise UnsupportedDtypeError(f"unsupported dtype descr {descr!r}")


def parse_npy(data: bytes) -> np.ndarray:
    """Parse NPY v1.0 bytes into a C-ordered array of the declared dtype."""
    if data[:6] != MAGIC:
        raise BadMagicError("not an NPY file (bad magic)")
    if len(data) < 10:
        raise TruncatedPayloadError("NPY header truncated")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise NpyFormatError(f"NPY version {major}.{minor} not supported (only 1.0)")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise TruncatedPayloadError("NPY header truncated")
    try:
        header = ast.literal_eval(data[10 : 10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"malformed NPY header: {exc}") from None
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= header.keys():
        raise NpyFormatError("NPY header lacks descr/fortran_order/shape")
    if header["fortran_order"]:
        raise FortranOrderError("fortran_order=True arrays are not supported")
    dtype = _check_descr(header["descr"])
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    payload = data[10 + hlen :]
    need = count * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload[:need], dtype=dtype, count=count).reshape(shape).copy()


def write_npy(array: np.ndarray) -> bytes:
    """Serialize to NPY v1.0 bytes (C order, header padded to 64 bytes)."""
    array = np.asarray(array, order="C")
    descr = np.lib.format.dtype_to_descr(array.dtype)
    _check_descr(descr)
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple(int(n) for n in array.shape)!r}, }}"
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    return MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1") + array.tobytes()


def parse_npz(data: bytes) -> dict[str, np.ndarray]:
    """Parse every ``.npy`` member of a zip archive; other members are skipped."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise NpyFormatError(f"corrupt NPZ container: {exc}") from None
    out: dict[str, np.ndarray] = {}
    with zf:
        for info in zf.infolist():
            if not info.filename.endswith(".npy"):
                warnings.warn(f"ignoring non-.npy member {info.filename!r}", stacklevel=2)
                continue
            try:
                raw = zf.read(info)
            except (zipfile.BadZipFile, OSError, EOFError) as exc:
                raise NpyFormatError(f"corrupt member {info.filename!r}: {exc}") from None
            out[info.filename[:-4]] = parse_npy(raw)
    return out


def write_npz(arrays: dict[str, np.ndarray], compress: bool = False) -> bytes:
    buf = io.BytesIO()
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(buf, "w", compression=method) as zf:
        for name, arr in arrays.items():
            # fixed timestamp so identical arrays give identical bytes
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = method
            zf.writestr(info, write_npy(arr))
    return buf.getvalue()


def load_npy(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_npy(fh.read())


def save_npy(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(write_npy(array))
