"""
Single-file NIfTI-1 reader and writer (.nii / .nii.gz)

Only axis-aligned int16 and float32 volumes are supported. The header layout
follows the NIfTI-1 standard: a 348-byte header, a 4-byte extension flag,
then the voxel payload stored x-fastest.
"""

import gzip
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np

from .exceptions import NiftiFormatError
from .geometry import GridFrame, Point3

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
EXTENSION_SIZE = 4
VOX_OFFSET = HEADER_SIZE + EXTENSION_SIZE
SINGLE_FILE_MAGIC = b'n+1\x00'
GZIP_MAGIC = b'\x1f\x8b'

# (code, numpy type, bits per voxel)
DATATYPES = {
    'int16': (4, np.int16, 16),
    'float32': (16, np.float32, 32),
}
_CODE_TO_NAME = {code: name for name, (code, _, _) in DATATYPES.items()}

HEADER_FIELDS = [
    ('sizeof_hdr', 'i4'),      # 0; must be 348
    ('data_type', 'S10'),      # 4
    ('db_name', 'S18'),        # 14
    ('extents', 'i4'),         # 32
    ('session_error', 'i2'),   # 36
    ('regular', 'S1'),         # 38
    ('dim_info', 'u1'),        # 39
    ('dim', 'i2', (8,)),       # 40
    ('intent_p1', 'f4'),       # 56
    ('intent_p2', 'f4'),       # 60
    ('intent_p3', 'f4'),       # 64
    ('intent_code', 'i2'),     # 68
    ('datatype', 'i2'),        # 70
    ('bitpix', 'i2'),          # 72
    ('slice_start', 'i2'),     # 74
    ('pixdim', 'f4', (8,)),    # 76
    ('vox_offset', 'f4'),      # 108
    ('scl_slope', 'f4'),       # 112
    ('scl_inter', 'f4'),       # 116
    ('slice_end', 'i2'),       # 120
    ('slice_code', 'u1'),      # 122
    ('xyzt_units', 'u1'),      # 123
    ('cal_max', 'f4'),         # 124
    ('cal_min', 'f4'),         # 128
    ('slice_duration', 'f4'),  # 132
    ('toffset', 'f4'),         # 136
    ('glmax', 'i4'),           # 140
    ('glmin', 'i4'),           # 144
    ('descrip', 'S80'),        # 148
    ('aux_file', 'S24'),       # 228
    ('qform_code', 'i2'),      # 252
    ('sform_code', 'i2'),      # 254
    ('quatern_b', 'f4'),       # 256
    ('quatern_c', 'f4'),       # 260
    ('quatern_d', 'f4'),       # 264
    ('qoffset_x', 'f4'),       # 268
    ('qoffset_y', 'f4'),       # 272
    ('qoffset_z', 'f4'),       # 276
    ('srow_x', 'f4', (4,)),    # 280
    ('srow_y', 'f4', (4,)),    # 296
    ('srow_z', 'f4', (4,)),    # 312
    ('intent_name', 'S16'),    # 328
    ('magic', 'S4'),           # 344
]
HEADER_DTYPE = np.dtype(HEADER_FIELDS)

NIFTI_UNITS_MM = 2
ORIENTATION_TOL = 1e-6


@dataclass
class VolumeHeader:
    """Fields of a NIfTI-1 header this engine interprets"""
    dims: Tuple[int, int, int]
    datatype: str
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    byte_order: str = '<'
    vox_offset: int = VOX_OFFSET


@dataclass
class VolumeGrid:
    """Dense scalar volume on a world grid

    data has shape frame.dims and is indexed [i, j, k] along (x, y, z).
    Values are Hounsfield units before normalization, dimensionless after.
    """
    frame: GridFrame
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != tuple(self.frame.dims):
            raise NiftiFormatError(
                f"Data shape {self.data.shape} does not match frame dims {self.frame.dims}")
        if not np.all(np.isfinite(self.data)):
            raise NiftiFormatError("Volume data contains non-finite values")

    @classmethod
    def from_array(cls, data: np.ndarray, spacing=(1.0, 1.0, 1.0),
                   origin=(0.0, 0.0, 0.0)) -> 'VolumeGrid':
        """Wrap a 3D array with spacing and origin"""
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise NiftiFormatError(f"Volume must be 3D, got shape {data.shape}")
        frame = GridFrame(Point3(*origin), tuple(float(s) for s in spacing),
                          tuple(int(n) for n in data.shape))
        return cls(frame, data)


def _float32_field(value) -> float:
    """Shortest decimal reading of a float32 header field (0.7f reads as 0.7)"""
    return float(str(np.float32(value)))


def _detect_byte_order(raw: bytes) -> str:
    little = int(np.frombuffer(raw[:4], dtype='<i4')[0])
    if little == HEADER_SIZE:
        return '<'
    big = int(np.frombuffer(raw[:4], dtype='>i4')[0])
    if big == HEADER_SIZE:
        return '>'
    raise NiftiFormatError(
        f"Header size field is {little} (little-endian) / {big} (big-endian), expected 348")


def _orientation_origin(hdr: np.void, spacing: Tuple[float, ...]) -> Tuple[float, float, float]:
    """Origin from sform (preferred) or qform; rotations and flips are rejected"""
    if int(hdr['sform_code']) > 0:
        rows = np.stack([hdr['srow_x'], hdr['srow_y'], hdr['srow_z']]).astype(np.float64)
        linear = rows[:, :3]
        expected = np.diag(spacing)
        if not np.allclose(linear, expected, rtol=ORIENTATION_TOL, atol=ORIENTATION_TOL):
            raise NiftiFormatError(
                "Unsupported orientation: sform is not an axis-aligned positive scaling")
        return tuple(_float32_field(v) for v in rows[:, 3])

    if int(hdr['qform_code']) > 0:
        quatern = [float(hdr[k]) for k in ('quatern_b', 'quatern_c', 'quatern_d')]
        qfac = float(hdr['pixdim'][0])
        if any(abs(q) > ORIENTATION_TOL for q in quatern) or qfac < 0:
            raise NiftiFormatError(
                "Unsupported orientation: qform encodes a rotation or axis flip")
        return tuple(_float32_field(hdr[k]) for k in ('qoffset_x', 'qoffset_y', 'qoffset_z'))

    return (0.0, 0.0, 0.0)


def parse_header(raw: bytes) -> VolumeHeader:
    """Parse and validate the 348-byte header

    Args:
        raw: At least the first 348 bytes of the file

    Returns:
        VolumeHeader

    Raises:
        NiftiFormatError: bad size field or magic, unsupported datatype,
            invalid dims or spacing, unsupported orientation
    """
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(
            f"Truncated header: expected {HEADER_SIZE} bytes, got {len(raw)}")

    byte_order = _detect_byte_order(raw)
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(byte_order))[0]

    magic = bytes(hdr['magic'])
    if magic.ljust(4, b'\x00') != SINGLE_FILE_MAGIC:
        raise NiftiFormatError(f"Bad magic {magic!r}: not a single-file NIfTI-1 stream")

    code = int(hdr['datatype'])
    if code not in _CODE_TO_NAME:
        raise NiftiFormatError(f"Unsupported datatype code {code} (only int16 and float32)")
    datatype = _CODE_TO_NAME[code]

    dim = [int(d) for d in hdr['dim']]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"Invalid dim[0] = {ndim}")
    if any(d != 1 for d in dim[4:ndim + 1]):
        raise NiftiFormatError(f"Only 3D volumes are supported, got dim {dim[:ndim + 1]}")
    dims = tuple(dim[i] if i <= ndim else 1 for i in (1, 2, 3))
    if min(dims) < 1:
        raise NiftiFormatError(f"Dims must be >= 1, got {dims}")

    spacing = tuple(_float32_field(hdr['pixdim'][i]) for i in (1, 2, 3))
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise NiftiFormatError(f"Non-positive spacing {spacing}")

    slope = float(hdr['scl_slope'])
    inter = float(hdr['scl_inter'])
    if slope == 0 or not math.isfinite(slope):
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0

    vox_offset = int(float(hdr['vox_offset']))
    if vox_offset < VOX_OFFSET:
        vox_offset = VOX_OFFSET

    return VolumeHeader(
        dims=dims,
        datatype=datatype,
        spacing=spacing,
        origin=_orientation_origin(hdr, spacing),
        scl_slope=slope,
        scl_inter=inter,
        byte_order=byte_order,
        vox_offset=vox_offset
    )


def _maybe_decompress(raw: bytes) -> bytes:
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise NiftiFormatError(f"Corrupt gzip stream: {e}")
    return raw


def read_volume(source: Union[bytes, BinaryIO]) -> VolumeGrid:
    """Decode a raw or gzip-compressed single-file NIfTI-1 stream

    Args:
        source: Bytes or a binary file object

    Returns:
        VolumeGrid with values stored * slope + intercept as float64
    """
    raw = source if isinstance(source, (bytes, bytearray)) else source.read()
    raw = _maybe_decompress(bytes(raw))
    header = parse_header(raw)

    _, np_type, bitpix = DATATYPES[header.datatype]
    n_voxels = header.dims[0] * header.dims[1] * header.dims[2]
    expected = n_voxels * bitpix // 8
    payload = raw[header.vox_offset:header.vox_offset + expected]
    if len(payload) < expected:
        raise NiftiFormatError(
            f"Truncated payload: expected {expected} bytes, got {len(payload)}")

    stored = np.frombuffer(payload, dtype=np.dtype(np_type).newbyteorder(header.byte_order))
    data = stored.reshape(header.dims, order='F').astype(np.float64)
    if header.scl_slope != 1.0 or header.scl_inter != 0.0:
        data = data * header.scl_slope + header.scl_inter

    frame = GridFrame(Point3(*header.origin), header.spacing, header.dims)
    return VolumeGrid(frame, data)


def _build_header(v: VolumeGrid, datatype: str, slope: float, inter: float) -> bytes:
    code, _, bitpix = DATATYPES[datatype]
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder('<'))
    spacing = v.frame.spacing
    origin = v.frame.origin.as_tuple()

    hdr['sizeof_hdr'] = HEADER_SIZE
    hdr['dim'] = [3, *v.frame.dims, 1, 1, 1, 1]
    hdr['datatype'] = code
    hdr['bitpix'] = bitpix
    hdr['pixdim'] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    hdr['vox_offset'] = VOX_OFFSET
    hdr['scl_slope'] = slope
    hdr['scl_inter'] = inter
    hdr['xyzt_units'] = NIFTI_UNITS_MM
    hdr['qform_code'] = 1
    hdr['sform_code'] = 1
    hdr['qoffset_x'], hdr['qoffset_y'], hdr['qoffset_z'] = origin
    hdr['srow_x'] = [spacing[0], 0.0, 0.0, origin[0]]
    hdr['srow_y'] = [0.0, spacing[1], 0.0, origin[1]]
    hdr['srow_z'] = [0.0, 0.0, spacing[2], origin[2]]
    hdr['magic'] = SINGLE_FILE_MAGIC
    return hdr.tobytes()


def write_volume(v: VolumeGrid, datatype: str = 'float32', compress: bool = False,
                 slope: float = 1.0, inter: float = 0.0) -> bytes:
    """Encode a volume as a little-endian single-file NIfTI-1 stream

    Args:
        v: Volume to encode
        datatype: 'float32' or 'int16'
        compress: gzip the stream (mtime fixed so bytes are deterministic)
        slope: Intensity slope stored in the header
        inter: Intensity intercept stored in the header

    Returns:
        Encoded bytes
    """
    if datatype not in DATATYPES:
        raise NiftiFormatError(f"Unsupported datatype '{datatype}' (int16 or float32)")
    if slope == 0 or not math.isfinite(slope) or not math.isfinite(inter):
        raise NiftiFormatError("Slope must be finite and non-zero, intercept finite")
    if not np.all(np.isfinite(v.data)):
        raise NiftiFormatError("Volume data contains non-finite values")

    stored = v.data
    if slope != 1.0 or inter != 0.0:
        stored = (stored - inter) / slope

    if datatype == 'int16':
        info = np.iinfo(np.int16)
        stored = np.clip(np.rint(stored), info.min, info.max).astype('<i2')
    else:
        stored = stored.astype('<f4')

    buffer = io.BytesIO()
    buffer.write(_build_header(v, datatype, slope, inter))
    buffer.write(b'\x00' * EXTENSION_SIZE)
    buffer.write(stored.tobytes(order='F'))
    raw = buffer.getvalue()

    if compress:
        return gzip.compress(raw, mtime=0)
    return raw


def load_volume(path: Union[str, Path]) -> VolumeGrid:
    """Read a .nii or .nii.gz file"""
    with open(path, 'rb') as f:
        try:
            return read_volume(f)
        except NiftiFormatError as e:
            raise NiftiFormatError(f"{path}: {e}") from e


def save_volume(v: VolumeGrid, path: Union[str, Path], datatype: str = 'float32',
                compress: Optional[bool] = None) -> str:
    """Write a volume; gzip is chosen from the .gz suffix unless compress is given"""
    path = Path(path)
    if compress is None:
        compress = path.suffix == '.gz'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_volume(v, datatype, compress=compress))
    logger.debug(f"Wrote {datatype} volume {v.frame.dims} to {path}")
    return str(path)


__all__ = [
    'VolumeHeader',
    'VolumeGrid',
    'parse_header',
    'read_volume',
    'write_volume',
    'load_volume',
    'save_volume',
    'HEADER_SIZE',
    'VOX_OFFSET'
]
