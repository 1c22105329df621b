"""NIfTI-1 single-file reader/writer and metric report emission.

Only ``n+1`` single-file volumes are handled, gzip-compressed or not (gzip is
detected from the leading magic bytes). Files of either byte order are read;
files are always written little-endian with ``scl_slope = 1`` and
``scl_inter = 0``.
"""

from __future__ import annotations

import csv
import gzip
import io as _stdio
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptionError, FormatError, ParameterError, RangeError
from .volume import LabelVolume, VoxelGrid

HEADER_SIZE = 348
DATA_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

DATATYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_NAMES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64}

# refuse to allocate more than this many voxels from an untrusted header
MAX_VOXELS = 1 << 31


@dataclass(frozen=True)
class NiftiHeader:
    dims: tuple[int, ...]
    datatype_code: int
    pixdim: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    vox_offset: int
    byteorder: str
    axes: str | None


def _decompress(raw: bytes) -> bytes:
    if not raw.startswith(GZIP_MAGIC):
        return raw
    try:
        return gzip.decompress(raw)
    except (OSError, EOFError, zlib.error) as exc:
        raise CorruptionError(f"gzip stream is damaged: {exc}") from None


def _orientation_code(affine: np.ndarray) -> str:
    """Nearest-axis orientation letters for the columns of a 3x3 direction matrix."""
    letters = []
    used = set()
    for col in range(3):
        v = affine[:, col]
        world = int(np.argmax(np.abs(v)))
        if world in used or v[world] == 0:
            raise FormatError("orientation matrix is degenerate")
        used.add(world)
        letters.append(("LR", "PA", "IS")[world][int(v[world] > 0)])
    return "".join(letters)


def _quaternion_matrix(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a2) if a2 > 1e-7 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    r[:, 2] *= qfac
    return r


def parse_header(buf: bytes) -> NiftiHeader:
    """Decode and validate a 348-byte NIfTI-1 header."""
    if len(buf) < HEADER_SIZE:
        raise CorruptionError(f"file too short for a NIfTI-1 header ({len(buf)} bytes)")
    if buf[344:348] != b"n+1\x00":
        if buf[344:348] == b"ni1\x00":
            raise FormatError("two-file NIfTI (.hdr/.img) is not supported")
        if struct.unpack("<i", buf[:4])[0] == 540 or struct.unpack(">i", buf[:4])[0] == 540:
            raise FormatError("NIfTI-2 is not supported")
        raise FormatError("not a single-file NIfTI-1 volume (bad magic)")

    # byte order is whichever makes dim[0] a sane dimension count
    for bo in "<>":
        ndim = struct.unpack(bo + "h", buf[40:42])[0]
        if 1 <= ndim <= 7:
            break
    else:
        raise CorruptionError("dim[0] is not a valid dimension count in either byte order")

    dim = struct.unpack(bo + "8h", buf[40:56])
    datatype = struct.unpack(bo + "h", buf[70:72])[0]
    pixdim = struct.unpack(bo + "8f", buf[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(bo + "3f", buf[108:120])
    qform_code, sform_code = struct.unpack(bo + "2h", buf[252:256])
    qb, qc, qd = struct.unpack(bo + "3f", buf[256:268])
    srow = np.array(struct.unpack(bo + "12f", buf[280:328]), dtype=np.float64).reshape(3, 4)

    if ndim not in (3, 4):
        raise FormatError(f"expected a 3D volume, header has {ndim} dimensions")
    if ndim == 4 and dim[4] != 1:
        raise FormatError(f"4D volumes are only accepted with a single frame, got {dim[4]}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise CorruptionError(f"non-positive dimension in {dims}")
    if datatype not in DATATYPES:
        raise FormatError(f"unsupported datatype {datatype}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(math.isfinite(p) and p > 0 for p in spacing):
        raise CorruptionError(f"pixdim[1..3] must be positive and finite, got {spacing}")
    if not math.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset > 1 << 30:
        raise CorruptionError(f"invalid vox_offset {vox_offset}")
    if not (math.isfinite(scl_slope) and math.isfinite(scl_inter)):
        scl_slope, scl_inter = 0.0, 0.0

    axes = None
    try:
        if sform_code > 0 and np.isfinite(srow).all():
            axes = _orientation_code(srow[:, :3])
        elif qform_code > 0 and all(math.isfinite(v) for v in (qb, qc, qd, pixdim[0])):
            qfac = -1.0 if pixdim[0] < 0 else 1.0
            axes = _orientation_code(_quaternion_matrix(qb, qc, qd, qfac))
    except FormatError:
        axes = None

    return NiftiHeader(
        dims=dims,
        datatype_code=datatype,
        pixdim=spacing,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        vox_offset=int(vox_offset),
        byteorder=bo,
        axes=axes,
    )


def _read_raw(path) -> tuple[NiftiHeader, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ParameterError(f"input file {path} does not exist") from None
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    buf = _decompress(raw)
    hdr = parse_header(buf)
    dtype = DATATYPES[hdr.datatype_code].newbyteorder(hdr.byteorder)
    count = hdr.dims[0] * hdr.dims[1] * hdr.dims[2]
    if count > MAX_VOXELS:
        raise CorruptionError(f"header declares {count} voxels, refusing to allocate")
    need = hdr.vox_offset + count * dtype.itemsize
    if len(buf) < need:
        raise CorruptionError(f"truncated data section: need {need} bytes, file has {len(buf)}")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=hdr.vox_offset)
    data = flat.reshape(hdr.dims, order="F")
    return hdr, data


def _resolve_axes(hdr: NiftiHeader, assume_axes: str | None) -> str:
    if assume_axes is not None:
        return assume_axes.upper()
    if hdr.axes is None:
        return "RAS"
    if any(c not in pair for c, pair in zip(hdr.axes, ("LR", "AP", "IS"))):
        raise FormatError(
            f"orientation {hdr.axes} permutes the volume axes; pass --assume-axes to override"
        )
    return hdr.axes


def _scaled(hdr: NiftiHeader, data: np.ndarray) -> np.ndarray:
    if hdr.scl_slope != 0 and (hdr.scl_slope != 1 or hdr.scl_inter != 0):
        return data.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    return data


def read_volume(path, assume_axes: str | None = None) -> VoxelGrid:
    """Read a NIfTI-1 file as a float32 :class:`VoxelGrid`.

    ``scl_slope``/``scl_inter`` are applied whenever the slope is non-zero.
    """
    hdr, data = _read_raw(path)
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.asarray(_scaled(hdr, data)).astype(np.float32)
    bad = int(np.count_nonzero(~np.isfinite(values)))
    if bad:
        raise CorruptionError(f"{bad} voxels are non-finite after scaling in {path}")
    return VoxelGrid(values, hdr.pixdim, _resolve_axes(hdr, assume_axes))


def read_labels(path, assume_axes: str | None = None) -> LabelVolume:
    """Read an integer label volume; every voxel must be a non-negative integer."""
    hdr, data = _read_raw(path)
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.asarray(_scaled(hdr, data), dtype=np.float64)
        rounded = np.rint(values)
        bad = ~np.isfinite(values) | (np.abs(values - rounded) > 1e-6) | (rounded < 0)
    if bad.any():
        first = np.unravel_index(int(np.argmax(bad.ravel(order="F"))), hdr.dims, order="F")
        raise FormatError(
            f"non-integral or negative label {values[first]!r} at voxel {tuple(int(i) for i in first)}"
        )
    if rounded.size and rounded.max() > np.iinfo(np.int32).max:
        raise FormatError("label value exceeds int32 range")
    labels = rounded.astype(np.int32)
    vocab = {int(k): f"label_{int(k)}" for k in np.unique(labels) if k > 1}
    return LabelVolume(labels, hdr.pixdim, vocab, _resolve_axes(hdr, assume_axes))


def _build_header(dims, spacing, axes: str, code: int) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    dtype = DATATYPES[code]
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(DATA_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)
    srow = np.zeros((3, 4))
    for i, letter in enumerate(axes):
        srow[i, i] = spacing[i] if letter in "RAS" else -spacing[i]
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_volume(volume: VoxelGrid | LabelVolume, path, datatype: str | int | None = None) -> None:
    """Write a grid or label volume as NIfTI-1; ``.gz`` suffix selects gzip.

    ``datatype`` defaults to float32 for grids and uint8/int16 for labels.
    """
    is_labels = isinstance(volume, LabelVolume)
    data = volume.labels if is_labels else volume.data
    if datatype is None:
        if not is_labels:
            code = 16
        else:
            code = 2 if data.size == 0 or data.max() <= 255 else 4
    else:
        code = DATATYPE_NAMES.get(datatype, datatype) if isinstance(datatype, str) else int(datatype)
        if code not in DATATYPES:
            raise ParameterError(f"unsupported datatype {datatype}")
    dtype = DATATYPES[code]
    if np.issubdtype(dtype, np.integer):
        if not is_labels and not np.array_equal(data, np.rint(data)):
            raise RangeError(f"non-integral values cannot be stored as {dtype}")
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise RangeError(
                f"values in [{data.min()}, {data.max()}] exceed {dtype} range [{info.min}, {info.max}]"
            )
    payload = np.asarray(data).astype(dtype.newbyteorder("<")).tobytes(order="F")
    blob = _build_header(volume.dims, volume.spacing, volume.axes, code) + b"\x00" * 4 + payload
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the output byte-stable
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise ParameterError(f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------- reports

CASE_COLUMNS = ("case_id", "dice", "fpv_ml", "fnv_ml")
SWEEP_COLUMNS = ("threshold", "delta_dice", "delta_fpv_ml", "delta_fnv_ml")


def fmt6(x: float) -> str:
    """Six significant digits with trailing zeros kept (``0.5 -> 0.500000``)."""
    return f"{float(x):#.6g}"


def round6(x: float) -> float:
    return float(f"{float(x):.6g}")


def render_report(report, format: str = "json") -> str:
    """Text of a list of :class:`~petpipe.metrics.SegMetrics` or a
    :class:`~petpipe.postproc.SweepReport` as JSON or CSV."""
    from .metrics import SegMetrics, aggregate
    from .postproc import SweepReport

    if format not in ("json", "csv"):
        raise ParameterError(f"unknown report format {format!r}")
    if isinstance(report, SweepReport):
        text = _sweep_json(report) if format == "json" else _sweep_csv(report)
    else:
        cases: Sequence[SegMetrics] = sorted(report, key=lambda m: m.case_id)
        if format == "csv":
            buf = _stdio.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(CASE_COLUMNS)
            for m in cases:
                w.writerow([m.case_id, fmt6(m.dice), fmt6(m.fpv_ml), fmt6(m.fnv_ml)])
            text = buf.getvalue()
        else:
            agg = aggregate(cases)
            doc = {
                "cases": [
                    {
                        "id": m.case_id,
                        "dice": round6(m.dice),
                        "fpv_ml": round6(m.fpv_ml),
                        "fnv_ml": round6(m.fnv_ml),
                        "empty_gt": m.empty_gt,
                    }
                    for m in cases
                ],
                "aggregate": {k: round6(v) for k, v in agg.items()},
            }
            text = json.dumps(doc, indent=2) + "\n"
    return text


def write_report(report, path, format: str = "json") -> None:
    """Write :func:`render_report` output; cases are sorted by id, floats keep 6 significant digits."""
    text = render_report(report, format)
    try:
        Path(path).write_text(text, newline="")
    except OSError as exc:
        raise ParameterError(f"cannot write report {path}: {exc}") from None


def _sweep_csv(report) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in report.rows:
        w.writerow([fmt6(row.threshold), fmt6(row.delta_dice), fmt6(row.delta_fpv_ml), fmt6(row.delta_fnv_ml)])
    return buf.getvalue()


def _sweep_json(report) -> str:
    doc = {
        "kind": report.kind,
        "baseline": {k: round6(v) for k, v in report.baseline.items()},
        "case_ids": list(report.case_ids),
        "rows": [
            {
                "threshold": round6(row.threshold),
                "delta_dice": round6(row.delta_dice),
                "delta_fpv_ml": round6(row.delta_fpv_ml),
                "delta_fnv_ml": round6(row.delta_fnv_ml),
                "mean_case_delta_dice": round6(row.mean_case_delta_dice),
                "mean_case_delta_fpv_ml": round6(row.mean_case_delta_fpv_ml),
                "mean_case_delta_fnv_ml": round6(row.mean_case_delta_fnv_ml),
                "per_case": {
                    "delta_dice": [round6(v) for v in row.case_delta_dice],
                    "delta_fpv_ml": [round6(v) for v in row.case_delta_fpv_ml],
                    "delta_fnv_ml": [round6(v) for v in row.case_delta_fnv_ml],
                },
            }
            for row in report.rows
        ],
    }
    return json.dumps(doc, indent=2) + "\n"
