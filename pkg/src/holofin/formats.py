"""Binary and text file formats: CFLD fields, FINW checkpoints, PGM previews, CSV tables."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError
from .optics import ComplexField, HologramStack, IntensityImage

CFLD_MAGIC = b"CFLD"
CFLD_VERSION = 1
_CFLD_HEADER = struct.Struct("<4sIIIdd")

FINW_MAGIC = b"FINW"
FINW_VERSION = 1


def encode_cfld(obj: ComplexField | IntensityImage) -> bytes:
    data = obj.data
    h, w = data.shape
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = data.real
    inter[..., 1] = data.imag if np.iscomplexobj(data) else 0.0
    return _CFLD_HEADER.pack(CFLD_MAGIC, CFLD_VERSION, h, w, obj.pixel_pitch, obj.wavelength) + inter.tobytes()


def decode_cfld(buf: bytes) -> ComplexField:
    if len(buf) < _CFLD_HEADER.size:
        raise FormatError("CFLD file truncated before header end")
    magic, version, h, w, pitch, wavelength = _CFLD_HEADER.unpack_from(buf)
    if magic != CFLD_MAGIC:
        raise FormatError(f"bad CFLD magic {magic!r}")
    if version != CFLD_VERSION:
        raise FormatError(f"unsupported CFLD version {version}")
    expected = _CFLD_HEADER.size + h * w * 8
    if len(buf) != expected:
        raise FormatError(f"CFLD payload size {len(buf)} != expected {expected} for {h}x{w}")
    inter = np.frombuffer(buf, dtype="<f4", offset=_CFLD_HEADER.size).reshape(h, w, 2)
    data = inter[..., 0].astype(np.float64) + 1j * inter[..., 1].astype(np.float64)
    try:
        return ComplexField(data, pitch, wavelength)
    except ValueError as exc:
        raise FormatError(f"invalid CFLD content: {exc}") from exc


def write_cfld(path: str | Path, obj: ComplexField | IntensityImage) -> None:
    Path(path).write_bytes(encode_cfld(obj))


def read_cfld(path: str | Path) -> ComplexField:
    return decode_cfld(Path(path).read_bytes())


def read_intensity(path: str | Path) -> IntensityImage:
    """Read a CFLD file holding an intensity image (all imaginary parts zero)."""
    fld = read_cfld(path)
    if np.any(fld.data.imag != 0):
        raise FormatError(f"{path}: intensity file has nonzero imaginary parts")
    try:
        return IntensityImage(fld.data.real, fld.pixel_pitch, fld.wavelength)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_stack(path: str | Path, stack: HologramStack) -> None:
    """Write a stack as a JSON index plus one CFLD file per hologram, next to the index."""
    path = Path(path)
    stem = path.stem
    entries = []
    for i, (holo, z) in enumerate(zip(stack.holograms, stack.z2)):
        name = f"{stem}_holo_{i}.cfld"
        write_cfld(path.parent / name, holo)
        entries.append(name)
    path.write_text(json.dumps({"z2": list(stack.z2), "holograms": entries}, indent=2) + "\n")


def read_stack(path: str | Path) -> HologramStack:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        z2 = [float(z) for z in doc["z2"]]
        names = list(doc["holograms"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed stack index ({exc})") from exc
    holos = [read_intensity(path.parent / name) for name in names]
    try:
        return HologramStack(tuple(holos), tuple(z2))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_pgm16(path: str | Path, image: np.ndarray) -> None:
    """Min-max normalize a real image to 16 bits and write it as binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 65535).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM")
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)


def encode_finw(config: Mapping, params: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out.write(FINW_MAGIC)
    out.write(struct.pack("<II", FINW_VERSION, len(blob)))
    out.write(blob)
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def decode_finw(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(buf)
    if len(buf) < 12 or bytes(view[:4]) != FINW_MAGIC:
        raise FormatError("bad FINW magic")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FINW_VERSION:
        raise FormatError(f"unsupported FINW version {version}")
    pos = 12
    try:
        config = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt FINW config block: {exc}") from exc
    pos += n
    params: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise FormatError(f"FINW record {name!r} truncated")
            params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"FINW parameter records truncated: {exc}") from exc
    return config, params


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value
