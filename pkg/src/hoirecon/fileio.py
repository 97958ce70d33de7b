"""Bit-exact persistence formats.

- clouds: PLY, vertex-only, float32 x/y/z, ascii or binary little-endian
- tensors: "TGR1TENS" magic, u32 rank, u32 dims, row-major float32 LE
- binary masks: PGM (P5, maxval 255), foreground 255
- manifests: `key<TAB>value` text records

Internal computation is float64; values are narrowed to float32 at this
boundary. All writers are deterministic byte-for-byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geom import PointCloud

TENSOR_MAGIC = b"TGR1TENS"


class FormatError(ValueError):
    """Malformed or truncated on-disk data."""


# ---------------------------------------------------------------- clouds

def write_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    path = Path(path)
    pts = cloud.points.astype("<f4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(pts.tobytes())
        else:
            for x, y, z in pts:
                row = f"{float(x)!r} {float(y)!r} {float(z)!r}\n"
                fh.write(row.encode("ascii"))


def read_cloud(path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = None
    count = None
    properties: list[str] = []
    in_vertex = False
    for line in header_lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise FormatError(
                    f"{path}: unsupported element {tokens[1]!r} (vertex-only files)")
            count = int(tokens[2])
            in_vertex = True
        elif tokens[0] == "property":
            if not in_vertex:
                raise FormatError(f"{path}: property outside vertex element")
            if tokens[1] != "float":
                raise FormatError(f"{path}: unsupported property type {tokens[1]!r}")
            properties.append(tokens[2])
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported format {fmt!r}")
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    if properties != ["x", "y", "z"]:
        raise FormatError(f"{path}: expected x/y/z float properties, got {properties}")
    if fmt == "binary_little_endian":
        expected = count * 12
        if len(body) < expected:
            raise FormatError(
                f"{path}: vertex payload truncated ({len(body)} bytes, expected {expected})")
        pts = np.frombuffer(body[:expected], dtype="<f4").reshape(count, 3)
    else:
        rows = [line.split() for line in body.decode("ascii").split("\n") if line.strip()]
        if len(rows) != count:
            raise FormatError(
                f"{path}: vertex count mismatch (header {count}, stored {len(rows)})")
        pts = np.array([[float(v) for v in row] for row in rows],
                       dtype=np.float32).reshape(count, 3)
    return PointCloud(pts.astype(np.float64))


# --------------------------------------------------------------- tensors

def write_tensor(array: np.ndarray, path) -> None:
    array = np.asarray(array)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic")
    rank = struct.unpack_from("<I", data, 8)[0]
    offset = 12
    if len(data) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", data, offset) if rank else ()
    offset += 4 * rank
    expected = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
    payload = data[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def write_tensors(tensors: dict[str, np.ndarray], directory,
                  manifest_name: str = "tensors.tsv") -> None:
    """Multi-tensor archive: one file per tensor plus a name->file manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = {}
    for name in sorted(tensors):
        filename = f"{name}.tens"
        write_tensor(tensors[name], directory / filename)
        records[name] = filename
    write_manifest(records, directory / manifest_name)


def read_tensors(directory, manifest_name: str = "tensors.tsv") -> dict[str, np.ndarray]:
    directory = Path(directory)
    records = read_manifest(directory / manifest_name)
    return {name: read_tensor(directory / filename)
            for name, filename in records.items()}


# ----------------------------------------------------------------- masks

def write_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError("mask must be a 2D raster")
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise FormatError(f"binary mask may contain only {{0, 1}}, got {values}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    fields: list[int] = []
    offset = 2
    while len(fields) < 3:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            offset = data.index(b"\n", offset) + 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        fields.append(int(data[start:offset]))
    offset += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    payload = data[offset:]
    if len(payload) != w * h:
        raise FormatError(
            f"{path}: payload length {len(payload)} bytes, expected {w * h}")
    raster = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    bad = np.setdiff1d(np.unique(raster), [0, 255])
    if bad.size:
        raise FormatError(f"{path}: non-binary pixel values {bad}")
    return (raster == 255).astype(np.uint8)


# ------------------------------------------------------------- manifests

def write_manifest(records: dict[str, str], path) -> None:
    lines = [f"{key}\t{value}\n" for key, value in records.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    records: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, tab, value = line.partition("\t")
        if not tab:
            raise FormatError(f"{path}:{lineno}: expected key<TAB>value, got {line!r}")
        records[key] = value
    return records
