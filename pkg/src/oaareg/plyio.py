"""Point cloud file I/O: PLY (ASCII and binary little-endian) and XYZ text.

Only the ``vertex`` element is read. Coordinates come from ``x, y, z`` and
optional descriptors from ``f_0 .. f_{d-1}``; any other scalar vertex
properties are parsed and dropped.
"""

from __future__ import annotations

import os
from typing import List, Tuple

import numpy as np

from .core import PointCloud, RigidTransform
from .errors import CloudCountError, CloudFormatError, NonFiniteCoordinateError, PlyHeaderError

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_cloud(path) -> PointCloud:
    """Read a ``.ply`` or whitespace ``.xyz`` file (chosen by content, then extension)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(b"ply"):
        return parse_ply(data)
    if path.lower().endswith(".ply"):
        raise PlyHeaderError("missing 'ply' magic", line=1, offset=0)
    return parse_xyz(data.decode("utf-8"))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def _parse_header(data: bytes):
    """Return ``(fmt, elements, body_offset, header_lines)``.

    ``elements`` is a list of ``(name, count, [(prop, dtype), ...])``.
    """
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("header has no 'end_header'", line=1, offset=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError("header is not terminated by a newline", offset=end)
    lines = data[:nl].decode("ascii", errors="replace").replace("\r", "").split("\n")
    if lines[0].strip() != "ply":
        raise PlyHeaderError("missing 'ply' magic", line=1, offset=0)
    fmt = None
    elements: List[Tuple[str, int, list]] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        key = tok[0]
        if key == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(f"unsupported format {' '.join(tok[1:])!r}", line=lineno)
            fmt = tok[1]
        elif key == "element":
            if len(tok) != 3:
                raise PlyHeaderError("malformed element line", line=lineno)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyHeaderError(f"element count {tok[2]!r} is not an integer", line=lineno) from None
            if count < 0:
                raise PlyHeaderError("negative element count", line=lineno)
            elements.append((tok[1], count, []))
        elif key == "property":
            if not elements:
                raise PlyHeaderError("property before any element", line=lineno)
            if len(tok) >= 2 and tok[1] == "list":
                if elements[-1][0] == "vertex" or not _only_trailing(elements):
                    raise PlyHeaderError("list properties are only supported after the vertex element", line=lineno)
                elements[-1][2].append((tok[-1], None))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyHeaderError(f"unsupported property {' '.join(tok[1:])!r}", line=lineno)
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif key == "end_header":
            break
        else:
            raise PlyHeaderError(f"unknown header keyword {key!r}", line=lineno)
    if fmt is None:
        raise PlyHeaderError("header has no format line")
    return fmt, elements, nl + 1, len(lines)


def _only_trailing(elements) -> bool:
    return any(name == "vertex" for name, _, _ in elements[:-1])


def _vertex_layout(elements):
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PlyHeaderError("no vertex element")
    vi = names.index("vertex")
    for name, _, props in elements[:vi]:
        if any(dt is None for _, dt in props):
            raise PlyHeaderError(f"element {name!r} before vertex has list properties")
    _, count, props = elements[vi]
    pnames = [p for p, _ in props]
    for axis in "xyz":
        if axis not in pnames:
            raise PlyHeaderError(f"vertex element lacks property {axis!r}")
    feats = {}
    for p in pnames:
        if p.startswith("f_") and p[2:].isdigit():
            feats[int(p[2:])] = p
    if feats and sorted(feats) != list(range(len(feats))):
        raise PlyHeaderError("descriptor properties must be f_0 .. f_{d-1} without gaps")
    return vi, count, props, [feats[i] for i in range(len(feats))]


def _check_finite(xyz: np.ndarray, where):
    bad = ~np.all(np.isfinite(xyz), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise NonFiniteCoordinateError(f"non-finite coordinate in point {row}", **where(row))


def parse_ply(data: bytes) -> PointCloud:
    fmt, elements, body, header_lines = _parse_header(data)
    vi, count, props, feat_names = _vertex_layout(elements)
    if fmt == "ascii":
        return _parse_ply_ascii(data[body:], elements, vi, props, feat_names, header_lines)
    dtype = np.dtype([(p, "<" + dt) for p, dt in props])
    offset = body
    for _, n, eprops in elements[:vi]:
        offset += n * np.dtype([(p, "<" + dt) for p, dt in eprops]).itemsize
    need = offset + count * dtype.itemsize
    if len(data) < need:
        raise CloudCountError(
            f"vertex data truncated: header declares {count} vertices ({need - body} bytes), file has {len(data) - body}",
            offset=len(data),
        )
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    xyz = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
    _check_finite(xyz, lambda r: {"offset": offset + r * dtype.itemsize})
    desc = np.stack([rec[f].astype(np.float64) for f in feat_names], axis=1) if feat_names else None
    return PointCloud(xyz, desc)


def _parse_ply_ascii(body: bytes, elements, vi, props, feat_names, header_lines) -> PointCloud:
    lines = body.decode("ascii", errors="replace").replace("\r", "").split("\n")
    pos = 0
    # skip elements stored before the vertex block (one row per item)
    skip = sum(n for _, n, _ in elements[:vi])
    rows: List[List[str]] = []
    count = elements[vi][1]
    width = len(props)
    while len(rows) < count:
        if pos >= len(lines):
            raise CloudCountError(
                f"header declares {count} vertices, found {len(rows)}", line=header_lines + pos
            )
        tok = lines[pos].split()
        pos += 1
        if not tok:
            continue
        if skip:
            skip -= 1
            continue
        if len(tok) != width:
            raise CloudCountError(
                f"vertex row has {len(tok)} values, header declares {width}", line=header_lines + pos
            )
        rows.append(tok)
    names = [p for p, _ in props]
    try:
        table = np.array(rows, dtype=np.float64).reshape(count, width)
    except ValueError:
        for r, tok in enumerate(rows):
            for t in tok:
                try:
                    float(t)
                except ValueError:
                    raise CloudFormatError(f"value {t!r} is not a number", line=_ascii_line(lines, r, header_lines)) from None
        raise
    xyz = table[:, [names.index(a) for a in "xyz"]]
    _check_finite(xyz, lambda r: {"line": _ascii_line(lines, r + sum(n for _, n, _ in elements[:vi]), header_lines)})
    desc = table[:, [names.index(f) for f in feat_names]] if feat_names else None
    return PointCloud(xyz, desc)


def _ascii_line(lines, row: int, header_lines: int) -> int:
    """1-based file line holding non-blank body row ``row``."""
    seen = -1
    for i, s in enumerate(lines):
        if s.strip():
            seen += 1
            if seen == row:
                return header_lines + i + 1
    return header_lines + len(lines)


# ---------------------------------------------------------------------------
# XYZ
# ---------------------------------------------------------------------------


def parse_xyz(text: str) -> PointCloud:
    """Whitespace-separated rows ``x y z [f_0 ...]``; blank lines and ``#`` comments are skipped."""
    rows, linenos = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            rows.append(s.split())
            linenos.append(lineno)
    if not rows:
        raise CloudCountError("XYZ file holds no points")
    width = len(rows[0])
    if width < 3:
        raise CloudCountError(f"XYZ row has {width} values, need at least 3", line=linenos[0])
    vals = np.empty((len(rows), width))
    for r, (tok, lineno) in enumerate(zip(rows, linenos)):
        if len(tok) != width:
            raise CloudCountError(f"XYZ row has {len(tok)} values, first row has {width}", line=lineno)
        try:
            vals[r] = [float(t) for t in tok]
        except ValueError:
            raise CloudFormatError("row contains a non-numeric value", line=lineno) from None
    _check_finite(vals[:, :3], lambda r: {"line": linenos[r]})
    return PointCloud(vals[:, :3], vals[:, 3:] if width > 3 else None)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def write_cloud(path, cloud: PointCloud, *, binary: bool = True) -> None:
    """Write ``cloud`` as a float64 PLY (descriptors as ``f_i``). ASCII output
    uses ``repr`` formatting, so both encodings round-trip exactly.
    """
    pts = np.asarray(cloud.points, dtype=np.float64)
    desc = None if cloud.descriptors is None else np.asarray(cloud.descriptors, dtype=np.float64)
    names = ["x", "y", "z"] + ([f"f_{i}" for i in range(desc.shape[1])] if desc is not None else [])
    table = pts if desc is None else np.concatenate([pts, desc], axis=1)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(pts)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(os.fspath(path), "wb") as fh:
        fh.write(head)
        if binary:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        else:
            fh.write("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in table).encode("ascii"))


def load_transform(path) -> RigidTransform:
    """4x4 homogeneous matrix in whitespace text, rows on separate lines."""
    try:
        m = np.loadtxt(os.fspath(path), dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise CloudFormatError(f"cannot parse transform: {exc}") from None
    if m.shape != (4, 4):
        raise CloudFormatError(f"transform must be 4x4, got {m.shape[0]}x{m.shape[1]}")
    return RigidTransform.from_matrix(m)


def write_transform(path, t: RigidTransform) -> None:
    np.savetxt(os.fspath(path), t.as_matrix(), fmt="%.17g")
