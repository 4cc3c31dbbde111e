"""PLY point clouds and ``.lemb`` embedding sidecar files."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import EmbeddedCloud
from .errors import EmbeddingFormatError, PlyFormatError, ValidationError

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
KNOWN_PROPS = ("x", "y", "z", "red", "green", "blue", "relevancy", "label")

LEMB_MAGIC = b"LEMB"
LEMB_VERSION = 1
LEMB_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    rows: np.ndarray

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Prompt embedding plus the canonical-phrase embeddings it is contrasted against."""

    query: np.ndarray
    canonicals: np.ndarray
    prompt_text: str = ""

    def __post_init__(self):
        q = np.asarray(self.query, dtype=float).reshape(-1)
        c = np.asarray(self.canonicals, dtype=float)
        if c.size == 0:
            c = c.reshape(0, q.size)
        c = c.reshape(-1, q.size) if c.ndim == 1 else c
        if c.shape[1] != q.size:
            raise ValidationError(
                f"query dim {q.size} does not match canonical dim {c.shape[1]}")
        for name, rows in (("query", q[None]), ("canonical", c)):
            norms = np.linalg.norm(rows, axis=1)
            if np.any(np.abs(norms - 1) > 1e-6):
                raise ValidationError(f"{name} embeddings must be unit norm")
        object.__setattr__(self, "query", q)
        object.__setattr__(self, "canonicals", c)

    @property
    def dim(self) -> int:
        return self.query.size


# ---------------------------------------------------------------------------
# PLY

def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyFormatError("missing 'ply' magic or 'end_header'", offset=0, line=1)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyFormatError("header not terminated by newline", offset=end)
    body_start = nl + 1
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyFormatError("header is not ASCII", offset=exc.start) from None

    fmt = None
    elements = []  # [name, count, [(prop, dtype)], first_line]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if lineno == 1:
            if tok != ["ply"]:
                raise PlyFormatError("first line must be 'ply'", line=1)
            continue
        key = tok[0]
        if key == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian") or tok[2] != "1.0":
                raise PlyFormatError(f"unsupported format line {raw!r}", line=lineno)
            fmt = tok[1]
        elif key == "element":
            if len(tok) != 3:
                raise PlyFormatError(f"bad element line {raw!r}", line=lineno)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyFormatError(f"bad element count {tok[2]!r}", line=lineno) from None
            if count < 0:
                raise PlyFormatError("negative element count", line=lineno)
            elements.append([tok[1], count, [], lineno])
        elif key == "property":
            if not elements:
                raise PlyFormatError("property before any element", line=lineno)
            if len(tok) >= 2 and tok[1] == "list":
                elements[-1][2].append((tok[-1] if len(tok) == 5 else "?", "list"))
                continue
            if len(tok) != 3 or tok[1] not in PLY_TYPES:
                raise PlyFormatError(f"bad property line {raw!r}", line=lineno)
            names = [p for p, _ in elements[-1][2]]
            if tok[2] in names:
                raise PlyFormatError(f"duplicate property {tok[2]!r}", line=lineno)
            elements[-1][2].append((tok[2], PLY_TYPES[tok[1]]))
        else:
            raise PlyFormatError(f"unexpected header keyword {key!r}", line=lineno)
    if fmt is None:
        raise PlyFormatError("header has no format line")
    header_lines = text.count("\n") + 1
    return fmt, elements, body_start, header_lines


def _check_vertex_props(props):
    names = [p for p, _ in props]
    types = dict(props)
    for p, t in props:
        if t == "list":
            raise PlyFormatError(f"list property {p!r} on vertex element is not supported")
    for axis in "xyz":
        if axis not in types:
            raise PlyFormatError(f"vertex element lacks property {axis!r}")
    if len({types["x"], types["y"], types["z"]}) != 1 or types["x"] not in ("f4", "f8"):
        raise PlyFormatError("mixed or non-float property types for x, y, z")
    rgb = [c for c in ("red", "green", "blue") if c in types]
    if rgb and len(rgb) != 3:
        raise PlyFormatError("incomplete color: red, green and blue must all be present")
    if rgb and any(types[c] != "u1" for c in rgb):
        raise PlyFormatError("mixed property types: red, green, blue must be uchar")
    if "relevancy" in types and types["relevancy"] not in ("f4", "f8"):
        raise PlyFormatError("relevancy must be a float property")
    if "label" in types and types["label"][0] not in "iu":
        raise PlyFormatError("label must be an integer property")
    unknown = [n for n in names if n not in KNOWN_PROPS]
    if unknown:
        warnings.warn(f"ignoring unknown vertex properties: {', '.join(unknown)}", stacklevel=3)


def parse_ply(data: bytes) -> EmbeddedCloud:
    """Parse PLY bytes; every failure surfaces as :class:`PlyFormatError`."""
    fmt, elements, body_start, header_lines = _parse_header(data)
    vertex = None
    for pos, (name, count, props, lineno) in enumerate(elements):
        if name == "vertex":
            vertex = (count, props)
            break
        if count:
            raise PlyFormatError(
                f"element {name!r} precedes vertex; only trailing extra elements are supported",
                line=lineno)
    if vertex is None:
        raise PlyFormatError("no vertex element in header")
    trailing = [e[0] for e in elements[pos + 1:]]
    if trailing:
        warnings.warn(f"ignoring trailing PLY elements: {', '.join(trailing)}", stacklevel=2)

    count, props = vertex
    _check_vertex_props(props)
    names = [p for p, _ in props]

    if fmt == "binary_little_endian":
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        body = memoryview(data)[body_start:]
        need = count * dtype.itemsize
        if len(body) < need:
            done = len(body) // dtype.itemsize
            raise PlyFormatError(
                f"truncated body: vertex {done + 1} of {count} is incomplete",
                offset=body_start + done * dtype.itemsize)
        rec = np.frombuffer(body, dtype=dtype, count=count)
        cols = {p: rec[p] for p in names}
    else:
        cols = _parse_ascii_body(data, body_start, header_lines, count, props)

    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    if not np.all(np.isfinite(points)):
        raise PlyFormatError("non-finite vertex coordinate")
    colors = None
    if "red" in cols:
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(float) / 255.0
    relevancy = cols["relevancy"].astype(float) if "relevancy" in cols else None
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    return EmbeddedCloud(points, colors=colors, labels=labels, relevancy=relevancy)


def _parse_ascii_body(data, body_start, header_lines, count, props):
    try:
        text = bytes(data[body_start:]).decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyFormatError("non-ASCII byte in ASCII body", offset=body_start + exc.start) from None
    lines = text.splitlines()
    rows = []
    lineno = header_lines
    it = iter(lines)
    for v in range(count):
        for raw in it:
            lineno += 1
            if raw.strip():
                break
        else:
            raise PlyFormatError(
                f"truncated body: vertex {v + 1} of {count} is missing", line=lineno + 1)
        tok = raw.split()
        if len(tok) != len(props):
            raise PlyFormatError(
                f"vertex {v + 1} has {len(tok)} values, expected {len(props)}", line=lineno)
        rows.append(tok)
    cols = {}
    for j, (p, t) in enumerate(props):
        raw_col = [r[j] for r in rows]
        try:
            if t[0] == "f":
                cols[p] = np.array(raw_col, dtype=np.float64).astype(t)
            else:
                vals = np.array([int(s) for s in raw_col], dtype=np.int64)
                info = np.iinfo(t)
                if vals.size and (vals.min() < info.min or vals.max() > info.max):
                    raise ValueError("integer out of range")
                cols[p] = vals.astype(t)
        except (ValueError, OverflowError) as exc:
            raise PlyFormatError(f"bad value for property {p!r}: {exc}") from None
    return cols


def load_cloud(path) -> EmbeddedCloud:
    data = Path(path).read_bytes()
    return parse_ply(data)


def _header(cloud: EmbeddedCloud, fmt: str) -> bytes:
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.relevancy is not None:
        lines.append("property float relevancy")
    if cloud.labels is not None:
        lines.append("property int label")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def ply_bytes(cloud: EmbeddedCloud, format: str = "binary") -> bytes:
    if format not in ("ascii", "binary"):
        raise ValidationError(f"unknown PLY format {format!r}")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.relevancy is not None:
        fields.append(("relevancy", "<f4"))
    if cloud.labels is not None:
        fields.append(("label", "<i4"))
    rec = np.zeros(len(cloud), dtype=fields)
    for i, a in enumerate("xyz"):
        rec[a] = cloud.points[:, i]
    if cloud.colors is not None:
        rgb = np.rint(cloud.colors * 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    if cloud.relevancy is not None:
        rec["relevancy"] = cloud.relevancy
    if cloud.labels is not None:
        rec["label"] = cloud.labels

    if format == "binary":
        return _header(cloud, "binary_little_endian") + rec.tobytes()
    out = [_header(cloud, "ascii")]
    for row in rec:
        vals = [f"{float(v):.9g}" if rec.dtype[j].kind == "f" else str(int(v))
                for j, v in enumerate(row)]
        out.append((" ".join(vals) + "\n").encode("ascii"))
    return b"".join(out)


def save_cloud(cloud: EmbeddedCloud, path, format: str = "binary") -> None:
    """Write ``cloud`` as PLY. Embeddings are not stored; see :func:`save_embedding_matrix`."""
    Path(path).write_bytes(ply_bytes(cloud, format))


# ---------------------------------------------------------------------------
# .lemb sidecar

def parse_embedding_matrix(data: bytes) -> EmbeddingMatrix:
    if len(data) < LEMB_HEADER.size:
        raise EmbeddingFormatError(f"file is {len(data)} bytes, shorter than the 16-byte header")
    magic, version, n, d = LEMB_HEADER.unpack_from(data)
    if magic != LEMB_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {LEMB_MAGIC!r}")
    if version != LEMB_VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}")
    expected = LEMB_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise EmbeddingFormatError(
            f"size mismatch: header declares {n}x{d} ({expected} bytes), file has {len(data)}")
    if n < 1:
        raise EmbeddingFormatError("matrix has no rows")
    if d < 2:
        raise EmbeddingFormatError(f"embedding dimension {d} < 2")
    rows = np.frombuffer(data, dtype="<f4", offset=LEMB_HEADER.size).reshape(n, d).astype(float)
    finite = np.all(np.isfinite(rows), axis=1)
    if not finite.all():
        raise EmbeddingFormatError("non-finite value", row=int(np.flatnonzero(~finite)[0]))
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0
    if zero.any():
        raise EmbeddingFormatError("zero-norm row", row=int(np.flatnonzero(zero)[0]))
    return EmbeddingMatrix(rows / norms[:, None])


def load_embedding_matrix(path) -> EmbeddingMatrix:
    return parse_embedding_matrix(Path(path).read_bytes())


def embedding_bytes(rows) -> bytes:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n, d = rows.shape
    return LEMB_HEADER.pack(LEMB_MAGIC, LEMB_VERSION, n, d) + rows.astype("<f4").tobytes()


def save_embedding_matrix(rows, path) -> None:
    Path(path).write_bytes(embedding_bytes(rows))


def load_query_set(query_path, canonicals_path, prompt_text: str = "") -> QuerySet:
    q = load_embedding_matrix(query_path)
    if len(q) != 1:
        raise EmbeddingFormatError(f"query file must hold exactly one row, found {len(q)}")
    c = load_embedding_matrix(canonicals_path)
    return QuerySet(q.rows[0], c.rows, prompt_text)


def bind_embeddings(cloud: EmbeddedCloud, m: EmbeddingMatrix) -> EmbeddedCloud:
    rows = m.rows if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype=float)
    if len(rows) != len(cloud):
        raise ValidationError(
            f"embedding count mismatch: cloud has {len(cloud)} points, matrix has {len(rows)} rows")
    if cloud.embeddings is not None:
        warnings.warn("cloud already carries embeddings; replacing them", stacklevel=2)
    return cloud.replace(embeddings=rows)


def load_embedded_cloud(cloud_path, embeddings_path: Optional[str] = None) -> EmbeddedCloud:
    cloud = load_cloud(cloud_path)
    if embeddings_path is not None:
        cloud = bind_embeddings(cloud, load_embedding_matrix(embeddings_path))
    return cloud
