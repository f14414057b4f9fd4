"""OBJ and PLY mesh readers/writers.

Supported formats, nothing more:
  - OBJ: ASCII, positions and faces only (no color, materials ignored)
  - PLY: ASCII and binary little-endian, per-vertex uchar or float color
Binary little-endian PLY with double precision vertices is the canonical
interchange format; it round-trips coordinates bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import MeshError, TriMesh


class MeshParseError(MeshError):
    """Malformed mesh file; message carries file position context."""


_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        return fmt.lower()
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("obj", "ply"):
        return suffix
    raise MeshParseError(f"{path}: cannot infer format from suffix {path.suffix!r}")


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Load an OBJ or PLY file into a TriMesh (PLY color becomes albedo in [0,1])."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "ply":
        return _load_ply(path)
    raise MeshParseError(f"{path}: unsupported format {fmt!r}")


def save_mesh(mesh: TriMesh, path, fmt: str | None = None, binary: bool = True) -> dict:
    """Write a mesh; returns metadata, e.g. {"albedo_dropped": True} for OBJ."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "obj":
        _save_obj(mesh, path)
        return {"albedo_dropped": mesh.albedo is not None}
    if fmt == "ply":
        _save_ply(mesh, path, binary=binary)
        return {"albedo_dropped": False}
    raise MeshParseError(f"{path}: unsupported format {fmt!r}")


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def _load_obj(path: Path) -> TriMesh:
    vertices, faces = [], []
    try:
        text = path.read_text()
    except OSError as e:
        raise MeshParseError(f"{path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError as e:
                raise MeshParseError(f"{path}:{lineno}: bad vertex coordinate: {e}") from e
        elif tag == "f":
            if len(parts) < 4:
                raise MeshParseError(f"{path}:{lineno}: face needs at least 3 indices")
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError as e:
                    raise MeshParseError(f"{path}:{lineno}: bad face index {tok!r}") from e
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        # vn/vt/usemtl etc. are ignored
    try:
        return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as e:
        raise MeshParseError(f"{path}: {e}") from e


def _save_obj(mesh: TriMesh, path: Path) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _load_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshParseError(f"{path}: not a PLY file (missing header)")
    end = blob.index(b"\n", end) + 1
    header = blob[:end].decode("ascii", errors="replace")
    body = blob[end:]

    ply_format = None
    elements: list[tuple[str, int, list]] = []  # (name, count, [(prop, dtype|list-spec)])
    for lineno, line in enumerate(header.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if parts[0] == "format":
            ply_format = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(f"{path}:{lineno}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_DTYPES[parts[2]], _PLY_DTYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[3], _PLY_DTYPES[parts[1]]))
        else:
            raise MeshParseError(f"{path}:{lineno}: unknown header line {line!r}")
    if ply_format not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"{path}: unsupported PLY format {ply_format!r}")

    if ply_format == "ascii":
        values = _ply_parse_ascii(path, body, elements)
    else:
        values = _ply_parse_binary(path, body, elements)

    if "vertex" not in values:
        raise MeshParseError(f"{path}: no vertex element")
    vprops = values["vertex"]
    try:
        verts = np.stack([vprops["x"], vprops["y"], vprops["z"]], axis=1).astype(np.float64)
    except KeyError as e:
        raise MeshParseError(f"{path}: vertex element missing property {e}") from e

    albedo = None
    color_names = ("red", "green", "blue") if "red" in vprops else ("r", "g", "b") if "r" in vprops else None
    if color_names:
        cols = np.stack([vprops[c] for c in color_names], axis=1)
        if cols.dtype.kind == "u" or cols.dtype.kind == "i":
            albedo = cols.astype(np.float64) / 255.0
        else:
            albedo = cols.astype(np.float64)
        albedo = np.clip(albedo, 0.0, 1.0)

    faces = []
    face_el = values.get("face", {})
    lists = face_el.get("vertex_indices", face_el.get("vertex_index"))
    if lists is not None:
        for row in lists:
            for k in range(1, len(row) - 1):
                faces.append([row[0], row[k], row[k + 1]])
    try:
        return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), albedo)
    except MeshError as e:
        raise MeshParseError(f"{path}: {e}") from e


def _ply_parse_ascii(path, body: bytes, elements) -> dict:
    tokens = body.decode("ascii", errors="replace").split("\n")
    values: dict[str, dict] = {}
    row_iter = iter(tokens)
    for name, count, props in elements:
        store: dict[str, list] = {p: [] for p, _ in props}
        for i in range(count):
            try:
                row = next(row_iter).split()
            except StopIteration:
                raise MeshParseError(f"{path}: element {name!r} truncated at row {i}") from None
            pos = 0
            for pname, spec in props:
                try:
                    if isinstance(spec, tuple):  # list property
                        n = int(row[pos]); pos += 1
                        store[pname].append([int(float(x)) for x in row[pos:pos + n]])
                        pos += n
                    else:
                        cast = float if spec[0] == "f" else int
                        store[pname].append(cast(row[pos])); pos += 1
                except (IndexError, ValueError) as e:
                    raise MeshParseError(f"{path}: element {name!r} row {i}: {e}") from e
        values[name] = {p: (np.array(v) if not isinstance(props_spec, tuple) else v)
                        for (p, props_spec), v in zip(props, store.values())}
    return values


def _ply_parse_binary(path, body: bytes, elements) -> dict:
    values: dict[str, dict] = {}
    off = 0
    for name, count, props in elements:
        fixed = all(not isinstance(spec, tuple) for _, spec in props)
        if fixed:
            dt = np.dtype([(p, "<" + spec) for p, spec in props])
            end = off + dt.itemsize * count
            if end > len(body):
                raise MeshParseError(f"{path}: element {name!r} truncated")
            arr = np.frombuffer(body[off:end], dtype=dt)
            off = end
            values[name] = {p: arr[p] for p, _ in props}
        else:
            store: dict[str, list] = {p: [] for p, _ in props}
            for i in range(count):
                for pname, spec in props:
                    try:
                        if isinstance(spec, tuple):
                            _, cnt_dt, item_dt = spec
                            n = int(np.frombuffer(body, "<" + cnt_dt, 1, off)[0])
                            off += np.dtype(cnt_dt).itemsize
                            items = np.frombuffer(body, "<" + item_dt, n, off)
                            off += np.dtype(item_dt).itemsize * n
                            store[pname].append(items.astype(np.int64).tolist())
                        else:
                            val = np.frombuffer(body, "<" + spec, 1, off)[0]
                            off += np.dtype(spec).itemsize
                            store[pname].append(val)
                    except ValueError as e:
                        raise MeshParseError(
                            f"{path}: element {name!r} row {i} at byte {off}: {e}") from e
            values[name] = {p: (v if isinstance(dict(props)[p], tuple) else np.array(v))
                            for p, v in store.items()}
    return values


def _save_ply(mesh: TriMesh, path: Path, binary: bool = True) -> None:
    has_color = mesh.albedo is not None
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property float red", "property float green", "property float blue"]
    header += [f"element face {mesh.n_faces}",
               "property list uchar int vertex_indices",
               "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if has_color:
                dt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                               ("r", "<f4"), ("g", "<f4"), ("b", "<f4")])
                arr = np.empty(mesh.n_vertices, dtype=dt)
                arr["x"], arr["y"], arr["z"] = mesh.vertices.T
                arr["r"], arr["g"], arr["b"] = mesh.albedo.astype(np.float32).T
            else:
                arr = mesh.vertices.astype("<f8")
            fh.write(arr.tobytes())
            fdata = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            fdata["n"] = 3
            fdata["idx"] = mesh.faces.astype("<i4")
            fh.write(fdata.tobytes())
        else:
            lines = []
            for i, v in enumerate(mesh.vertices):
                row = f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}"
                if has_color:
                    a = np.float32(mesh.albedo[i, 0]), np.float32(mesh.albedo[i, 1]), np.float32(mesh.albedo[i, 2])
                    row += f" {a[0]:.9g} {a[1]:.9g} {a[2]:.9g}"
                lines.append(row)
            for f in mesh.faces:
                lines.append(f"3 {f[0]} {f[1]} {f[2]}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
