"""File formats: PLY clouds, correspondence lists, view graphs and trajectories."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import IndexOutOfRange, ParseError, UnsupportedFormat
from .liegroup import RigidMotion, is_rotation
from .multiview import Edge, ViewGraph
from .pairwise import CorrespondenceSet

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
NORMAL_NAMES = ("nx", "ny", "nz")
# Rotation blocks read from text are accepted up to this orthonormality error.
TRAJECTORY_TOL = 1e-9


def _parse_header(data: bytes):
    """Return (format, vertex_count, [(name, dtype)], payload_offset, header_lines)."""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file: missing 'ply' magic or 'end_header'", line=1)
    nl = data.find(b"\n", end)
    offset = len(data) if nl < 0 else nl + 1
    lines = data[:offset].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: list[tuple[str, int, list]] = []
    for lineno, raw in enumerate(lines, start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise ParseError(f"bad format line {raw!r}", line=lineno)
            fmt = tok[1]
            if fmt == "binary_big_endian":
                raise UnsupportedFormat("big-endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format {fmt!r}", line=lineno)
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"bad element line {raw!r}", line=lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
                continue
            if len(tok) != 3 or tok[1] not in PLY_TYPES:
                raise ParseError(f"bad property line {raw!r}", line=lineno)
            elements[-1][2].append((tok[2], PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError("header has no format line", line=1)
    if not elements or elements[0][0] != "vertex":
        raise UnsupportedFormat("the vertex element must come first")
    _, count, props = elements[0]
    if any(dt is None for _, dt in props):
        raise UnsupportedFormat("list properties on vertices are not supported")
    names = [n for n, _ in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}")
        if dict(props)[axis] not in ("f4", "f8"):
            raise UnsupportedFormat(f"property {axis!r} must be float or double")
    return fmt, count, props, offset, len(lines)


def read_ply(path) -> PointCloud:
    """Read vertices (and nx/ny/nz when all present) from an ascii or little-endian PLY."""
    data = Path(path).read_bytes()
    fmt, count, props, offset, header_lines = _parse_header(data)
    names = [n for n, _ in props]

    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + dt) for n, dt in props])
        need = count * dtype.itemsize
        have = len(data) - offset
        if have < need:
            raise ParseError(f"truncated vertex data: expected {need} bytes, got {have}",
                             offset=offset + have)
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        cols = {n: rec[n].astype(float) for n in names}
    else:
        body = data[offset:].decode("ascii", errors="replace").splitlines()
        rows = []
        for k in range(count):
            lineno = header_lines + k + 1
            if k >= len(body):
                raise ParseError(f"expected {count} vertex lines, got {k}", line=lineno)
            tok = body[k].split()
            if len(tok) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tok)}", line=lineno)
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise ParseError(f"non-numeric value in {body[k]!r}", line=lineno) from None
        arr = np.array(rows, dtype=float).reshape(count, len(props))
        cols = {n: arr[:, c] for c, n in enumerate(names)}

    points = np.column_stack([cols["x"], cols["y"], cols["z"]])
    normals = None
    if all(n in cols for n in NORMAL_NAMES):
        normals = np.column_stack([cols[n] for n in NORMAL_NAMES])
    try:
        return PointCloud(points, normals)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_ply(cloud: PointCloud, path, *, binary: bool = False) -> None:
    """Write double-precision vertices; ascii values use 17 significant digits."""
    names = ["x", "y", "z"]
    data = cloud.points
    if cloud.normals is not None:
        names += list(NORMAL_NAMES)
        data = np.hstack([cloud.points, cloud.normals])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join("%.17g" % v for v in row) + "\n").encode("ascii"))


def _check_index(k: int, size: int, what: str, lineno: int):
    if not 0 <= k < size:
        raise IndexOutOfRange(f"{what} index {k} outside [0, {size}) on line {lineno}")


def parse_index_pairs(text: str, n_src: int, n_dst: int) -> np.ndarray:
    """``(S, 2)`` integer pairs from ``i j`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 2:
            raise ParseError(f"expected two indices, got {len(tok)} fields", line=lineno)
        try:
            i, j = int(tok[0]), int(tok[1])
        except ValueError:
            raise ParseError(f"non-integer index in {raw.strip()!r}", line=lineno) from None
        _check_index(i, n_src, "source", lineno)
        _check_index(j, n_dst, "target", lineno)
        pairs.append((i, j))
    return np.array(pairs, dtype=int).reshape(-1, 2)


def _point_pairs_from_json(obj) -> tuple[np.ndarray, np.ndarray]:
    try:
        items = obj["correspondences"]
        src = np.array([it["src"] for it in items], dtype=float).reshape(-1, 3)
        dst = np.array([it["dst"] for it in items], dtype=float).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad correspondence JSON: {exc}") from None
    return src, dst


def read_correspondences(path, src: PointCloud | None = None,
                         dst: PointCloud | None = None) -> CorrespondenceSet:
    """Matches between a source and a target cloud.

    Either ``i j`` index lines (``i`` into ``src``, ``j`` into ``dst``) or a
    JSON document ``{"correspondences": [{"src": [x, y, z], "dst": [x, y, z]}, ...]}``.
    The result pairs target points ``p`` with source points ``q``.
    """
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        q, p = _point_pairs_from_json(obj)
    else:
        if src is None or dst is None:
            raise ValueError("index correspondences need both clouds")
        idx = parse_index_pairs(text, len(src), len(dst))
        q, p = src.points[idx[:, 0]], dst.points[idx[:, 1]]
    if len(p) < 3:
        raise ParseError(f"need at least 3 correspondences, found {len(p)}")
    try:
        return CorrespondenceSet(p, q)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def _format_row(values) -> str:
    return " ".join("%.17g" % v for v in values)


def format_motion(m: RigidMotion) -> str:
    """The 4x4 matrix, one row per line, 17 significant digits."""
    return "\n".join(_format_row(row) for row in m.matrix()) + "\n"


def write_trajectory(motions, path=None, *, full: bool = False) -> str:
    """One motion per line: the top 3x4 block row-major, or all 16 entries with ``full``."""
    rows = 4 if full else 3
    text = "".join(_format_row(m.matrix()[:rows].ravel()) + "\n" for m in motions)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
    return text


def parse_motion(values, lineno: int | None = None) -> RigidMotion:
    values = np.asarray(values, dtype=float)
    if values.size not in (12, 16):
        raise ParseError(f"expected 12 or 16 values, got {values.size}", line=lineno)
    m = np.eye(4)
    m[:values.size // 4] = values.reshape(-1, 4)
    if values.size == 16 and not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ParseError("bottom row must be 0 0 0 1", line=lineno)
    if not np.isfinite(m).all() or not is_rotation(m[:3, :3], TRAJECTORY_TOL):
        raise ParseError("rotation block is not orthonormal", line=lineno)
    return RigidMotion.from_matrix(m)


def read_trajectory(path) -> list[RigidMotion]:
    motions = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        try:
            values = [float(t) for t in tok]
        except ValueError:
            raise ParseError(f"non-numeric value in {raw.strip()!r}", line=lineno) from None
        motions.append(parse_motion(values, lineno))
    return motions


def _edge_pairs(spec, base: Path, scans) -> tuple[np.ndarray, np.ndarray]:
    """Scan-i and scan-j points of one edge from its JSON ``correspondences`` value."""
    i, j, value = spec
    if isinstance(value, str):
        path = base / value
        text = path.read_text()
        if text.lstrip().startswith("{"):
            return _point_pairs_from_json(json.loads(text))
        if scans is not None:
            idx = parse_index_pairs(text, len(scans[i]), len(scans[j]))
            return scans[i].points[idx[:, 0]], scans[j].points[idx[:, 1]]
        try:
            rows = np.loadtxt(path, ndmin=2, comments="#")
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
    else:
        rows = np.asarray(value, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 6:
        raise ParseError(f"edge ({i}, {j}): expected rows of 6 coordinates")
    return rows[:, :3], rows[:, 3:]


def read_view_graph(path) -> tuple[ViewGraph, bool]:
    """Load a view graph; the flag says whether initial motions were given.

    Layout::

        {"n": 3,
         "motions": [[16 floats], ...],          # optional, row-major 4x4
         "scans": ["a.ply", "b.ply", "c.ply"],   # optional, enables index files
         "edges": [{"i": 0, "j": 1, "correspondences": <value>}, ...]}

    ``<value>`` is an inline list of ``[xi, yi, zi, xj, yj, zj]`` rows or a
    path (relative to the JSON file) to a file holding such rows, ``a b``
    index pairs into the two scans, or correspondence JSON with ``src`` as
    the scan-i end.  Missing motions default to the identity.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    unknown = set(obj) - {"n", "motions", "scans", "edges"}
    if unknown:
        raise ParseError(f"unknown view-graph keys: {sorted(unknown)}")
    base = path.parent
    try:
        n = int(obj["n"])
        edges_in = obj["edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"view graph needs 'n' and 'edges': {exc}") from None
    scans = [read_ply(base / s) for s in obj["scans"]] if "scans" in obj else None
    if scans is not None and len(scans) != n:
        raise ParseError(f"'scans' lists {len(scans)} files for n = {n}")

    has_motions = "motions" in obj
    if has_motions:
        if len(obj["motions"]) != n:
            raise ParseError(f"'motions' has {len(obj['motions'])} entries for n = {n}")
        motions = [parse_motion(m) for m in obj["motions"]]
    else:
        motions = [RigidMotion.identity()] * n

    edges = []
    for e in edges_in:
        try:
            i, j, value = int(e["i"]), int(e["j"]), e["correspondences"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad edge entry {e!r}: {exc}") from None
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise IndexOutOfRange(f"edge ({i}, {j}) outside a graph of {n} scans")
        pi, pj = _edge_pairs((i, j, value), base, scans)
        if i > j:
            i, j, pi, pj = j, i, pj, pi
        if len(pi) < 3:
            raise ParseError(f"edge ({i}, {j}) has fewer than 3 correspondences")
        edges.append(Edge(i, j, CorrespondenceSet(pi, pj)))
    return ViewGraph(n, motions, edges), has_motions


def write_view_graph(graph: ViewGraph, path) -> None:
    """Inline JSON form of ``graph`` that ``read_view_graph`` reads back exactly."""
    obj = {
        "n": graph.n,
        "motions": [m.matrix().ravel().tolist() for m in graph.motions],
        "edges": [{"i": e.i, "j": e.j,
                   "correspondences": np.hstack([e.corrs.p, e.corrs.q]).tolist()}
                  for e in graph.edges],
    }
    Path(path).write_text(json.dumps(obj))


def list_ply_files(directory) -> list[Path]:
    """PLY files of ``directory`` in name order; scan k is the k-th file."""
    files = sorted(Path(directory).glob("*.ply"), key=lambda p: p.name)
    if not files:
        raise ParseError(f"no .ply files in {os.fspath(directory)}")
    return files


def read_edges(path, n: int) -> list[tuple[int, int]]:
    """``i j`` lines naming the scans to register against each other."""
    idx = parse_index_pairs(Path(path).read_text(), n, n)
    return [(min(i, j), max(i, j)) for i, j in idx if i != j]
