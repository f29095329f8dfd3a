"""Plain-text emitters and readers: data files, field dumps, VTK, JSON.

Floats are written with 17 significant digits so that every file reads
back bit-exactly and reruns produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError

FIELD_HEADER = "# eegoc-field 1"
VTK_TETRA = 10
VTK_TRIANGLE = 5


def _g(x):
    return f"{x:.17g}"


def write_data(path, d, s=None):
    """Electrode data file, one ``index value std`` line per electrode."""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    s = np.zeros_like(d) if s is None else np.asarray(s, dtype=np.float64).reshape(-1)
    lines = ["# index value std"]
    lines += [f"{i} {_g(v)} {_g(e)}" for i, (v, e) in enumerate(zip(d.tolist(), s.tolist()))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_data(path):
    """Read a data file; returns ``(d, s)`` ordered by index."""
    rows = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 3:
            raise ParseError("expected 'index value std'", n)
        try:
            idx, val, std = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError("non-numeric field", n) from None
        if idx in rows:
            raise ParseError(f"duplicate index {idx}", n)
        rows[idx] = (val, std)
    if not rows:
        raise ParseError("no data in file", 1)
    if sorted(rows) != list(range(len(rows))):
        raise ParseError("indices must be 0..K-1", 1)
    a = np.array([rows[i] for i in range(len(rows))])
    return a[:, 0], a[:, 1]


def write_field(path, values, name="value"):
    """Per-node values: header, ``<name> <count>``, then one ``index value`` line each."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lines = [FIELD_HEADER, f"{name} {len(v)}"]
    lines += [f"{i} {_g(x)}" for i, x in enumerate(v.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != FIELD_HEADER:
        raise ParseError("not a field dump", 1)
    try:
        name, count = lines[1].split()
        count = int(count)
    except (IndexError, ValueError):
        raise ParseError("expected '<name> <count>'", 2) from None
    out = np.empty(count)
    for i in range(count):
        try:
            idx, val = lines[2 + i].split()
            if int(idx) != i:
                raise ValueError
            out[i] = float(val)
        except (IndexError, ValueError):
            raise ParseError("bad field line", 3 + i) from None
    return name, out


def _vtk_lines(points, cells, cell_type, point_data, cell_data, title):
    points = np.asarray(points, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    n, k = len(points), cells.shape[1]
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    out += [" ".join(_g(c) for c in p) for p in points.tolist()]
    out.append(f"CELLS {len(cells)} {len(cells) * (k + 1)}")
    out += [f"{k} " + " ".join(map(str, c)) for c in cells.tolist()]
    out.append(f"CELL_TYPES {len(cells)}")
    out += [str(cell_type)] * len(cells)
    for section, size, data in (("CELL_DATA", len(cells), cell_data),
                                ("POINT_DATA", n, point_data)):
        if not data:
            continue
        out.append(f"{section} {size}")
        for name, vals in data.items():
            vals = np.asarray(vals).reshape(-1)
            if len(vals) != size:
                raise ValueError(f"{name}: expected {size} values, got {len(vals)}")
            if np.issubdtype(vals.dtype, np.integer):
                out += [f"SCALARS {name} int 1", "LOOKUP_TABLE default"]
                out += [str(int(v)) for v in vals.tolist()]
            else:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [_g(v) for v in vals.astype(np.float64).tolist()]
    return out


def write_vtk_volume(path, mesh, point_data=None, title="eegoc volume"):
    """Legacy ASCII unstructured grid of the tets, region ids as cell data."""
    lines = _vtk_lines(mesh.vertices, mesh.tets, VTK_TETRA, point_data or {},
                       {"region": mesh.regions.astype(np.int64)}, title)
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk_surface(path, surf, point_data=None, title="eegoc surface"):
    """Legacy ASCII unstructured grid of a triangulated surface."""
    lines = _vtk_lines(surf.points, surf.triangles, VTK_TRIANGLE, point_data or {}, {}, title)
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path):
    """Structural reader for the files written here (used by the tests).

    Returns a dict with ``points``, ``cells``, ``cell_types`` and
    ``point_data`` / ``cell_data`` mappings.
    """
    tokens = Path(path).read_text().splitlines()
    if not tokens[0].startswith("# vtk DataFile Version"):
        raise ParseError("missing vtk header", 1)
    if tokens[2].strip() != "ASCII" or tokens[3].strip() != "DATASET UNSTRUCTURED_GRID":
        raise ParseError("not an ASCII unstructured grid", 3)
    pos = 4
    out = {"point_data": {}, "cell_data": {}}
    section = None
    while pos < len(tokens):
        head = tokens[pos].split()
        if not head:
            pos += 1
            continue
        key = head[0]
        try:
            if key == "POINTS":
                n = int(head[1])
                out["points"] = np.array([[float(x) for x in tokens[pos + 1 + i].split()]
                                          for i in range(n)])
                pos += n + 1
            elif key == "CELLS":
                n = int(head[1])
                rows = [list(map(int, tokens[pos + 1 + i].split())) for i in range(n)]
                if sum(len(r) for r in rows) != int(head[2]):
                    raise ParseError("CELLS size mismatch", pos + 1)
                if any(r[0] != len(r) - 1 for r in rows):
                    raise ParseError("cell vertex count mismatch", pos + 1)
                out["cells"] = [r[1:] for r in rows]
                pos += n + 1
            elif key == "CELL_TYPES":
                n = int(head[1])
                out["cell_types"] = np.array([int(tokens[pos + 1 + i]) for i in range(n)])
                pos += n + 1
            elif key in ("POINT_DATA", "CELL_DATA"):
                section = (key.lower(), int(head[1]))
                pos += 1
            elif key == "SCALARS":
                if section is None or tokens[pos + 1].split()[0] != "LOOKUP_TABLE":
                    raise ParseError("SCALARS outside a data section", pos + 1)
                kind, size = section
                conv = int if head[2] == "int" else float
                out[kind][head[1]] = np.array([conv(tokens[pos + 2 + i]) for i in range(size)])
                pos += size + 2
            else:
                raise ParseError(f"unexpected keyword {key!r}", pos + 1)
        except (IndexError, ValueError):
            raise ParseError("truncated or malformed section", pos + 1) from None
    return out


def write_json(path, obj):
    """Stable JSON (sorted keys, fixed indentation, trailing newline)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


__all__ = [
    "write_data", "read_data", "write_field", "read_field", "write_vtk_volume",
    "write_vtk_surface", "read_vtk", "write_json",
]
