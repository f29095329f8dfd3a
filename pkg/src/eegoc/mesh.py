"""
Tetrahedral head meshes.

A :class:`TetMesh` stores the volume between the scalp and the cortex as
linear tetrahedra with a compartment label per element, plus the tagged
triangles of its boundary.  The module also contains a deterministic
spherical-shell mesher, readers/writers for the Gmsh 2.2 ASCII subset and a
plain-text canonical dump, and a structural validator.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyBoundaryError,
    MeshValidationError,
    ParameterError,
    ParseError,
    ResourceError,
    UnsupportedFeatureError,
)

DEGENERATE_REL_VOLUME = 1e-14
DEFAULT_ELEMENT_BUDGET = 2_000_000


class BoundaryTag(enum.IntEnum):
    SCALP = 1
    CORTEX = 2
    OTHER = 3


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Linear tetrahedral mesh with tagged boundary faces.

    Parameters
    ----------
    vertices : (N, 3) float array
    tets : (T, 4) int array
        Vertex indices, positively oriented.
    regions : (T,) int array
        Compartment label of each tetrahedron.
    faces : (F, 3) int array
        Boundary triangles, oriented with the normal pointing out of the domain.
    face_tags : (F,) int array
        :class:`BoundaryTag` value of each boundary triangle.
    """

    vertices: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    faces: np.ndarray
    face_tags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64).reshape(-1, 3))
        object.__setattr__(self, "tets", _frozen(self.tets, np.int64).reshape(-1, 4))
        object.__setattr__(self, "regions", _frozen(self.regions, np.int64).reshape(-1))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64).reshape(-1, 3))
        object.__setattr__(self, "face_tags", _frozen(self.face_tags, np.int64).reshape(-1))
        if len(self.regions) != len(self.tets):
            raise MeshValidationError("one region id per tetrahedron is required")
        if len(self.face_tags) != len(self.faces):
            raise MeshValidationError("one tag per boundary face is required")

    @property
    def n_nodes(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def signed_volumes(self):
        p = self.vertices[self.tets]
        d = p[:, 1:] - p[:, :1]
        return np.linalg.det(d) / 6.0

    def volume(self):
        return float(np.sum(np.abs(self.signed_volumes())))

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        e = np.concatenate([self.tets[:, list(p)] for p in pairs])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def max_edge_length(self):
        """Maximum element diameter ``h`` (the longest edge of a tetrahedron)."""
        e = self.edges()
        return float(np.max(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))

    def diameter(self):
        """Length of the bounding-box diagonal."""
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def boundary_faces(self, tag):
        return self.faces[self.face_tags == int(tag)]

    def boundary_nodes(self, tag):
        """Sorted vertex indices touched by faces carrying ``tag``."""
        return np.unique(self.boundary_faces(tag))

    def region_ids(self):
        return sorted(int(r) for r in np.unique(self.regions))


@dataclass(frozen=True, eq=False)
class SurfaceExtraction:
    """Cortical triangulation hosting the control space.

    ``triangles`` index into ``points``; ``surf_to_vol[i]`` is the volume
    node carrying surface node ``i``.
    """

    triangles: np.ndarray
    surf_to_vol: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "surf_to_vol", _frozen(self.surf_to_vol, np.int64).reshape(-1))
        object.__setattr__(self, "points", _frozen(self.points, np.float64).reshape(-1, 3))

    @property
    def n_nodes(self):
        return len(self.surf_to_vol)

    def areas(self):
        p = self.points[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def area(self):
        return float(self.areas().sum())

    def euler_characteristic(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        n_edges = len(np.unique(e, axis=0))
        n_vertices = len(np.unique(t))
        return n_vertices - n_edges + len(t)


# --------------------------------------------------------------------------
# spherical shell mesher
# --------------------------------------------------------------------------

def _octahedron():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    t = np.array([
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ])
    return v, t


def _subdivide(vertices, triangles):
    # old vertices keep their indices, so coarse nodes reappear in finer spheres
    verts = [tuple(v) for v in vertices]
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            m = vertices[a] + vertices[b]
            verts.append(tuple(m / np.linalg.norm(m)))
            midpoint[key] = len(verts) - 1
        return midpoint[key]

    out = []
    for a, b, c in triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.array(verts), np.array(out, dtype=np.int64)


def unit_sphere(subdivisions):
    """Octahedron-based triangulation of the unit sphere."""
    v, t = _octahedron()
    for _ in range(subdivisions):
        v, t = _subdivide(v, t)
    return v, t


def shell_mesh_size(refinement_level, base_subdivisions=3, base_layers=1):
    """Number of tetrahedra :func:`build_shell_mesh` would generate."""
    n_tri = 8 * 4 ** (base_subdivisions + refinement_level)
    return 3 * n_tri * base_layers * 2**refinement_level


def build_shell_mesh(r_inner, r_outer, refinement_level, *, base_subdivisions=3,
                     base_layers=1, max_elements=DEFAULT_ELEMENT_BUDGET):
    """Mesh the spherical shell ``r_inner <= |x| <= r_outer``.

    Each refinement level subdivides the sphere triangulation once and
    doubles the number of radial layers, halving the element size.  Every
    triangular prism between two layers is cut into three tetrahedra; the
    cut of each quadrilateral side runs from the higher-indexed bottom node
    to the lower-indexed top node, which keeps neighbouring prisms
    conforming.  The inner sphere is tagged CORTEX, the outer sphere SCALP.
    All tetrahedra carry region 1.
    """
    if not 0 < r_inner < r_outer:
        raise ParameterError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if refinement_level < 0 or int(refinement_level) != refinement_level:
        raise ParameterError("refinement_level must be a non-negative integer")
    n_est = shell_mesh_size(refinement_level, base_subdivisions, base_layers)
    if n_est > max_elements:
        raise ResourceError(f"level {refinement_level} needs {n_est} tetrahedra, budget is {max_elements}")

    sv, st = unit_sphere(base_subdivisions + refinement_level)
    st = np.sort(st, axis=1)
    nv = len(sv)
    n_layers = base_layers * 2**refinement_level
    radii = r_inner + (r_outer - r_inner) * np.arange(n_layers + 1) / n_layers
    radii[-1] = r_outer
    vertices = (radii[:, None, None] * sv[None, :, :]).reshape(-1, 3)

    a, b, c = st[:, 0], st[:, 1], st[:, 2]
    tets = []
    for k in range(n_layers):
        lo, hi = k * nv, (k + 1) * nv
        tets.append(np.stack([a + lo, b + lo, c + lo, a + hi], axis=1))
        tets.append(np.stack([b + lo, c + lo, a + hi, b + hi], axis=1))
        tets.append(np.stack([c + lo, a + hi, b + hi, c + hi], axis=1))
    tets = _orient_tets(vertices, np.concatenate(tets))

    inner = _orient_faces(vertices, st.copy(), outward=False)
    outer = _orient_faces(vertices, st + n_layers * nv, outward=True)
    faces = np.concatenate([inner, outer])
    tags = np.concatenate([np.full(len(inner), BoundaryTag.CORTEX), np.full(len(outer), BoundaryTag.SCALP)])
    return TetMesh(vertices, tets, np.ones(len(tets), dtype=np.int64), faces, tags)


def _orient_tets(vertices, tets):
    p = vertices[tets]
    vol = np.linalg.det(p[:, 1:] - p[:, :1])
    tets = tets.copy()
    neg = vol < 0
    tets[neg, 0], tets[neg, 1] = tets[neg, 1].copy(), tets[neg, 0].copy()
    return tets


def _orient_faces(vertices, faces, outward):
    # radial orientation; only valid for star-shaped surfaces around the origin
    p = vertices[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    s = np.einsum("ij,ij->i", n, p.mean(axis=1))
    flip = s < 0 if outward else s > 0
    faces = faces.copy()
    faces[flip, 1], faces[flip, 2] = faces[flip, 2].copy(), faces[flip, 1].copy()
    return faces


# --------------------------------------------------------------------------
# boundary utilities
# --------------------------------------------------------------------------

_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def tet_faces(tets):
    """All element faces, (4T, 3), outward-oriented for positive tets."""
    return tets[:, _TET_FACES].reshape(-1, 3)


def exterior_faces(mesh):
    """Faces of the tetrahedra that belong to exactly one element.

    Returns the oriented faces and the owning element of each.
    """
    f = tet_faces(mesh.tets)
    key = np.sort(f, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    mask = counts[inv] == 1
    owner = np.repeat(np.arange(mesh.n_tets), 4)
    return f[mask], owner[mask]


def extract_cortex(mesh):
    """Return the CORTEX triangulation of ``mesh`` as a :class:`SurfaceExtraction`."""
    tri = mesh.boundary_faces(BoundaryTag.CORTEX)
    if len(tri) == 0:
        raise EmptyBoundaryError("mesh has no CORTEX faces")
    surf_to_vol, local = np.unique(tri, return_inverse=True)
    return SurfaceExtraction(local.reshape(-1, 3), surf_to_vol, mesh.vertices[surf_to_vol])


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass
class Violation:
    kind: str
    index: int
    message: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, kind, index, message):
        self.violations.append(Violation(kind, int(index), message))

    def kinds(self):
        return {v.kind for v in self.violations}

    def __str__(self):
        if self.ok:
            return "mesh valid"
        return "\n".join(f"[{v.kind}] #{v.index}: {v.message}" for v in self.violations)


def validate(mesh):
    """Check every mesh invariant and collect the violations.

    Never raises; an empty report means the mesh is valid.
    """
    rep = ValidationReport()
    n = mesh.n_nodes
    for name, arr in (("tet", mesh.tets), ("face", mesh.faces)):
        bad = np.nonzero(((arr < 0) | (arr >= n)).any(axis=1))[0]
        for i in bad:
            rep.add("index_range", i, f"{name} {i} references a vertex outside [0, {n})")
    if not rep.ok:
        return rep

    extent = mesh.diameter()
    vol = mesh.signed_volumes()
    tiny = DEGENERATE_REL_VOLUME * extent**3
    for i in np.nonzero(np.abs(vol) < tiny)[0]:
        rep.add("degenerate_tet", i, f"tet {i} has volume {vol[i]:.3e}")
    for i in np.nonzero(vol <= -tiny)[0]:
        rep.add("inverted_tet", i, f"tet {i} has negative signed volume {vol[i]:.3e}")

    p = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    for i in np.nonzero(area < 1e-14 * extent**2)[0]:
        rep.add("degenerate_face", i, f"boundary face {i} has zero area")

    all_faces = np.sort(tet_faces(mesh.tets), axis=1)
    owners = Counter(map(tuple, all_faces))
    fkeys = [tuple(k) for k in np.sort(mesh.faces, axis=1)]
    seen = Counter(fkeys)
    for i, k in enumerate(fkeys):
        if owners.get(k, 0) != 1:
            rep.add("face_ownership", i, f"boundary face {i} belongs to {owners.get(k, 0)} tets")
        if seen[k] > 1:
            rep.add("duplicate_face", i, f"boundary face {i} is listed {seen[k]} times")

    tags = mesh.face_tags
    scalp = {k for k, t in zip(fkeys, tags) if t == BoundaryTag.SCALP}
    cortex = {k for k, t in zip(fkeys, tags) if t == BoundaryTag.CORTEX}
    for i, k in enumerate(fkeys):
        if k in scalp and k in cortex:
            rep.add("tag_overlap", i, f"face {i} is tagged both SCALP and CORTEX")

    for tag in (BoundaryTag.SCALP, BoundaryTag.CORTEX):
        sel = np.nonzero(tags == tag)[0]
        if len(sel) == 0:
            continue
        f = mesh.faces[sel]
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        ek, ecount = np.unique(e, axis=0, return_counts=True)
        for k, c in zip(ek, ecount):
            if c != 2:
                rep.add("non_manifold", sel[0], f"{tag.name} edge {tuple(k)} is shared by {c} faces")
    return rep


def require_valid(mesh):
    rep = validate(mesh)
    if not rep.ok:
        raise MeshValidationError(str(rep))
    return mesh


# --------------------------------------------------------------------------
# Gmsh 2.2 ASCII subset
# --------------------------------------------------------------------------

_MSH_TRIANGLE = 2
_MSH_TET = 4
_MSH_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 8: 3, 9: 6, 10: 9, 11: 10, 15: 1}


def _parse_tag(value):
    if isinstance(value, BoundaryTag):
        return value
    if isinstance(value, str):
        return BoundaryTag[value.upper()]
    return BoundaryTag(int(value))


def load_msh(path, tag_table):
    """Read a tetrahedral mesh from a Gmsh version 2.2 ASCII file.

    Parameters
    ----------
    path : path-like
    tag_table : dict
        Maps physical-surface numbers of triangle elements to
        :class:`BoundaryTag` (or their names).  Mandatory: triangles whose
        physical tag is missing from the table are rejected.

    Notes
    -----
    Tetrahedron physical tags become region ids.  Triangles lying inside the
    volume (compartment interfaces) are ignored; every exterior face of the
    tetrahedra must be covered by a tagged triangle.
    """
    table = {int(k): _parse_tag(v) for k, v in tag_table.items()}
    lines = Path(path).read_text().splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            s = lines[pos - 1].strip()
            if s:
                return s
        raise ParseError("unexpected end of file", pos)

    node_ids, coords = [], []
    tets, regions, tris, tri_phys, tri_lines = [], [], [], [], []
    seen_format = False
    while pos < len(lines):
        s = lines[pos].strip()
        pos += 1
        if not s:
            continue
        if s == "$MeshFormat":
            head = next_line().split()
            if len(head) < 3 or not head[0].startswith("2.2") or head[1] != "0":
                raise UnsupportedFeatureError(f"line {pos}: only ASCII MSH 2.2 is supported")
            if next_line() != "$EndMeshFormat":
                raise ParseError("expected $EndMeshFormat", pos)
            seen_format = True
        elif s == "$Nodes":
            try:
                count = int(next_line())
                for _ in range(count):
                    parts = next_line().split()
                    node_ids.append(int(parts[0]))
                    coords.append([float(x) for x in parts[1:4]])
                    if len(parts) != 4:
                        raise ValueError
            except (ValueError, IndexError):
                raise ParseError("malformed node record", pos) from None
            if next_line() != "$EndNodes":
                raise ParseError("expected $EndNodes", pos)
        elif s == "$Elements":
            try:
                count = int(next_line())
            except ValueError:
                raise ParseError("malformed element count", pos) from None
            for _ in range(count):
                s = next_line()
                try:
                    parts = [int(x) for x in s.split()]
                    etype, ntags = parts[1], parts[2]
                    tags = parts[3:3 + ntags]
                    conn = parts[3 + ntags:]
                except (ValueError, IndexError):
                    raise ParseError("malformed element record", pos) from None
                if etype not in (_MSH_TRIANGLE, _MSH_TET):
                    raise UnsupportedFeatureError(f"line {pos}: element type {etype} is not supported")
                expected = 3 if etype == _MSH_TRIANGLE else 4
                if len(conn) != expected or ntags < 1:
                    raise ParseError("element needs a physical tag and "
                                     f"{expected} nodes", pos)
                if etype == _MSH_TET:
                    tets.append(conn)
                    regions.append(tags[0])
                else:
                    tris.append(conn)
                    tri_phys.append(tags[0])
                    tri_lines.append(pos)
            if next_line() != "$EndElements":
                raise ParseError("expected $EndElements", pos)
        elif s.startswith("$"):
            end = "$End" + s[1:]
            while pos < len(lines) and lines[pos].strip() != end:
                pos += 1
            pos += 1
        else:
            raise ParseError(f"unexpected content {s[:30]!r}", pos)

    if not seen_format:
        raise ParseError("missing $MeshFormat section", 1)
    if not tets:
        raise ParseError("file contains no tetrahedra", len(lines))
    index = {nid: i for i, nid in enumerate(node_ids)}
    try:
        tet_arr = np.array([[index[n] for n in t] for t in tets], dtype=np.int64)
        tri_arr = np.array([[index[n] for n in t] for t in tris], dtype=np.int64).reshape(-1, 3)
    except KeyError as exc:
        raise ParseError(f"element references unknown node {exc.args[0]}") from None
    vertices = np.array(coords, dtype=np.float64)
    tet_arr = _orient_tets(vertices, tet_arr)

    probe = TetMesh(vertices, tet_arr, regions, np.zeros((0, 3)), np.zeros(0))
    ext, _ = exterior_faces(probe)
    ext_key = {tuple(sorted(f)): f for f in ext}
    faces, ftags = [], []
    covered = set()
    for tri, phys, line in zip(tri_arr, tri_phys, tri_lines):
        key = tuple(sorted(tri))
        if key not in ext_key:
            continue
        if phys not in table:
            raise MeshValidationError(f"line {line}: boundary triangle has physical tag {phys} "
                                      "missing from the tag table")
        faces.append(_match_orientation(tri, ext_key[key]))
        ftags.append(int(table[phys]))
        covered.add(key)
    missing = len(ext_key) - len(covered)
    if missing:
        raise MeshValidationError(f"{missing} exterior faces carry no tagged triangle")
    return TetMesh(vertices, tet_arr, regions, np.array(faces).reshape(-1, 3), np.array(ftags))


def _match_orientation(tri, reference):
    # keep the file's vertex order unless it is the reverse cycle of the outward face
    r = list(reference)
    i = r.index(tri[0])
    if [r[i], r[(i + 1) % 3], r[(i + 2) % 3]] == list(tri):
        return np.asarray(tri)
    return np.asarray([tri[0], tri[2], tri[1]])


def write_msh(mesh, path, tag_table=None):
    """Write ``mesh`` in the Gmsh 2.2 ASCII subset read by :func:`load_msh`.

    ``tag_table`` maps physical numbers to boundary tags, as for reading; by
    default the :class:`BoundaryTag` values themselves are used.
    """
    if tag_table is None:
        inverse = {t: int(t) for t in BoundaryTag}
    else:
        inverse = {_parse_tag(v): int(k) for k, v in tag_table.items()}
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_nodes)]
    out += [f"{i + 1} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(len(mesh.faces) + mesh.n_tets)]
    k = 1
    for f, t in zip(mesh.faces.tolist(), mesh.face_tags.tolist()):
        phys = inverse[BoundaryTag(t)]
        out.append(f"{k} 2 2 {phys} {phys} {f[0] + 1} {f[1] + 1} {f[2] + 1}")
        k += 1
    for t, r in zip(mesh.tets.tolist(), mesh.regions.tolist()):
        out.append(f"{k} 4 2 {r} {r} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}")
        k += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# canonical dump
# --------------------------------------------------------------------------

DUMP_HEADER = "# eegoc-mesh 1"


def write_dump(mesh, path):
    """Write the canonical plain-text dump (see ``docs/formats.md``)."""
    out = [DUMP_HEADER, f"nodes {mesh.n_nodes}"]
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out.append(f"tets {mesh.n_tets}")
    out += [f"{a} {b} {c} {d} {r}" for (a, b, c, d), r in zip(mesh.tets.tolist(), mesh.regions.tolist())]
    out.append(f"faces {len(mesh.faces)}")
    out += [f"{a} {b} {c} {BoundaryTag(t).name}" for (a, b, c), t in zip(mesh.faces.tolist(), mesh.face_tags.tolist())]
    Path(path).write_text("\n".join(out) + "\n")


def read_dump(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != DUMP_HEADER:
        raise ParseError("not a canonical mesh dump", 1)
    pos = 1

    def section(name, width, conv):
        nonlocal pos
        head = lines[pos].split()
        if len(head) != 2 or head[0] != name:
            raise ParseError(f"expected '{name} <count>'", pos + 1)
        count = int(head[1])
        rows = []
        for i in range(count):
            parts = lines[pos + 1 + i].split()
            if len(parts) != width:
                raise ParseError(f"expected {width} fields", pos + 2 + i)
            try:
                rows.append([c(p) for c, p in zip(conv, parts)])
            except (ValueError, KeyError):
                raise ParseError("bad field", pos + 2 + i) from None
        pos += count + 1
        return rows

    try:
        nodes = section("nodes", 3, [float] * 3)
        tets = section("tets", 5, [int] * 5)
        faces = section("faces", 4, [int, int, int, lambda s: int(BoundaryTag[s])])
    except IndexError:
        raise ParseError("truncated dump", len(lines)) from None
    tets = np.array(tets, dtype=np.int64).reshape(-1, 5)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 4)
    return TetMesh(np.array(nodes).reshape(-1, 3), tets[:, :4], tets[:, 4], faces[:, :3], faces[:, 3])


def meshes_equal(a, b, atol=0.0):
    return (
        a.vertices.shape == b.vertices.shape
        and np.allclose(a.vertices, b.vertices, rtol=0, atol=atol)
        and np.array_equal(a.tets, b.tets)
        and np.array_equal(a.regions, b.regions)
        and np.array_equal(a.faces, b.faces)
        and np.array_equal(a.face_tags, b.face_tags)
    )


def project_to_boundary(points, mesh, tag=BoundaryTag.SCALP, candidates=16):
    """Move points radially (along the ray from the origin) onto tagged faces.

    Used to put electrodes defined on a true sphere onto the faceted scalp of
    a shell mesh.  Only meaningful for boundaries that are star-shaped with
    respect to the origin.
    """
    from scipy.spatial import cKDTree

    faces = mesh.boundary_faces(tag)
    if len(faces) == 0:
        raise EmptyBoundaryError(f"mesh has no {BoundaryTag(tag).name} faces")
    tri = mesh.vertices[faces]
    c = tri.mean(axis=1)
    tree = cKDTree(c / np.linalg.norm(c, axis=1)[:, None])
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(pts)
    k = min(candidates, len(faces))
    for i, p in enumerate(pts):
        d = p / np.linalg.norm(p)
        _, near = tree.query(d, k=k)
        for cand in (np.atleast_1d(near), np.arange(len(faces))):
            t = _ray_hits(d, tri[cand])
            if t is not None:
                out[i] = t * d
                break
        else:
            raise EmptyBoundaryError(f"ray through point {i} misses the {BoundaryTag(tag).name} surface")
    return out


def _ray_hits(d, tri):
    # Moller-Trumbore against a batch of triangles, ray from the origin
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = -tri[:, 0]
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = (qv @ d) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    eps = 1e-12
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 0)
    if not hit.any():
        return None
    return float(t[np.nonzero(hit)[0][0]])
