import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegoc import fileio
from eegoc.errors import ParseError
from eegoc.mesh import extract_cortex

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, st.floats(0, 1e6)), min_size=1, max_size=30))
def test_data_round_trip(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("d") / "data.txt"
    d = np.array([r[0] for r in rows])
    s = np.array([r[1] for r in rows])
    fileio.write_data(p, d, s)
    d2, s2 = fileio.read_data(p)
    assert np.array_equal(d, d2) and np.array_equal(s, s2)


@pytest.mark.parametrize("text, line", [
    ("0 1.0\n", 1),
    ("0 1.0 0.1\n0 2.0 0.1\n", 2),
    ("0 1.0 x\n", 1),
    ("# only a comment\n", 1),
    ("1 1.0 0.0\n2 1.0 0.0\n", 1),
])
def test_data_parse_errors(tmp_path, text, line):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(ParseError) as err:
        fileio.read_data(p)
    assert err.value.line == line


def test_data_comments_and_order(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# header\n1 2.5 0.1  # second\n\n0 -1 0\n")
    d, s = fileio.read_data(p)
    assert np.array_equal(d, [-1.0, 2.5]) and np.array_equal(s, [0.0, 0.1])


def test_field_round_trip(tmp_path, rng):
    v = rng.standard_normal(57) * 1e-7
    p = tmp_path / "u.field"
    fileio.write_field(p, v, "u")
    name, w = fileio.read_field(p)
    assert name == "u" and np.array_equal(v, w)
    lines = p.read_text().splitlines()
    assert lines[0] == fileio.FIELD_HEADER and lines[1] == "u 57"


def test_field_errors(tmp_path):
    p = tmp_path / "f"
    p.write_text("nope\n")
    with pytest.raises(ParseError):
        fileio.read_field(p)
    p.write_text(fileio.FIELD_HEADER + "\nu 3\n0 1\n2 1\n")
    with pytest.raises(ParseError) as err:
        fileio.read_field(p)
    assert err.value.line == 4


def test_vtk_volume_structure(tmp_path, shell0):
    u = np.arange(shell0.n_nodes, dtype=float) / 7
    p = tmp_path / "v.vtk"
    fileio.write_vtk_volume(p, shell0, {"u": u})
    out = fileio.read_vtk(p)
    assert np.array_equal(out["points"], shell0.vertices)
    assert np.array_equal(np.array(out["cells"]), shell0.tets)
    assert np.all(out["cell_types"] == 10)
    assert np.array_equal(out["point_data"]["u"], u)
    assert np.array_equal(out["cell_data"]["region"], shell0.regions)


def test_vtk_surface_structure(tmp_path, shell0):
    surf = extract_cortex(shell0)
    p = tmp_path / "s.vtk"
    fileio.write_vtk_surface(p, surf, {"f": np.ones(surf.n_nodes)})
    out = fileio.read_vtk(p)
    assert len(out["cells"]) == len(surf.triangles)
    assert np.all(out["cell_types"] == 5)
    assert out["cell_data"] == {}


def test_vtk_rejects_wrong_length(tmp_path, shell0):
    with pytest.raises(ValueError):
        fileio.write_vtk_volume(tmp_path / "x.vtk", shell0, {"u": np.ones(3)})


def test_vtk_reader_rejects_truncation(tmp_path, shell0):
    p = tmp_path / "v.vtk"
    fileio.write_vtk_volume(p, shell0)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(ParseError):
        fileio.read_vtk(p)


def test_json_stable(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    fileio.write_json(a, {"b": 1, "a": [1.5, None]})
    fileio.write_json(b, {"a": [1.5, None], "b": 1})
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().endswith("}\n")
