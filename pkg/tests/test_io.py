import json
import math

import numpy as np
import pytest

from se3reg.cloud import PointCloud
from se3reg.errors import IndexOutOfRange, ParseError, UnsupportedFormat
from se3reg.io import (
    format_motion,
    read_correspondences,
    read_edges,
    read_ply,
    read_trajectory,
    read_view_graph,
    write_ply,
    write_trajectory,
    write_view_graph,
)
from se3reg.liegroup import RigidMotion, is_rotation, random_rotation
from se3reg.synthbench import generate_views, make_model

ASCII_PLY = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
property uchar red
element face 0
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 128
0 1 0.5 0
"""


def test_read_ascii_ply(tmp_path):
    path = tmp_path / "a.ply"
    path.write_text(ASCII_PLY)
    c = read_ply(path)
    assert len(c) == 3
    np.testing.assert_array_equal(c.points[2], [0, 1, 0.5])
    assert c.normals is None


@pytest.mark.parametrize("binary", [False, True])
def test_ply_roundtrip_is_exact(tmp_path, rng, binary):
    c = PointCloud(rng.normal(size=(50, 3)) * 10.0 ** rng.uniform(-8, 8, size=(50, 1)),
                   rng.normal(size=(50, 3)))
    path = tmp_path / "c.ply"
    write_ply(c, path, binary=binary)
    back = read_ply(path)
    assert np.array_equal(back.points, c.points)
    assert np.array_equal(back.normals, c.normals)


def test_read_float32_binary(tmp_path):
    pts = np.array([[1.5, 2.25, -3.0], [0.1, 0.2, 0.3]], dtype="<f4")
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    path = tmp_path / "f.ply"
    path.write_bytes(header.encode() + pts.tobytes())
    np.testing.assert_array_equal(read_ply(path).points, pts.astype(float))


def test_truncated_binary_reports_bytes(tmp_path, rng):
    c = PointCloud(rng.normal(size=(10, 3)))
    path = tmp_path / "t.ply"
    write_ply(c, path, binary=True)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(ParseError, match="expected 240 bytes, got 233"):
        read_ply(path)


def test_big_endian_is_unsupported(tmp_path):
    path = tmp_path / "b.ply"
    path.write_text(ASCII_PLY.replace("ascii", "binary_big_endian"))
    with pytest.raises(UnsupportedFormat):
        read_ply(path)


@pytest.mark.parametrize("text, match", [
    ("hello\n", "magic"),
    (ASCII_PLY.replace("property float z\n", ""), "'z'"),
    (ASCII_PLY.replace("1 0 0 128", "1 0 zero 128"), "line 13"),
    (ASCII_PLY.replace("0 1 0.5 0\n", ""), "line 14"),
    (ASCII_PLY.replace("element vertex 3", "element vertex x"), "line 4"),
])
def test_malformed_ply(tmp_path, text, match):
    path = tmp_path / "m.ply"
    path.write_text(text)
    with pytest.raises(ParseError, match=match):
        read_ply(path)


def test_integer_coordinates_unsupported(tmp_path):
    path = tmp_path / "i.ply"
    path.write_text(ASCII_PLY.replace("property float x", "property int x"))
    with pytest.raises(UnsupportedFormat):
        read_ply(path)


@pytest.fixture
def clouds(rng):
    return PointCloud(rng.normal(size=(20, 3))), PointCloud(rng.normal(size=(25, 3)))


def test_index_correspondences(tmp_path, clouds):
    src, dst = clouds
    path = tmp_path / "c.txt"
    path.write_text("# src dst\n" + "\n".join(f"{i} {i + 2}" for i in range(20)) + "\n")
    c = read_correspondences(path, src, dst)
    assert len(c) == 20
    np.testing.assert_array_equal(c.q, src.points)
    np.testing.assert_array_equal(c.p, dst.points[2:22])


def test_identity_index_file(tmp_path, clouds):
    src, _ = clouds
    path = tmp_path / "c.txt"
    path.write_text("\n".join(f"{i} {i}" for i in range(20)))
    assert len(read_correspondences(path, src, src)) == 20


def test_json_matches_index_form(tmp_path, clouds):
    src, dst = clouds
    idx = [(3, 7), (0, 1), (19, 24), (5, 5)]
    (tmp_path / "c.txt").write_text("\n".join(f"{i} {j}" for i, j in idx))
    doc = {"correspondences": [{"src": src.points[i].tolist(), "dst": dst.points[j].tolist()}
                               for i, j in idx]}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    a = read_correspondences(tmp_path / "c.txt", src, dst)
    b = read_correspondences(tmp_path / "c.json")
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q)


@pytest.mark.parametrize("text, err", [
    ("", ParseError),
    ("0 0\n1 1\n", ParseError),
    ("0 0\n1 1\n2 30\n", IndexOutOfRange),
    ("0 0\n-1 1\n2 3\n", IndexOutOfRange),
    ("0 0 0\n", ParseError),
    ("a b\n", ParseError),
    ('{"correspondences": [{"src": [0, 0]}]}', ParseError),
    ('{"correspondences": ', ParseError),
])
def test_bad_correspondence_files(tmp_path, clouds, text, err):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(err):
        read_correspondences(path, *clouds)


@pytest.mark.parametrize("full", [False, True])
def test_trajectory_roundtrip(tmp_path, rng, full):
    motions = [RigidMotion(random_rotation(rng), rng.normal(size=3) * 100) for _ in range(5)]
    path = tmp_path / "traj.txt"
    text = write_trajectory(motions, path, full=full)
    assert all(len(line.split()) == (16 if full else 12) for line in text.splitlines())
    back = read_trajectory(path)
    for a, b in zip(back, motions):
        assert np.array_equal(a.matrix(), b.matrix())
        assert is_rotation(a.rotation)


def test_trajectory_rejects_non_rotation(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("2 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(ParseError, match="line 1"):
        read_trajectory(path)
    path.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ParseError):
        read_trajectory(path)


def test_format_motion():
    text = format_motion(RigidMotion(np.eye(3), [0.1, 0, 0]))
    assert text.splitlines()[0] == "1 0 0 0.10000000000000001"
    assert len(text.splitlines()) == 4


def test_view_graph_roundtrip(tmp_path, rng):
    prob = generate_views(make_model("blobs", 300), 3, sigma_rel=0.01, seed=1,
                          corrs_per_edge=30)
    g = prob.graph.with_motions([RigidMotion(random_rotation(rng), rng.normal(size=3))
                                 for _ in range(3)])
    write_view_graph(g, tmp_path / "g.json")
    back, has = read_view_graph(tmp_path / "g.json")
    assert has and back.n == 3
    for a, b in zip(back.motions, g.motions):
        assert np.array_equal(a.matrix(), b.matrix())
    for a, b in zip(back.edges, g.edges):
        assert (a.i, a.j) == (b.i, b.j)
        assert np.array_equal(a.corrs.p, b.corrs.p) and np.array_equal(a.corrs.q, b.corrs.q)


def test_view_graph_with_files(tmp_path, rng):
    scans = [PointCloud(rng.normal(size=(10, 3))) for _ in range(3)]
    for k, s in enumerate(scans):
        write_ply(s, tmp_path / f"s{k}.ply")
    (tmp_path / "e01.txt").write_text("0 1\n1 2\n2 3\n3 4\n")
    rows = np.hstack([scans[1].points[:4], scans[2].points[:4]])
    np.savetxt(tmp_path / "e12.txt", rows, fmt="%.17g")
    doc = {"n": 3, "scans": ["s0.ply", "s1.ply", "s2.ply"],
           "edges": [{"i": 0, "j": 1, "correspondences": "e01.txt"},
                     {"i": 2, "j": 1, "correspondences": rows[:, [3, 4, 5, 0, 1, 2]].tolist()}]}
    (tmp_path / "g.json").write_text(json.dumps(doc))
    g, has = read_view_graph(tmp_path / "g.json")
    assert not has
    np.testing.assert_array_equal(g.edges[0].corrs.p, scans[0].points[:4])
    np.testing.assert_array_equal(g.edges[0].corrs.q, scans[1].points[1:5])
    assert (g.edges[1].i, g.edges[1].j) == (1, 2)
    np.testing.assert_array_equal(g.edges[1].corrs.p, scans[1].points[:4])


@pytest.mark.parametrize("doc, err", [
    ({"n": 2, "edges": [], "extra": 1}, ParseError),
    ({"edges": []}, ParseError),
    ({"n": 2, "edges": [{"i": 0, "j": 5, "correspondences": [[0] * 6] * 3}]}, IndexOutOfRange),
    ({"n": 2, "edges": [{"i": 0, "j": 1, "correspondences": [[0] * 6] * 2}]}, ParseError),
    ({"n": 2, "motions": [[1] * 16], "edges": []}, ParseError),
])
def test_bad_view_graphs(tmp_path, doc, err):
    (tmp_path / "g.json").write_text(json.dumps(doc))
    with pytest.raises(err):
        read_view_graph(tmp_path / "g.json")


def test_read_edges(tmp_path):
    (tmp_path / "e.txt").write_text("1 0\n1 2\n")
    assert read_edges(tmp_path / "e.txt", 3) == [(0, 1), (1, 2)]
    with pytest.raises(IndexOutOfRange):
        read_edges(tmp_path / "e.txt", 2)
