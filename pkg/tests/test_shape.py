import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_shape, random_part
from shapedelta.geometry import (
    chamfer_distance,
    quat_canonical,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
)
from shapedelta.shape import (
    Part,
    ShapeFormatError,
    ValidationError,
    box_distance,
    read_shape,
    sample_box_points,
    sample_shape_points,
    shape_to_dict,
    write_shape,
)

unit = st.floats(-1.0, 1.0, allow_nan=False)


def brute_chamfer(a, b):
    """Independent double-loop reference."""
    def one_way(x, y):
        total = 0.0
        for p in x:
            total += min(sum((pi - qi) ** 2 for pi, qi in zip(p, q)) for q in y)
        return total / len(x)
    return one_way(a, b) + one_way(b, a)


def as_point_set(pts, decimals=9):
    return sorted(map(tuple, np.round(np.asarray(pts), decimals) + 0.0))


# -- quaternions and parts ----------------------------------------------------

@given(st.lists(unit, min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_quat_canonical_is_unit_with_nonnegative_scalar(v):
    q = quat_canonical(v)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12
    assert q[0] >= 0.0
    # same rotation as the input
    assert np.allclose(quat_to_matrix(q), quat_to_matrix(np.asarray(v) / np.linalg.norm(v)), atol=1e-12)


def test_quat_matrix_matches_axis_angle():
    q = quat_from_axis_angle([0, 0, 1], math.pi / 2)
    assert np.allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    q2 = quat_mul(q, q)
    assert np.allclose(quat_to_matrix(q2) @ [1, 0, 0], [-1, 0, 0], atol=1e-12)


def test_part_rejects_bad_quaternion_and_extents():
    with pytest.raises(ValidationError):
        Part((0, 0, 0), (1.0, 0.1, 0, 0), (1, 1, 1), "seat")
    with pytest.raises(ValidationError):
        Part((0, 0, 0), (1.0, 0, 0, 0), (1, -0.1, 1), "seat")


def test_part_canonicalizes_double_cover():
    p = Part((0, 0, 0), (-1.0, 0, 0, 0), (1, 1, 1), "seat")
    assert p.quat == (1.0, 0.0, 0.0, 0.0)


def test_taxonomy_violation_is_rejected():
    leg = Part((0, 0, 0), (1, 0, 0, 0), (0.1, 0.1, 0.1), "leg")
    with pytest.raises(ValidationError, match="not allowed"):
        make_shape(Part((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), "chair", (leg,)))


# -- box grid sampling ----------------------------------------------------------

def test_unit_box_grid_m2_is_cube_corners():
    p = Part((0, 0, 0), (1, 0, 0, 0), (0.5, 0.5, 0.5), "seat")
    pts = sample_box_points(p, 2)
    assert pts.shape == (24, 3)
    assert set(np.unique(pts)) == {-0.5, 0.5}
    assert len(set(map(tuple, pts))) == 8


@pytest.mark.parametrize("m", [2, 3, 4, 7])
def test_grid_point_count(m):
    p = random_part(np.random.default_rng(m))
    assert sample_box_points(p, m).shape == (6 * m * m, 3)


def test_grid_sampling_rejects_small_m():
    with pytest.raises(ValueError):
        sample_box_points(random_part(np.random.default_rng(0)), 1)


def test_grid_sampling_is_deterministic():
    rng = np.random.default_rng(1)
    p = random_part(rng)
    a = sample_box_points(p, 4)
    b = sample_box_points(Part(p.center, p.quat, p.extents, p.semantic), 4)
    assert a.tobytes() == b.tobytes()


def test_cube_rotated_90_about_z_gives_same_point_set():
    c = (0.2, -0.1, 0.3)
    a = Part(c, (1, 0, 0, 0), (1, 1, 1), "seat")
    b = Part(c, tuple(quat_from_axis_angle([0, 0, 1], math.pi / 2)), (1, 1, 1), "seat")
    assert as_point_set(sample_box_points(a, 4)) == as_point_set(sample_box_points(b, 4))


def test_grid_points_lie_on_box_faces():
    rng = np.random.default_rng(2)
    p = random_part(rng)
    local = (sample_box_points(p, 5) - p.center) @ quat_to_matrix(p.quat)
    scaled = np.abs(local) / np.asarray(p.extents)
    assert np.all(scaled <= 1 + 1e-9)
    assert np.allclose(scaled.max(axis=1), 1.0, atol=1e-9)


# -- chamfer --------------------------------------------------------------------

def test_chamfer_single_points():
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_identical_is_zero():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_distance(pts, pts) == 0.0


def test_chamfer_empty_raises():
    with pytest.raises(ValueError, match="empty point set"):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])


@pytest.mark.parametrize("seed", range(10))
def test_chamfer_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a.tolist(), b.tolist()), rel=1e-12)


def test_chamfer_kdtree_path_matches_dense():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(600, 3)), rng.normal(size=(500, 3))
    d = ((a[:, None] - b[None]) ** 2).sum(-1)
    assert chamfer_distance(a, b) == pytest.approx(d.min(1).mean() + d.min(0).mean(), rel=1e-10)


@given(st.integers(0, 2 ** 32 - 1))
def test_chamfer_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


# -- box distance ---------------------------------------------------------------

def test_box_distance_self_zero():
    p = random_part(np.random.default_rng(4))
    assert box_distance(p, p) == 0.0


@pytest.mark.parametrize("t", [1e-3, 1e-2, 0.05])
def test_box_distance_small_translation(t):
    # each grid point pairs with its own translate, in both directions: d = 2 t^2
    p = Part((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), "seat")
    q = Part((t, 0, 0), (1, 0, 0, 0), (1, 1, 1), "seat")
    a, b = sample_box_points(p), sample_box_points(q)
    assert box_distance(p, q) == pytest.approx(brute_chamfer(a.tolist(), b.tolist()), rel=1e-10)
    assert box_distance(p, q) == pytest.approx(2 * t * t, rel=1e-9)


@given(st.integers(0, 2 ** 32 - 1))
def test_box_distance_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    p, q = random_part(rng), random_part(rng)
    assert box_distance(p, q) == pytest.approx(box_distance(q, p), rel=1e-12, abs=1e-15)
    rot = quat_canonical(rng.normal(size=4))
    shift = rng.normal(size=3)
    m = quat_to_matrix(rot)

    def move(part):
        return Part.from_params(m @ np.asarray(part.center) + shift, quat_mul(rot, part.quat),
                                part.extents, part.semantic)

    assert box_distance(move(p), move(q)) == pytest.approx(box_distance(p, q), abs=1e-6)


# -- whole-shape sampling ------------------------------------------------------

def test_shape_sampling_count_and_determinism(chair_group):
    s = chair_group.shapes[17]
    a = sample_shape_points(s, 2048, 5)
    assert a.shape == (2048, 3)
    assert a.tobytes() == sample_shape_points(s, 2048, 5).tobytes()
    assert a.tobytes() != sample_shape_points(s, 2048, 6).tobytes()


def test_single_leaf_points_on_surface():
    rng = np.random.default_rng(5)
    leaf = random_part(rng, "seat_surface")
    seat = Part((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), "seat", (leaf,))
    s = make_shape(Part((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), "chair", (seat,)))
    pts = sample_shape_points(s, 500, 0)
    local = np.abs((pts - leaf.center) @ quat_to_matrix(leaf.quat)) / np.asarray(leaf.extents)
    assert np.all(np.abs(local.max(axis=1) - 1.0) <= 1e-9)


def test_two_identical_leaves_split_evenly():
    n = 2048
    a = Part((-2, 0, 0), (1, 0, 0, 0), (0.3, 0.2, 0.1), "leg")
    b = Part((2, 0, 0), (1, 0, 0, 0), (0.3, 0.2, 0.1), "leg")
    base = Part((0, 0, 0), (1, 0, 0, 0), (2.3, 0.2, 0.1), "base", (a, b))
    s = make_shape(Part((0, 0, 0), (1, 0, 0, 0), (2.3, 0.2, 0.1), "chair", (base,)))
    sigma = math.sqrt(n * 0.25)
    for seed in range(5):
        left = int((sample_shape_points(s, n, seed)[:, 0] < 0).sum())
        assert abs(left - n / 2) <= 4 * sigma


def test_zero_area_shape_raises():
    leaf = Part((0, 0, 0), (1, 0, 0, 0), (0, 0, 0), "seat_surface")
    seat = Part((0, 0, 0), (1, 0, 0, 0), (0, 0, 0), "seat", (leaf,))
    s = make_shape(Part((0, 0, 0), (1, 0, 0, 0), (0, 0, 0), "chair", (seat,)))
    with pytest.raises(ValidationError):
        sample_shape_points(s, 10, 0)


def test_sampling_ignores_sibling_order(chair_group):
    s = chair_group.shapes[5]
    flipped = make_shape(s.root.with_children(reversed(s.root.children)))
    assert sample_shape_points(s, 256, 3).tobytes() == sample_shape_points(flipped, 256, 3).tobytes()


# -- file I/O ---------------------------------------------------------------------

def test_shape_round_trip(tmp_path, chair_group):
    for v in (0, 41, 95):
        s = chair_group.shapes[v]
        write_shape(s, tmp_path / "s.json")
        back = read_shape(tmp_path / "s.json")
        assert back.same_as(s, tol=1e-12)
        assert back.ordered_key == s.ordered_key


def test_bad_quaternion_in_file_names_node(tmp_path, chair_group):
    d = shape_to_dict(chair_group.shapes[0])
    d["root"]["children"][1]["box"]["q"] = [1.0, 0.5, 0.0, 0.0]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ValidationError, match=r"root/children\[1\]"):
        read_shape(tmp_path / "s.json")


def test_truncated_file_is_parse_error(tmp_path, chair_group):
    write_shape(chair_group.shapes[0], tmp_path / "s.json")
    text = (tmp_path / "s.json").read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(ShapeFormatError):
        read_shape(tmp_path / "t.json")


def test_missing_field_names_path(tmp_path, chair_group):
    d = shape_to_dict(chair_group.shapes[0])
    del d["root"]["children"][0]["box"]["r"]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ShapeFormatError, match=r"root/children\[0\]"):
        read_shape(tmp_path / "s.json")


def test_part_ids_are_preorder(chair_group):
    s = chair_group.shapes[30]
    order = list(s.root.walk())
    assert all(a is b for a, b in zip(order, s.parts))
    for i, p in enumerate(s.parent_ids):
        if p >= 0:
            assert p < i and any(c is s.parts[i] for c in s.parts[p].children)
    assert sorted(itertools.chain.from_iterable(s.child_ids)) == list(range(1, s.num_parts))
