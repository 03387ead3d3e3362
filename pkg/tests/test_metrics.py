import numpy as np
import pytest

from conftest import make_shape
from shapedelta.delta import compute_delta, identity_delta, match_shapes
from shapedelta.geometry import batched_grid_chamfer, chamfer_distance
from shapedelta.metrics import (
    GEOMETRIC,
    STRUCTURAL,
    DistanceCache,
    NeighborhoodTable,
    build_neighborhoods,
    generation_errors,
    geometric_distance,
    reconstruction_error,
    sample_shape_points,
    shape_seed,
    structural_distance,
    transfer_error,
)
from shapedelta.shape import Part


def translated(shape, t):
    def move(p):
        return Part(np.add(p.center, (t, 0, 0)), p.quat, p.extents, p.semantic, [move(c) for c in p.children])
    return make_shape(move(shape.root))


def test_geometric_self_zero(chair_group):
    s = chair_group.shapes[9]
    assert geometric_distance(s, s, seed=3) == 0.0
    assert DistanceCache(3).geometric(s, s) == 0.0


def test_geometric_matches_independent_sampling(chair_group):
    a, b = chair_group.shapes[1], chair_group.shapes[60]
    pa = sample_shape_points(a, 2048, shape_seed(a, 7))
    pb = sample_shape_points(b, 2048, shape_seed(b, 7))
    ref = chamfer_distance(pa, pb)
    assert geometric_distance(a, b, 7) == pytest.approx(ref, rel=1e-12)
    assert DistanceCache(7).geometric(a, b) == pytest.approx(ref, rel=1e-12)


def test_geometric_symmetric_within_two_percent(chair_group):
    rng = np.random.default_rng(0)
    for _ in range(10):
        i, j = rng.integers(0, 96, 2)
        a, b = chair_group.shapes[i], chair_group.shapes[j]
        dab, dba = geometric_distance(a, b, 1), geometric_distance(b, a, 1)
        assert abs(dab - dba) <= 0.02 * max(dab, dba) + 1e-15


def test_geometric_monotone_in_translation(chair_group):
    s = chair_group.shapes[20]
    ds = [geometric_distance(s, translated(s, t), 0) for t in (0.1, 0.2, 0.4)]
    assert ds[0] < ds[1] < ds[2]


def test_structural_definitions(chair_group):
    s = chair_group.shapes[0]
    assert structural_distance(s, s) == 0.0
    # variant 1 differs from 0 only in the stretcher layout
    t = chair_group.shapes[1]
    m = match_shapes(s, t)
    assert structural_distance(s, t) == m.num_unmatched / s.num_parts
    assert structural_distance(s, t) * s.num_parts == pytest.approx(structural_distance(t, s) * t.num_parts)


def test_fast_grid_chamfer_agrees_with_exact():
    rng = np.random.default_rng(3)
    xs, ys = rng.normal(size=(4, 96, 3)), rng.normal(size=(3, 96, 3))
    exact = batched_grid_chamfer(xs, ys)
    assert np.allclose(batched_grid_chamfer(xs, ys, exact=False), exact, rtol=0, atol=1e-12)
    assert batched_grid_chamfer(xs[:1], xs[:1])[0, 0] == 0.0


def test_structural_matches_exact_matching(chair_group):
    shapes = chair_group.shapes
    for i in range(0, 96, 7):
        for j in range(0, 96, 5):
            m = match_shapes(shapes[i], shapes[j], with_cost=False, exact=True)
            assert structural_distance(shapes[i], shapes[j]) == m.num_unmatched / shapes[i].num_parts


def test_structural_one_extra_leaf(chair_group):
    s = chair_group.shapes[3]  # no stretcher
    base_id = next(i for i, p in enumerate(s.parts) if p.semantic == "base")
    base = s.parts[base_id]
    extra = Part((0, 0.1, 0), (1, 0, 0, 0), (0.2, 0.015, 0.01), "stretcher_bar")

    def rebuild(p):
        if p is base:
            return p.with_children(p.children + (extra,))
        return p.with_children([rebuild(c) for c in p.children])

    bigger = make_shape(rebuild(s.root))
    assert structural_distance(s, bigger) == 1 / s.num_parts


def test_neighborhoods_sorted_and_sized(chair_group):
    shapes = list(chair_group.shapes[:30])
    table = build_neighborhoods(shapes, 20, STRUCTURAL)
    assert all(len(lst) == 20 for lst in table.neighbors)
    for i, lst in enumerate(table.neighbors):
        ds = [d for _, d in lst]
        assert ds == sorted(ds)
        assert i not in [j for j, _ in lst]
    assert table.radius == pytest.approx(np.mean([d for lst in table.neighbors for _, d in lst]))
    small = build_neighborhoods(shapes[:5], 20, STRUCTURAL)
    assert all(len(lst) == 4 for lst in small.neighbors)


def test_neighborhoods_exhaustive_geometric(chair_group):
    shapes = list(chair_group.shapes[::12])
    table = build_neighborhoods(shapes, 3, GEOMETRIC, seed=2)
    for i, lst in enumerate(table.neighbors):
        ref = sorted((geometric_distance(shapes[i], shapes[j], 2), j) for j in range(len(shapes)) if j != i)[:3]
        assert [j for _, j in ref] == [j for j, _ in lst]
        assert np.allclose([d for d, _ in ref], [d for _, d in lst], rtol=1e-12)


def test_duplicate_is_nearest(chair_group):
    shapes = [chair_group.shapes[0], chair_group.shapes[40], chair_group.shapes[0], chair_group.shapes[77]]
    table = build_neighborhoods(shapes, 2, GEOMETRIC)
    assert table.neighbors[0][0] == (2, 0.0)


def test_table_round_trip(tmp_path, chair_group):
    table = build_neighborhoods(list(chair_group.shapes[:6]), 3, STRUCTURAL, split="test")
    table.save(tmp_path / "t.json")
    back = NeighborhoodTable.load(tmp_path / "t.json")
    assert back == table
    assert '"r_N"' in (tmp_path / "t.json").read_text()


def test_reconstruction_error_cases(chair_group):
    a, b = chair_group.shapes[0], chair_group.shapes[50]
    assert reconstruction_error([(a, a), (b, b)], 1.0, GEOMETRIC) == 0.0
    d = geometric_distance(a, b)
    assert reconstruction_error([(a, b)], d, GEOMETRIC) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        reconstruction_error([(a, b)], 0.0, GEOMETRIC)


def test_identity_reconstruction_normalization(chair_group):
    shapes = list(chair_group.shapes[:24])
    table = build_neighborhoods(shapes, 5, GEOMETRIC)
    pairs = [(shapes[j], shapes[i]) for i in range(len(shapes)) for j in table.neighbor_ids(i)]
    assert reconstruction_error(pairs, table.radius, GEOMETRIC) == pytest.approx(1.0, rel=1e-12)
    # structural: the unmatched ratio is normalized by the target's part count
    table = build_neighborhoods(shapes, 5, STRUCTURAL)
    pairs = [(shapes[j], shapes[i]) for i in range(len(shapes)) for j in table.neighbor_ids(i)]
    ratio = np.mean([match_shapes(t, s).num_unmatched / t.num_parts for t, s in pairs])
    assert reconstruction_error(pairs, table.radius, STRUCTURAL) == pytest.approx(ratio / table.radius, rel=1e-12)


def test_generation_errors_oracle(chair_group):
    shapes = list(chair_group.shapes[:20])
    metric = GEOMETRIC
    table = build_neighborhoods(shapes, 4, metric)
    srcs = [0, 5, 11]
    nbrs = [[shapes[j] for j in table.neighbor_ids(i)] for i in srcs]
    e = generation_errors([shapes[i] for i in srcs], nbrs, nbrs, table.radius, metric)
    assert e == (0.0, 0.0, 0.0)
    # identity: one generated sample, the source itself
    e_q, e_c, e_qc = generation_errors([shapes[i] for i in srcs], [[shapes[i]] for i in srcs], nbrs,
                                       table.radius, metric)
    nearest = np.mean([table.neighbors[i][0][1] for i in srcs]) / table.radius
    mean_nb = np.mean([np.mean([d for _, d in table.neighbors[i]]) for i in srcs]) / table.radius
    assert e_q == pytest.approx(nearest, rel=1e-12)
    assert e_c == pytest.approx(mean_nb, rel=1e-12)
    assert e_qc == pytest.approx(e_q + e_c, rel=1e-12)
    assert e_qc >= max(e_q, e_c) >= 0
    with pytest.raises(ValueError, match="empty sample set"):
        generation_errors([shapes[0]], [[]], nbrs[:1], table.radius, metric)


def test_transfer_error_cases(chair_group):
    a, b = chair_group.shapes[2], chair_group.shapes[70]
    truth = compute_delta(a, b)
    assert transfer_error(truth, truth, a, 1.0, STRUCTURAL) == 0.0
    ident = identity_delta(a)
    e1 = transfer_error(ident, truth, a, 0.5, GEOMETRIC)
    e2 = transfer_error(truth, ident, a, 0.5, GEOMETRIC)
    assert e1 == pytest.approx(e2, rel=0.02)
    assert transfer_error(ident, truth, a, 1.0, STRUCTURAL) == pytest.approx(structural_distance(b, a))


def test_cache_is_deterministic(chair_group):
    a, b = chair_group.shapes[4], chair_group.shapes[44]
    assert DistanceCache(5).geometric(a, b) == DistanceCache(5).geometric(b, a)
