import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_shape, random_part
from shapedelta.delta import (
    DELETE,
    Addition,
    PartDelta,
    ShapeDelta,
    apply_delta,
    compute_delta,
    delta_to_dict,
    identity_delta,
)
from shapedelta.model import (
    DeltaVAE,
    LatentPosterior,
    LossWeights,
    ModelConfig,
    decode_batch,
    decode_delta,
    encode_delta,
    encode_source,
    generate_edits,
    interpolate_edits,
    kl_divergence,
    make_pair_data,
    paired_chamfer,
    reconstruct,
    sample_latent,
    transfer_edit,
)
from shapedelta.geometry import chamfer_distance
from shapedelta.nn import check_parameter_gradients
from shapedelta.shape import Part
from shapedelta.train import TrainConfig, load_model, model_checkpoint, parse_config, train

F64 = ModelConfig(feature_width=16, dtype="float64")


@pytest.fixture(scope="module")
def model(taxonomy):
    return DeltaVAE(taxonomy, F64, seed=0)


def permuted(shape, rng):
    def rec(p):
        kids = [rec(c) for c in p.children]
        order = rng.permutation(len(kids))
        return p.with_children([kids[i] for i in order])
    return make_shape(rec(shape.root))


def permuted_with_delta(shape, delta, rng):
    """Shuffle siblings everywhere and carry the delta's part ids along."""
    ids = {id(p): i for i, p in enumerate(shape.parts)}
    new_order = []

    def rec(p, record=True):
        if record:
            new_order.append(ids[id(p)])
        order = rng.permutation(len(p.children))
        return p.with_children([rec(p.children[i], record) for i in order])

    ps = make_shape(rec(shape.root))
    old_to_new = {old: new for new, old in enumerate(new_order)}
    actions = [None] * len(new_order)
    for old, a in enumerate(delta.actions):
        actions[old_to_new[old]] = a
    adds = [Addition(a.anchor_kind, old_to_new[a.anchor_id] if a.anchor_kind == "source" else a.anchor_id,
                     rec(a.subtree, record=False)) for a in delta.additions]
    return ps, ShapeDelta(tuple(actions), tuple(adds), ps.ordered_key)


def same_delta(a, b, tol=1e-9) -> bool:
    """Equal structure; box numbers equal up to ``tol`` (batched BLAS may differ in the last ulps)."""
    da, db = delta_to_dict(a.delta), delta_to_dict(b.delta)

    def flat(x):
        if isinstance(x, dict):
            return [(k, flat(v)) for k, v in sorted(x.items())]
        if isinstance(x, list):
            return [flat(v) for v in x]
        return x

    def close(x, y):
        if isinstance(x, float) or isinstance(y, float):
            return abs(x - y) <= tol
        if isinstance(x, (list, tuple)):
            return len(x) == len(y) and all(close(u, v) for u, v in zip(x, y))
        return x == y

    return close(flat(da), flat(db))


def two_part_pair():
    rng = np.random.default_rng(3)
    seat = random_part(rng, "seat")
    src = make_shape(random_part(rng, "chair", (seat,)))
    kid = random_part(rng, "seat_surface")
    tgt_seat = random_part(rng, "seat", (kid,))
    tgt = make_shape(random_part(rng, "chair", (tgt_seat,)))
    return src, compute_delta(src, tgt)


# -- source encoder ----------------------------------------------------------------

def test_single_part_tree_feature_is_box_feature(model):
    s = make_shape(Part((0, 0, 0), (1, 0, 0, 0), (0.5, 0.5, 0.5), "chair"))
    v_box, v_tree = encode_source(model, s)
    assert torch.equal(v_box, v_tree)


def test_source_encoding_sibling_invariant(model, chair_group):
    rng = np.random.default_rng(0)
    s = chair_group.shapes[41]
    p = permuted(s, rng)
    _, vt = encode_source(model, s)
    _, vp = encode_source(model, p)
    assert torch.allclose(vt[0], vp[0], atol=1e-12)


def test_identical_sibling_subtrees_identical_features(model, chair_group):
    s = chair_group.shapes[0]
    _, vt = encode_source(model, s)
    legs = [i for i, p in enumerate(s.parts) if p.semantic == "leg"]
    box = np.array([s.parts[i].box_params() for i in legs])
    # legs differ in position, so compare a pair of exactly equal subtrees instead
    twin = make_shape(s.root.with_children(s.root.children + (s.root.children[1],)))
    _, vt2 = encode_source(model, twin)
    a = 1 + sum(1 for _ in s.root.children[0].walk())
    b = len(s.parts)
    assert torch.equal(vt2[a], vt2[b])
    assert len(set(map(tuple, box))) == len(legs)


# -- delta encoder -----------------------------------------------------------------

def test_encode_delta_deterministic(model, chair_group):
    s = chair_group.shapes[3]
    a = encode_delta(model, s, identity_delta(s))
    b = encode_delta(model, s, identity_delta(s))
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_variance, b.log_variance)


@pytest.mark.parametrize("seed", range(4))
def test_encode_delta_sibling_invariant(model, chair_group, seed):
    rng = np.random.default_rng(seed)
    i, j = map(int, rng.integers(0, 96, 2))
    src, tgt = chair_group.shapes[i], chair_group.shapes[j]
    a = encode_delta(model, src, compute_delta(src, tgt))
    d = compute_delta(src, tgt)
    ps, pd = permuted_with_delta(src, d, rng)
    assert apply_delta(ps, pd).content_key == apply_delta(src, d).content_key
    b = encode_delta(model, ps, pd)
    assert torch.allclose(a.mean, b.mean, atol=1e-10)
    assert torch.allclose(a.log_variance, b.log_variance, atol=1e-10)


def test_encode_delta_sees_part_deltas(model, chair_group):
    s = chair_group.shapes[10]
    d = identity_delta(s)
    acts = list(d.actions)
    acts[2] = PartDelta(dc=(0.05, 0.0, 0.0))
    d2 = dataclasses.replace(d, actions=tuple(acts))
    assert not torch.allclose(encode_delta(model, s, d).mean, encode_delta(model, s, d2).mean)


def test_encode_delta_rejects_unbound(model, chair_group):
    s = chair_group.shapes[10]
    d = compute_delta(chair_group.shapes[11], s)
    with pytest.raises(Exception):
        encode_delta(model, s, d)


# -- latent sampling and KL --------------------------------------------------------

def test_sample_latent_limits():
    post = LatentPosterior(torch.tensor([[1.0, -2.0]], dtype=torch.float64),
                           torch.full((1, 2), -200.0, dtype=torch.float64))
    assert torch.allclose(sample_latent(post, seed=1), post.mean, atol=1e-30)
    assert torch.equal(sample_latent(post, seed=3), sample_latent(post, seed=3))
    assert torch.equal(sample_latent(None, seed=3, count=4, width=5), sample_latent(None, seed=3, count=4, width=5))


def test_prior_sample_statistics():
    z = sample_latent(None, seed=0, count=10_000, width=8).numpy()
    sigma = 1 / np.sqrt(len(z))
    assert np.all(np.abs(z.mean(0)) <= 4 * sigma)
    assert np.all(np.abs(z.var(0) - 1) <= 0.1)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_kl_non_negative(mu, lv):
    post = LatentPosterior(torch.tensor(mu, dtype=torch.float64), torch.tensor(lv, dtype=torch.float64))
    assert float(kl_divergence(post)) >= 0.0


def test_kl_zero_at_prior():
    post = LatentPosterior(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64))
    assert torch.equal(kl_divergence(post), torch.zeros(2, dtype=torch.float64))


# -- differentiable chamfer --------------------------------------------------------

def test_paired_chamfer_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 20, 3)), rng.normal(size=(3, 15, 3))
    got = paired_chamfer(torch.tensor(a), torch.tensor(b)).numpy()
    ref = [chamfer_distance(x, y) for x, y in zip(a, b)]
    assert np.allclose(got, ref, rtol=1e-12)


# -- loss ---------------------------------------------------------------------------

def test_loss_terms_and_defaults(model, chair_group):
    assert LossWeights() == LossWeights(10.0, 0.05, 20.0, 0.1)
    data = [make_pair_data(chair_group.shapes[i], compute_delta(chair_group.shapes[i], chair_group.shapes[j]))
            for i, j in ((0, 5), (7, 90), (33, 33))]
    total, terms = model.loss(model.batch(data), variational=False)
    assert np.isfinite(float(total.detach()))
    assert set(terms) >= {"delta_box", "added", "type", "kl", "existence"}
    assert all(v >= 0 for v in terms.values())


def test_perfect_box_prediction_zero_box_loss():
    from shapedelta.model import box_distance_t
    box = torch.tensor([[0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 0.0, 0.4, 0.5, 0.6]], dtype=torch.float64)
    assert float(box_distance_t(box, box)) == 0.0


def test_loss_gradient_two_part_shape(taxonomy):
    src, delta = two_part_pair()
    m = DeltaVAE(taxonomy, F64, seed=1)
    b = m.batch([make_pair_data(src, delta)])
    res = check_parameter_gradients(m, lambda: m.loss(b, variational=False)[0], per_param=2, seed=0)
    assert res.checked > 20
    assert res.ok(1e-4), res


def test_training_loss_decreases(taxonomy, chair_group):
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 96, (100, 2))
    data = [make_pair_data(chair_group.shapes[i], compute_delta(chair_group.shapes[i], chair_group.shapes[j]))
            for i, j in idx]
    cfg = TrainConfig(feature_width=32, lr=1e-3, epochs=50, batch_size=100, variational=False)
    m = DeltaVAE(taxonomy, cfg.model_config(), seed=0)
    res = train(m, data, cfg)
    losses = [h["total"] for h in res.history]
    assert len(losses) == 50
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("flag", ["skip_connections", "group_norm", "leaf_classifier", "box_deltas"])
def test_ablations_train_and_decode(taxonomy, chair_group, flag, tmp_path):
    cfg = dataclasses.replace(TrainConfig(feature_width=16, epochs=1, batch_size=4, max_steps=3), **{flag: False})
    m = DeltaVAE(taxonomy, cfg.model_config(), seed=0)
    shapes = chair_group.shapes
    data = [make_pair_data(shapes[i], compute_delta(shapes[i], shapes[j])) for i, j in ((0, 50), (2, 3), (60, 1))]
    res = train(m, data, cfg, log_path=tmp_path / "log.jsonl")
    assert res.steps == 1  # three pairs, batch 4, one epoch
    out = decode_delta(m, shapes[0], torch.zeros(m.config.latent))
    apply_delta(shapes[0], out.delta)


def test_training_aborts_on_nan(taxonomy, chair_group):
    from shapedelta.train import TrainingError
    m = DeltaVAE(taxonomy, ModelConfig(feature_width=16), seed=0)
    with torch.no_grad():
        m.mean_head.weight.fill_(float("nan"))
    s = chair_group.shapes
    data = [make_pair_data(s[0], compute_delta(s[0], s[1]))]
    with pytest.raises(TrainingError, match="non-finite"):
        train(m, data, TrainConfig(feature_width=16, epochs=1, variational=False))


# -- decoding contract --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_untrained_decode_is_valid(taxonomy, chair_group, seed):
    m = DeltaVAE(taxonomy, ModelConfig(feature_width=16), seed=seed)
    srcs = [chair_group.shapes[k] for k in (0, 47, 95)]
    z = sample_latent(None, seed=seed, count=3, width=m.config.latent, dtype=m.dtype) * 3
    for s, out in zip(srcs, decode_batch(m, srcs, z)):
        assert len(out.delta.actions) == s.num_parts
        assert np.all((out.type_probs >= 0) & (out.type_probs <= 1))
        assert all(np.all((e >= 0) & (e <= 1)) for e in out.existence)
        assert out.delta.actions[0] is not DELETE
        res = apply_delta(s, out.delta)
        assert res.depth() <= m.config.max_depth


def test_decode_pure_and_batch_consistent(model, chair_group):
    s = chair_group.shapes[12]
    z = sample_latent(None, seed=4, count=2, width=model.config.latent, dtype=model.dtype)
    a = decode_delta(model, s, z[0])
    b = decode_delta(model, s, z[0])
    both = decode_batch(model, [s, chair_group.shapes[13]], z)
    assert delta_to_dict(a.delta) == delta_to_dict(b.delta)
    assert same_delta(a, both[0])


def test_decode_rejects_wrong_latent(model, chair_group):
    with pytest.raises(ValueError):
        decode_delta(model, chair_group.shapes[0], torch.zeros(model.config.latent + 1))


def test_transfer_to_self_is_reconstruction(model, chair_group):
    a, b = chair_group.shapes[4], chair_group.shapes[60]
    d = compute_delta(a, b)
    assert delta_to_dict(transfer_edit(model, a, d, a).delta) == delta_to_dict(reconstruct(model, a, d).delta)


def test_generate_edits_seeded(model, chair_group):
    s = chair_group.shapes[8]
    a = generate_edits(model, s, count=6, seed=2, chunk=4)
    b = generate_edits(model, s, count=6, seed=2)
    assert len(a) == 6
    assert all(same_delta(x, y) for x, y in zip(a, b))
    assert [delta_to_dict(x.delta) for x in a] == [delta_to_dict(x.delta) for x in generate_edits(model, s, 6, 2, 4)]
    for x in a:
        apply_delta(s, x.delta)


def test_interpolation_endpoints(model, chair_group):
    s = chair_group.shapes[0]
    da = compute_delta(s, chair_group.shapes[1])
    db = compute_delta(s, chair_group.shapes[90])
    two = interpolate_edits(model, s, da, db, steps=2)
    assert same_delta(two[0], reconstruct(model, s, da))
    assert same_delta(two[1], reconstruct(model, s, db))
    same = interpolate_edits(model, s, da, da, steps=3)
    assert same_delta(same[1], same[0])
    for out in interpolate_edits(model, s, da, db, steps=8):
        apply_delta(s, out.delta)


# -- checkpoints and config ----------------------------------------------------------

def test_model_checkpoint_round_trip(model, chair_group, tmp_path):
    model_checkpoint(model, tmp_path / "m.ckpt", step=7)
    back, header = load_model(tmp_path / "m.ckpt")
    assert header["step"] == 7
    assert back.config == model.config
    s = chair_group.shapes[20]
    z = torch.ones(model.config.latent, dtype=model.dtype) * 0.3
    assert delta_to_dict(decode_delta(back, s, z).delta) == delta_to_dict(decode_delta(model, s, z).delta)


def test_parse_config():
    cfg = parse_config("lambda = 5\nbeta=0.1  # comment\nvariational = false\nfeature_width = 32\n")
    assert (cfg.lambda_, cfg.beta, cfg.variational, cfg.feature_width) == (5.0, 0.1, False, 32)
    assert cfg.weights().kl == 0.0
    with pytest.raises(ValueError, match="unknown"):
        parse_config("nope = 1\n")
    with pytest.raises(ValueError):
        parse_config("variational = maybe\n")
