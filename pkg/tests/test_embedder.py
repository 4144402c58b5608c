from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nqr import embedder as em
from nqr.prepare import PreparedFarm


@pytest.fixture(scope="module")
def params():
    return em.init_params(np.random.default_rng(0), 4, head_dims=(1, 16, 128))


def test_triplet_loss_examples():
    assert em.triplet_loss(0.0, 1.2, 0.2) == 0.0
    assert em.triplet_loss(0.7, 0.7, 0.2) == pytest.approx(0.2)
    assert em.triplet_loss(1.0, 0.5, 0.2) == pytest.approx(0.7)


@given(st.floats(0, 4), st.floats(0, 4), st.floats(0.01, 1))
def test_triplet_loss_hinge(dp, dn, alpha):
    loss = float(em.triplet_loss(dp, dn, alpha))
    assert loss >= 0
    assert (loss == 0) == (dn >= dp + alpha)
    if loss > 0:
        assert loss == pytest.approx(dp - dn + alpha)


def test_embed_is_deterministic_and_unit_norm(params, rng):
    patches = rng.random((4, 12, 12))
    a = em.embed(params, patches, 128)
    b = em.embed(params, patches, 128)
    assert np.array_equal(a.values, b.values)
    for dim in (1, 16, 128):
        e = em.embed(params, rng.random((4, 12, 12)), dim, side="seeding")
        assert e.values.shape == (dim,)
        assert abs(np.linalg.norm(e.values) - 1) < 1e-6
        assert e.patch_features.shape == (4, params.d_patch)


def test_patch_order_matters_unless_paired(params, rng):
    a, b = rng.random((4, 12, 12)), rng.random((4, 12, 12))
    perm = [2, 0, 3, 1]
    fa, fb = em.embed(params, a, 128, "seeding"), em.embed(params, b, 128)
    pa, pb = em.embed(params, a[perm], 128, "seeding"), em.embed(params, b[perm], 128)
    assert not np.allclose(fa.values, pa.values)
    assert not np.isclose(np.linalg.norm(fa.values - fb.values), np.linalg.norm(fa.values - pb.values))


def test_wrong_patch_count_or_dim(params, rng):
    with pytest.raises(em.ParamShapeError):
        em.embed(params, rng.random((3, 12, 12)), 128)
    with pytest.raises(em.ParamShapeError):
        em.embed(params, rng.random((4, 10, 10)), 128)
    with pytest.raises(em.ParamShapeError):
        em.embed(params, rng.random((4, 12, 12)), 64)


def test_gain_invariance(params, rng):
    patches = rng.random((4, 12, 12))
    a = em.embed(params, patches, 128).values
    b = em.embed(params, 1.2 * patches, 128).values
    assert np.abs(a - b).max() < 1e-3


def test_small_input_change_gives_bounded_shift(params, rng):
    patches = rng.random((4, 12, 12))
    a = em.embed(params, patches, 128).values
    b = em.embed(params, patches + 1e-3 * rng.standard_normal(patches.shape), 128).values
    assert np.linalg.norm(a - b) < 0.05


def test_feature_bank_matches_direct_encoding(params, small_prepared, rng):
    raft = small_prepared.grow[0]
    bank = em.feature_bank(params, "growing", raft)
    loc = np.array([[0, 0, 2], [5, 4, 0], [11, 2, 4], [3, 4, 4]])
    cells = raft.cells.reshape(-1, 16, 16)
    patches = np.stack([cells[c, y:y + 12, x:x + 12] for c, y, x in loc])
    direct = em.encode_patches(params, "growing", patches)
    assert np.allclose(em.bank_lookup(bank, loc), direct, atol=1e-12)


def _batch(rng, B=6, P=4, p=12):
    return em.TripletBatch(anchor=rng.random((B, P, p, p)), positive=rng.random((B, P, p, p)),
                           negative=rng.random((B, P, p, p)), classes=["any"] * B)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = em.init_params(rng, 4, head_dims=(16, 128))
    batch = _batch(rng)
    _, grads, _ = em.loss_and_grads(params, batch, alpha=1.5, lam=1.0)
    # 10 coordinates spread over every layer of both sides
    picks = [("seeding", "conv1_w"), ("seeding", "conv2_w"), ("seeding", "proj_w"),
             ("seeding", "head16_w"), ("seeding", "head128_b"), ("growing", "conv1_b"),
             ("growing", "conv2_w"), ("growing", "proj_b"), ("growing", "head128_w"),
             ("growing", "head16_b")]
    h = 1e-6
    worst = 0.0
    for side, name in picks:
        g = grads[side][name]
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        arr = params.weights[side][name]
        orig = arr[idx]
        arr[idx] = orig + h
        up = em.loss_and_grads(params, batch, 1.5, 1.0, need_grads=False)[0]
        arr[idx] = orig - h
        down = em.loss_and_grads(params, batch, 1.5, 1.0, need_grads=False)[0]
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(numeric - g[idx]) / max(abs(numeric), abs(g[idx]), 1e-12))
    assert worst < 1e-4


def test_zero_learning_rate_leaves_params_unchanged(small_prepared):
    p0 = em.init_params(np.random.default_rng(0), 3, head_dims=(16, 128))
    p1, curve = em.train(p0, small_prepared, epochs=1, alpha=0.2, lr=0.0,
                         rng=np.random.default_rng(1), batch=4, steps_per_epoch=2)
    for (_, _, a), (_, _, b) in zip(p0.arrays(), p1.arrays()):
        assert np.array_equal(a, b)
    assert len(curve) == 1 and np.isfinite(curve[0])


def test_nan_loss_aborts(small_prepared):
    p0 = em.init_params(np.random.default_rng(0), 3, head_dims=(16, 128))
    p0.weights["growing"]["proj_b"][:] = np.nan
    with pytest.raises(em.TrainingDiverged, match="non-finite loss"):
        em.train(p0, small_prepared, epochs=1, alpha=0.2, lr=1e-3, rng=np.random.default_rng(1),
                 batch=2, steps_per_epoch=1)


def test_training_reduces_loss(small_prepared):
    p0 = em.init_params(np.random.default_rng(0), 3, head_dims=(16, 128))
    _, curve = em.train(p0, small_prepared, epochs=4, alpha=0.2, lr=3e-3,
                        rng=np.random.default_rng(1), batch=8, steps_per_epoch=15)
    assert curve[-1] < curve[0]


def test_class_mix_frequencies(small_prepared):
    trip = em.sample_triplets(small_prepared, 10_000, np.random.default_rng(2), 1, offset_step=0)
    freq = Counter(t.negative_class for t in trip)
    for cls, target in zip(em.NEGATIVE_CLASSES, em.NEGATIVE_MIX):
        assert abs(freq[cls] / 10_000 - target) <= 0.02


def test_empty_class_folds_into_the_rest(small_prepared):
    one_robot = PreparedFarm(seed=small_prepared.seed, grow=small_prepared.grow,
                             grow_locations=[(0, s) for s in range(len(small_prepared.grow))],
                             assignment=small_prepared.assignment,
                             seed_ids=small_prepared.seed_ids, grow_ids=small_prepared.grow_ids)
    assert np.allclose(em.class_weights(5, 0), [0.5, 0.5, 0.0])
    assert np.allclose(em.class_weights(0, 5), [2 / 3, 0.0, 1 / 3])
    trip = em.sample_triplets(one_robot, 300, np.random.default_rng(0), 2)
    assert {t.negative_class for t in trip} == {"same-raft-cells", "same-robot"}


def test_negatives_never_repeat_the_anchor(small_prepared):
    for t in em.sample_triplets(small_prepared, 500, np.random.default_rng(4), 3):
        assert t.anchor_raft != t.negative_raft or \
            not np.array_equal(t.anchor.locations, t.negative.locations)
        assert np.array_equal(t.anchor.locations, t.positive.locations)
        if t.negative_class != "same-raft-cells":
            assert t.anchor_raft != t.negative_raft


def test_triplet_sampling_deterministic(small_prepared):
    a = em.sample_triplets(small_prepared, 20, np.random.default_rng(8), 3)
    b = em.sample_triplets(small_prepared, 20, np.random.default_rng(8), 3)
    assert [t.negative_class for t in a] == [t.negative_class for t in b]
    assert all(np.array_equal(x.negative.patches, y.negative.patches) for x, y in zip(a, b))


def test_params_round_trip(tmp_path, params):
    params.meta["note"] = "x"
    em.save_params(params, tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"NQRP"
    back = em.load_params(tmp_path / "p.bin")
    assert back.head_dims == params.head_dims and back.meta["note"] == "x"
    for (s1, n1, a), (s2, n2, b) in zip(params.arrays(), back.arrays()):
        assert (s1, n1) == (s2, n2) and np.array_equal(a, b)


def test_params_file_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        em.load_params(tmp_path / "x.bin")
