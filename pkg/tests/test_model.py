import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrecsim.kernel import MLPParams, finite_diff_check, sigmoid
from fedrecsim.model import (
    GlobalParams,
    GradientUpdate,
    LocalClientState,
    assert_wire_schema,
    flat_to_update,
    flatten_global,
    init_global_params,
    load_checkpoint,
    local_loss_and_grads,
    local_training_pass,
    recommend_top_k,
    save_checkpoint,
    score,
    score_logits_batch,
    unflatten_global,
    update_to_flat,
)
from fedrecsim.seeding import rng_for

from conftest import make_global


def _zero_global(num_items=4, dim=2, tower=(3, 4)):
    ffn = MLPParams(
        [np.zeros((tower[0], 2 * dim)), np.zeros((tower[1], tower[0]))],
        [np.zeros(tower[0]), np.zeros(tower[1])],
        ["relu", "relu"],
    )
    return GlobalParams(np.zeros((num_items, dim)), ffn, np.zeros(tower[1]))


def _state(g, uid=0, u=None):
    return LocalClientState(uid, np.zeros(g.dim) if u is None else u, g)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_score_all_zero_params_is_half():
    assert score(_state(_zero_global()), 1) == pytest.approx(0.5)


def test_score_identity_tower_reads_first_user_coordinate():
    # identity 4x4 tower on nonnegative inputs passes them through relu;
    # projection (1,0,0,0) picks the first user coordinate: score = sigmoid(a)
    dim = 2
    ffn = MLPParams([np.eye(2 * dim)], [np.zeros(2 * dim)], ["relu"])
    g = GlobalParams(np.array([[0.3, 0.8], [0.2, 0.1]]), ffn,
                     np.array([1.0, 0.0, 0.0, 0.0]))
    a, b = 0.7, 0.4
    state = LocalClientState(0, np.array([a, b]), g)
    assert score(state, 0) == pytest.approx(float(sigmoid(a)))
    assert score(state, 1) == pytest.approx(float(sigmoid(a)))


def test_score_ignores_other_items_embeddings():
    g = make_global(num_items=5, seed=2)
    state = _state(g, u=np.array([0.1, -0.2, 0.3, 0.4]))
    before = score(state, 2)
    g.item_embeddings[4] += 100.0
    assert score(state, 2) == before


def test_score_rejects_out_of_range_item():
    with pytest.raises(ValueError):
        score(_state(_zero_global()), 99)


def test_batch_scores_match_single(small_global):
    state = _state(small_global, u=np.linspace(-1, 1, small_global.dim))
    items = np.arange(small_global.num_items)
    batch = score_logits_batch(state, items)
    for i in items:
        single = sigmoid(batch[i])
        assert score(state, int(i)) == pytest.approx(float(single), rel=1e-12)


# ---------------------------------------------------------------------------
# local loss and gradients
# ---------------------------------------------------------------------------

def test_loss_zero_when_prediction_matches_label():
    # saturate the score toward 1 with a large projection on an identity path
    dim = 1
    ffn = MLPParams([np.eye(2)], [np.zeros(2)], ["relu"])
    g = GlobalParams(np.array([[50.0]]), ffn, np.array([0.0, 1.0]))
    state = LocalClientState(0, np.array([0.0]), g)
    loss, _, _ = local_loss_and_grads(state, np.array([0]), np.array([1.0]))
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_loss_single_pair_at_half_is_ln2():
    state = _state(_zero_global())
    loss, upd, user_grad = local_loss_and_grads(state, np.array([1]), np.array([1.0]))
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_loss_empty_batch():
    state = _state(_zero_global())
    loss, upd, user_grad = local_loss_and_grads(state, np.array([], dtype=int), np.array([]))
    assert loss == 0.0
    assert upd.item_rows == {}
    assert np.all(user_grad == 0)


def test_loss_rejects_non_binary_labels():
    state = _state(_zero_global())
    with pytest.raises(ValueError):
        local_loss_and_grads(state, np.array([0]), np.array([0.5]))


def test_loss_gradients_match_finite_differences():
    g = make_global(num_items=6, dim=4, tower=(6, 3), seed=21)
    u0 = rng_for(3).normal(0, 0.5, size=4)
    items = np.array([0, 2, 2, 5, 1])
    labels = np.array([1.0, 0.0, 1.0, 0.0, 1.0])

    def fn(theta):
        shared = unflatten_global(theta[:-4], g)
        state = LocalClientState(0, theta[-4:].copy(), shared)
        loss, upd, du = local_loss_and_grads(state, items, labels)
        return loss, np.concatenate([update_to_flat(upd, g), du])

    theta0 = np.concatenate([flatten_global(g), u0])
    assert finite_diff_check(theta0, fn, step=1e-6) <= 1e-4


# ---------------------------------------------------------------------------
# top-k recommendation
# ---------------------------------------------------------------------------

def test_top_k_exhaustive_returns_all_candidates(small_global):
    state = _state(small_global, u=np.ones(small_global.dim))
    out = recommend_top_k(state, small_global.num_items - 2, {0, 3})
    assert sorted(out) == [1, 2, 4, 5]


def test_top_k_tie_breaks_toward_lower_index():
    g = _zero_global(num_items=4)
    out = recommend_top_k(_state(g), 2, set())
    assert out == [0, 1]


def test_top_k_fewer_candidates_than_k_logs_and_returns_all(caplog):
    g = make_global(num_items=4)
    with caplog.at_level("WARNING"):
        out = recommend_top_k(_state(g), 10, {1})
    assert sorted(out) == [0, 2, 3]
    assert "candidates" in caplog.text


def test_top_k_matches_full_sort_oracle():
    g = make_global(num_items=5, seed=33)
    state = _state(g, u=np.array([0.5, -0.1, 0.2, 0.9]))
    scores = {i: score(state, i) for i in range(5)}
    oracle = sorted(scores, key=lambda i: (-scores[i], i))
    assert recommend_top_k(state, 3, set()) == oracle[:3]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_top_k_is_prefix_of_descending_sort(seed, k):
    g = make_global(num_items=40, dim=4, tower=(6, 3), seed=seed % 100)
    state = _state(g, u=rng_for(seed).normal(0, 0.5, 4))
    logits = score_logits_batch(state, np.arange(40))
    oracle = sorted(range(40), key=lambda i: (-logits[i], i))
    assert recommend_top_k(state, k, set()) == oracle[:k]


def test_top_k_rejects_bad_k(small_global):
    with pytest.raises(ValueError):
        recommend_top_k(_state(small_global), 0, set())


# ---------------------------------------------------------------------------
# update schema and flattening
# ---------------------------------------------------------------------------

def test_wire_schema_has_no_user_fields(small_global):
    state = _state(small_global, u=np.ones(small_global.dim))
    _, upd, _ = local_loss_and_grads(state, np.array([1, 2]), np.array([1.0, 0.0]))
    wire = upd.to_wire()
    assert_wire_schema(wire)
    assert not any("user" in k for k in wire)


def test_wire_schema_rejects_extra_field():
    with pytest.raises(ValueError):
        assert_wire_schema({"item_rows": {}, "ffn_weights": [], "ffn_biases": [],
                            "projection": [], "user_embedding": []})
    with pytest.raises(ValueError):
        assert_wire_schema({"item_rows": {}})


def test_update_flat_roundtrip(small_global):
    state = _state(small_global, u=np.ones(small_global.dim))
    _, upd, _ = local_loss_and_grads(state, np.array([0, 3, 3]), np.array([1.0, 0.0, 1.0]))
    flat = update_to_flat(upd, small_global)
    back = flat_to_update(flat, small_global)
    assert set(back.item_rows) == set(upd.item_rows)
    for i in upd.item_rows:
        assert np.allclose(back.item_rows[i], upd.item_rows[i])
    assert np.allclose(back.projection, upd.projection)
    for a, b in zip(back.ffn.weights, upd.ffn.weights):
        assert np.allclose(a, b)


def test_global_flat_roundtrip(small_global):
    back = unflatten_global(flatten_global(small_global), small_global)
    assert np.array_equal(back.item_embeddings, small_global.item_embeddings)
    assert np.array_equal(back.projection, small_global.projection)


# ---------------------------------------------------------------------------
# local training pass
# ---------------------------------------------------------------------------

def test_single_batch_pass_reproduces_gradients():
    # with everything in one batch, (downloaded - trained) / eta is exactly
    # the batch gradient at the downloaded parameters
    g = make_global(num_items=6, dim=4, tower=(6, 3), seed=8)
    u = rng_for(5).normal(0, 0.3, 4)
    train_items, negatives = [0, 2], [4, 5, 1, 3]
    eta = 0.05
    upd, new_u, loss = local_training_pass(g, u, train_items, negatives, eta,
                                           batch_size=64, rng=rng_for(7))
    items = np.array(train_items + negatives)
    labels = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    order = rng_for(7).permutation(6)
    state = LocalClientState(0, u, g)
    ref_loss, ref_upd, ref_du = local_loss_and_grads(state, items[order], labels[order])
    assert loss == pytest.approx(ref_loss)
    assert np.allclose(new_u, u - eta * ref_du)
    for i, row in ref_upd.item_rows.items():
        assert np.allclose(upd.item_rows[i], row, atol=1e-10)
    assert np.allclose(upd.projection, ref_upd.projection, atol=1e-10)


def test_pass_only_touches_local_items():
    g = make_global(num_items=10, dim=4, tower=(6, 3), seed=8)
    upd, _, _ = local_training_pass(g, np.zeros(4), [1, 2], [7], 0.01, 4, rng_for(0))
    assert set(upd.item_rows) <= {1, 2, 7}


def test_pass_does_not_mutate_shared(small_global):
    before = flatten_global(small_global).copy()
    local_training_pass(small_global, np.zeros(small_global.dim), [0, 1], [2, 3],
                        0.01, 2, rng_for(0))
    assert np.array_equal(flatten_global(small_global), before)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, small_global):
    user_ids = [0, 2, 5]
    emb = rng_for(1).normal(size=(3, small_global.dim))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, 7, small_global, user_ids, emb)
    ck = load_checkpoint(path)
    assert ck.round_index == 7
    assert ck.user_ids == user_ids
    assert np.array_equal(ck.user_embeddings, emb)
    assert np.array_equal(ck.params.item_embeddings, small_global.item_embeddings)
    assert np.array_equal(ck.params.projection, small_global.projection)
    assert ck.estimator_net is None


def test_checkpoint_with_estimator(tmp_path, small_global):
    from conftest import make_mlp
    net = make_mlp([small_global.dim, 8, 3], seed=4)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, 1, small_global, [0], np.zeros((1, small_global.dim)), net)
    ck = load_checkpoint(path)
    assert ck.estimator_net is not None
    for a, b in zip(ck.estimator_net.weights, net.weights):
        assert np.array_equal(a, b)
