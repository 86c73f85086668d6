import numpy as np
import pytest

from fedrecsim.attack import (
    Adversary,
    AdversaryConfig,
    PopularityEstimator,
    craft_gradients,
    data_poison_profiles,
    distance_loss,
    explicit_boosting,
    joint_loss_and_grad,
    popularity_loss,
    popularity_loss_grad,
    promotion_loss,
    train_popularity_estimator,
)
from fedrecsim.data import PopularityLabels, RatingRecord, build_dataset
from fedrecsim.kernel import MLPParams, finite_diff_check
from fedrecsim.metrics import classifier_f1
from fedrecsim.model import (
    LocalClientState,
    flatten_global,
    local_training_pass,
    update_to_flat,
)
from fedrecsim.seeding import rng_for

from conftest import make_global, make_mlp


def _uniform_estimator(dim, c=3):
    net = MLPParams([np.zeros((c, dim))], [np.zeros(c)], ["linear"])
    return PopularityEstimator(net=net, num_classes=c, top_class=2)


def _confident_estimator(dim, c=3, top=2):
    net = MLPParams([np.zeros((c, dim))], [np.where(np.arange(c) == top, 50.0, 0.0)],
                    ["linear"])
    return PopularityEstimator(net=net, num_classes=c, top_class=top)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def test_promotion_loss_zero_at_certain_score():
    dim = 1
    ffn = MLPParams([np.eye(2)], [np.zeros(2)], ["relu"])
    from fedrecsim.model import GlobalParams
    g = GlobalParams(np.array([[60.0]]), ffn, np.array([0.0, 1.0]))
    state = LocalClientState(0, np.zeros(1), g)
    assert promotion_loss([state], 0) == pytest.approx(0.0, abs=1e-6)


def test_promotion_loss_half_is_ln2():
    from fedrecsim.model import GlobalParams
    ffn = MLPParams([np.zeros((3, 4))], [np.zeros(3)], ["relu"])
    g = GlobalParams(np.zeros((2, 2)), ffn, np.zeros(3))
    state = LocalClientState(0, np.zeros(2), g)
    assert promotion_loss([state], 1) == pytest.approx(np.log(2.0), abs=1e-12)


def test_promotion_loss_decreases_in_score():
    g = make_global(seed=4)
    hi = LocalClientState(0, np.full(g.dim, 0.8), g)
    lo = LocalClientState(1, np.full(g.dim, -0.8), g)
    from fedrecsim.model import score
    a, b = (hi, lo) if score(hi, 0) > score(lo, 0) else (lo, hi)
    assert promotion_loss([a], 0) < promotion_loss([b], 0)


def test_popularity_loss_zero_when_estimator_certain():
    est = _confident_estimator(4)
    assert popularity_loss(est, np.zeros(4)) == pytest.approx(0.0, abs=1e-6)


def test_popularity_loss_uniform_is_ln3():
    est = _uniform_estimator(4)
    assert popularity_loss(est, np.ones(4)) == pytest.approx(np.log(3.0), abs=1e-12)


def test_popularity_loss_requires_frozen():
    est = _uniform_estimator(4)
    est.frozen = False
    with pytest.raises(ValueError):
        popularity_loss(est, np.zeros(4))


def test_popularity_loss_grad_matches_finite_differences():
    net = make_mlp([5, 8, 6, 3], seed=17)
    est = PopularityEstimator(net=net, num_classes=3, top_class=2)
    v0 = rng_for(2).normal(0, 0.5, 5)

    def fn(v):
        loss, grad = popularity_loss_grad(est, v)
        return loss, grad

    assert finite_diff_check(v0, fn, step=1e-6) <= 1e-4


def test_distance_loss_zero_at_center():
    g = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
    center = np.array([2.0, 3.0])
    assert distance_loss([center, center], g) == pytest.approx(0.0)


def test_distance_loss_unit_offset():
    g = [np.array([1.0, 0.0, 0.0])]
    crafted = [np.array([1.0, 0.0, 1.0])]
    assert distance_loss(crafted, g) == pytest.approx(1.0)


def test_distance_loss_two_users_hand_computed():
    genuine = [np.array([0.0, 0.0]), np.array([2.0, 2.0])]  # mean (1, 1)
    crafted = [np.array([4.0, 5.0]), np.array([1.0, 1.0])]
    # ||(3, 4)|| + ||(0, 0)|| = 5
    assert distance_loss(crafted, genuine) == pytest.approx(5.0)


def test_distance_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        distance_loss([np.zeros(3)], [np.zeros(4)])


# ---------------------------------------------------------------------------
# popularity estimator training
# ---------------------------------------------------------------------------

def _cluster_labels(n_per_class, dim, spread=0.05, seed=0):
    rng = rng_for(seed)
    centers = np.array([[4.0] + [0.0] * (dim - 1),
                        [0.0, 4.0] + [0.0] * (dim - 2),
                        [0.0, 0.0, 4.0] + [0.0] * (dim - 3)])
    emb, cls = [], []
    for c in range(3):
        emb.append(centers[c] + rng.normal(0, spread, size=(n_per_class, dim)))
        cls += [c] * n_per_class
    emb = np.vstack(emb)
    classes = np.array(cls)
    counts = classes * 10 + 1
    return emb, PopularityLabels(classes=classes, counts=counts)


def test_estimator_separable_clusters_high_f1():
    emb, labels = _cluster_labels(30, 8)
    est = train_popularity_estimator(emb, labels, target=0, seed=3, epochs=150)
    pred = est.predict(emb[1:])
    f1 = classifier_f1(pred, labels.classes[1:])
    assert f1 >= 0.99
    assert est.frozen


def test_estimator_random_labels_near_chance():
    rng = rng_for(8)
    emb = rng.normal(size=(120, 8))
    classes = rng.integers(0, 3, size=120)
    counts = np.ones(120, dtype=int)
    labels = PopularityLabels(classes=classes, counts=counts)
    train = np.arange(0, 90)
    est = train_popularity_estimator(emb, labels, target=119, seed=3,
                                     items=train, epochs=150)
    pred = est.predict(emb[90:])
    f1 = classifier_f1(pred, classes[90:])
    assert f1 < 0.55


def test_estimator_probabilities_sum_to_one():
    emb, labels = _cluster_labels(10, 6)
    est = train_popularity_estimator(emb, labels, target=0, seed=1, epochs=30)
    probs = est.predict_proba(emb[:7])
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_estimator_rejects_missing_class():
    emb = rng_for(0).normal(size=(20, 4))
    labels = PopularityLabels(classes=np.zeros(20, dtype=int), counts=np.ones(20, dtype=int))
    with pytest.raises(ValueError):
        train_popularity_estimator(emb, labels, target=0, seed=1)


def test_estimator_excludes_target_from_training():
    emb, labels = _cluster_labels(10, 6)
    est_a = train_popularity_estimator(emb, labels, target=0, seed=3, epochs=20)
    emb2 = emb.copy()
    emb2[0] += 1000.0  # only the excluded target moves
    est_b = train_popularity_estimator(emb2, labels, target=0, seed=3, epochs=20)
    for a, b in zip(est_a.net.weights, est_b.net.weights):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# crafting
# ---------------------------------------------------------------------------

def _craft_setup(seed=0, num_items=6, dim=4):
    g = make_global(num_items=num_items, dim=dim, tower=(6, 3), seed=seed)
    rng = rng_for(seed + 50)
    malicious = [1, 3]
    user_emb = {uid: rng.normal(0, 0.3, dim) for uid in malicious}
    genuine = {}
    for uid in malicious:
        upd, _, _ = local_training_pass(g, user_emb[uid], [0, 2], [4, 5], 0.01, 4,
                                        rng_for(seed + uid))
        genuine[uid] = upd
    return g, malicious, user_emb, genuine


def test_craft_alpha_gamma_zero_equals_explicit_boosting():
    g, malicious, user_emb, genuine = _craft_setup()
    cfg = AdversaryConfig("pipattack", target_item=5, malicious_ids=malicious,
                          alpha=0.0, gamma=0.0, craft_epochs=5, craft_lr=0.01)
    a = craft_gradients(cfg, g, None, user_emb, genuine, eta=0.01)
    b = explicit_boosting(cfg, g, user_emb, genuine, eta=0.01)
    for uid in malicious:
        assert np.array_equal(update_to_flat(a.updates[uid], g),
                              update_to_flat(b.updates[uid], g))


def test_craft_huge_gamma_collapses_to_genuine_mean():
    g, malicious, user_emb, genuine = _craft_setup(seed=3)
    cfg = AdversaryConfig("pipattack", target_item=5, malicious_ids=malicious,
                          alpha=0.0, gamma=1e6, craft_epochs=5, craft_lr=0.01)
    res = craft_gradients(cfg, g, None, user_emb, genuine, eta=0.01)
    crafted = [update_to_flat(res.updates[uid], g) for uid in malicious]
    gen = [update_to_flat(genuine[uid], g) for uid in malicious]
    assert distance_loss(crafted, gen) < 1e-6


def test_craft_with_gamma_is_closer_to_genuine_mean():
    g, malicious, user_emb, genuine = _craft_setup(seed=5)
    est = _uniform_estimator(g.dim)
    base = dict(mode="pipattack", target_item=5, malicious_ids=malicious,
                alpha=2.0, craft_epochs=10, craft_lr=0.01)
    res0 = craft_gradients(AdversaryConfig(**base, gamma=0.0), g, est, user_emb,
                           genuine, eta=0.01)
    res1 = craft_gradients(AdversaryConfig(**base, gamma=5.0), g, est, user_emb,
                           genuine, eta=0.01)
    gen = [update_to_flat(genuine[uid], g) for uid in malicious]
    d0 = distance_loss([update_to_flat(res0.updates[u], g) for u in malicious], gen)
    d1 = distance_loss([update_to_flat(res1.updates[u], g) for u in malicious], gen)
    assert d1 < d0


def test_craft_loss_curves_mostly_decreasing():
    g, malicious, user_emb, genuine = _craft_setup(seed=7)
    est = _uniform_estimator(g.dim)
    cfg = AdversaryConfig("pipattack", target_item=5, malicious_ids=malicious,
                          alpha=1.0, gamma=0.001, craft_epochs=25, craft_lr=0.005)
    res = craft_gradients(cfg, g, est, user_emb, genuine, eta=0.01)
    steps = downs = 0
    for curve in res.loss_curves.values():
        diffs = np.diff(curve)
        steps += diffs.size
        downs += int((diffs <= 1e-9).sum())
    assert downs / steps >= 0.95


def test_craft_only_touches_expected_rows():
    g, malicious, user_emb, genuine = _craft_setup(seed=9)
    cfg = AdversaryConfig("pipattack", target_item=5, malicious_ids=malicious,
                          alpha=0.0, gamma=0.0, craft_epochs=3, craft_lr=0.01)
    res = craft_gradients(cfg, g, None, user_emb, genuine, eta=0.01)
    for uid in malicious:
        # promotion-only crafting moves the target row, tower and projection
        assert set(res.updates[uid].item_rows) <= {5}


def test_craft_requires_estimator_when_alpha_positive():
    g, malicious, user_emb, genuine = _craft_setup()
    cfg = AdversaryConfig("pipattack", target_item=5, malicious_ids=malicious,
                          alpha=1.0, gamma=0.0, craft_epochs=2, craft_lr=0.01)
    with pytest.raises(ValueError):
        craft_gradients(cfg, g, None, user_emb, genuine, eta=0.01)


def test_joint_loss_gradient_is_weighted_sum_of_parts():
    g, malicious, user_emb, genuine = _craft_setup(seed=11)
    est = PopularityEstimator(net=make_mlp([g.dim, 6, 3], seed=2),
                              num_classes=3, top_class=2)
    uid = malicious[0]
    theta0 = flatten_global(g)
    center = np.mean([update_to_flat(genuine[u], g) for u in malicious], axis=0)
    rng = rng_for(31)
    theta = theta0 + rng.normal(0, 0.01, theta0.size)
    u = user_emb[uid]
    alpha, gamma = 1.7, 0.3

    def parts(a, c):
        cfg = AdversaryConfig("pipattack", 5, malicious, alpha=a, gamma=c,
                              craft_epochs=1, craft_lr=0.01)
        return joint_loss_and_grad(cfg, g, est, theta0, center, 0.01, uid, theta, u)

    l_full, g_full, du_full = parts(alpha, gamma)
    l_exp, g_exp, du_exp = parts(0.0, 0.0)
    # isolate each component by differencing configurations
    l_pop_w, g_pop_w, _ = parts(alpha, 0.0)
    l_dis_w, g_dis_w, _ = parts(0.0, gamma)
    assert l_full == pytest.approx(l_exp + (l_pop_w - l_exp) + (l_dis_w - l_exp), abs=1e-10)
    assert np.allclose(g_full, g_exp + (g_pop_w - g_exp) + (g_dis_w - g_exp), atol=1e-10)
    assert np.allclose(du_full, du_exp, atol=1e-12)


def test_joint_loss_gradient_matches_finite_differences():
    g, malicious, user_emb, genuine = _craft_setup(seed=13)
    est = PopularityEstimator(net=make_mlp([g.dim, 6, 3], seed=4),
                              num_classes=3, top_class=2)
    uid = malicious[0]
    theta0 = flatten_global(g)
    center = np.mean([update_to_flat(genuine[u], g) for u in malicious], axis=0)
    cfg = AdversaryConfig("pipattack", 5, malicious, alpha=0.9, gamma=0.2,
                          craft_epochs=1, craft_lr=0.01)
    rng = rng_for(77)
    theta_pt = theta0 + rng.normal(0, 0.02, theta0.size)
    u_pt = user_emb[uid] + rng.normal(0, 0.02, g.dim)

    def fn(vec):
        loss, gt, du = joint_loss_and_grad(cfg, g, est, theta0, center, 0.01,
                                           uid, vec[:-g.dim], vec[-g.dim:])
        return loss, np.concatenate([gt, du])

    vec0 = np.concatenate([theta_pt, u_pt])
    assert finite_diff_check(vec0, fn, step=1e-6) <= 1e-4


# ---------------------------------------------------------------------------
# data poisoning baselines
# ---------------------------------------------------------------------------

def _poison_setup(num_items=12):
    recs = []
    for u in range(6):
        for k in range(4):
            recs.append(RatingRecord(u, (u + k) % num_items, 1.0, k))
    ds = build_dataset(recs, q=2, seed=0, num_items=num_items)
    classes = np.zeros(num_items, dtype=int)
    classes[0] = PopularityLabels.HIGH
    classes[1:4] = PopularityLabels.MEDIUM
    labels = PopularityLabels(classes=classes, counts=np.arange(num_items)[::-1].copy())
    return ds, labels


def test_poison_zero_fillers_target_only():
    ds, labels = _poison_setup()
    cfg = AdversaryConfig("pa", target_item=11, malicious_ids=[1, 4], fillers=0)
    profiles = data_poison_profiles("pa", cfg, ds, labels, seed=5)
    for p in profiles.values():
        assert p.train_items == [11]
        assert len(p.negatives) == ds.q


def test_poison_pa_single_high_item_repeats(caplog):
    ds, labels = _poison_setup()
    cfg = AdversaryConfig("pa", target_item=11, malicious_ids=[2], fillers=3)
    with caplog.at_level("WARNING"):
        profiles = data_poison_profiles("pa", cfg, ds, labels, seed=5)
    assert profiles[2].train_items == [11, 0, 0, 0]  # item 0 is the only high item


def test_poison_ra_draws_from_all_items():
    ds, labels = _poison_setup()
    cfg = AdversaryConfig("ra", target_item=11, malicious_ids=[0], fillers=5)
    profiles = data_poison_profiles("ra", cfg, ds, labels, seed=5)
    assert 11 not in profiles[0].train_items[1:]
    assert len(profiles[0].train_items) == 6


def test_poison_deterministic():
    ds, labels = _poison_setup()
    cfg = AdversaryConfig("ra", target_item=11, malicious_ids=[0, 3], fillers=4)
    a = data_poison_profiles("ra", cfg, ds, labels, seed=9)
    b = data_poison_profiles("ra", cfg, ds, labels, seed=9)
    assert {u: (p.train_items, p.negatives) for u, p in a.items()} == \
           {u: (p.train_items, p.negatives) for u, p in b.items()}


def test_poison_default_fillers_is_mean_profile():
    ds, labels = _poison_setup()
    cfg = AdversaryConfig("ra", target_item=11, malicious_ids=[0])
    profiles = data_poison_profiles("ra", cfg, ds, labels, seed=1)
    expected = max(0, int(round(ds.mean_profile_len())) - 1) + 1
    assert len(profiles[0].train_items) == expected


# ---------------------------------------------------------------------------
# adversary driver
# ---------------------------------------------------------------------------

def test_adversary_activate_idempotent():
    ds, labels = _poison_setup()
    g = make_global(num_items=12, seed=1)
    adv = Adversary(AdversaryConfig("ra", target_item=11, malicious_ids=[0], fillers=2))
    adv.activate(g, ds, labels, estimator_seed=1, poison_seed=2)
    first = {u: list(p.train_items) for u, p in adv.poisoned.items()}
    adv.activate(g, ds, labels, estimator_seed=1, poison_seed=2)
    assert {u: list(p.train_items) for u, p in adv.poisoned.items()} == first
    assert adv.activated


def test_adversary_config_validation():
    with pytest.raises(ValueError):
        AdversaryConfig("unknown", 0, [])
    with pytest.raises(ValueError):
        AdversaryConfig("eb", 0, [], alpha=-1.0)
    with pytest.raises(ValueError):
        AdversaryConfig("eb", 0, [], p_norm=1.0)
