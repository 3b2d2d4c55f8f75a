import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longtail_lab import contrastive as C
from longtail_lab.datagen import AugmentPolicy, DatasetConfig, generate
from longtail_lab.gradcheck import numeric_grad, rel_error
from longtail_lab.losses import LossError, LossResult
from longtail_lab.model import Model, ModelConfig, OptimizerState
from longtail_lab.numerics import SeededRng, l2_normalize_rows, log_sum_exp
from longtail_lab.training import Batch, LossSpec, make_batches, supervised_epoch

UNIFORM_CTR_N4 = 1.3862943611198906188  # 2 * (2 * 0.25 * ln 4)
ORTHO_CTR_TAU1_N4 = 1.4873367612573583123  # 2 * -ln(e / (e + 3))


def unit(rng, n, d):
    return l2_normalize_rows(rng.normal(n * d).reshape(n, d))[0]


def brute_info_nce(q, keys, positives, tau):
    total = 0.0
    for i, p in enumerate(positives):
        sims = [float(q[i] @ k) / tau for k in keys]
        total += log_sum_exp(sims) - sims[p]
    return total / len(positives)


# -- InfoNCE ---------------------------------------------------------------------------------------


def test_info_nce_uniform_is_log_k_plus_one():
    q = np.tile([[1.0, 0.0]], (3, 1))
    keys = np.tile([[0.0, 1.0]], (5, 1))
    res = C.info_nce(q, keys, [0, 1, 2], 0.25)
    assert res.loss == pytest.approx(math.log(5), abs=1e-12)


def test_info_nce_monotone_in_positive_similarity():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    losses = []
    for angle in np.linspace(math.pi / 2, 0.0, 7):
        q = np.array([[math.cos(angle), math.sin(angle)]])
        # rotate only toward the positive key (index 0); others fixed
        losses.append(C.info_nce(q, keys, [0], 0.25).loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_info_nce_seeded_batch_matches_brute_force():
    rng = SeededRng(4)
    q, keys = unit(rng, 4, 5), unit(rng, 4, 5)
    res = C.info_nce(q, keys, np.arange(4), 0.25)
    assert res.loss == pytest.approx(brute_info_nce(q, keys, range(4), 0.25), abs=1e-12)


def test_info_nce_rejects_unnormalized_and_bad_positives():
    with pytest.raises(LossError, match="not l2-normalized"):
        C.info_nce([[2.0, 0.0]], [[1.0, 0.0]], [0])
    with pytest.raises(LossError, match="positives"):
        C.info_nce([[1.0, 0.0]], [[1.0, 0.0]], [1])


@given(st.integers(0, 10_000), st.floats(0.1, 2.0))
def test_info_nce_gradients(seed, tau):
    rng = SeededRng(seed)
    n, k, d = 1 + rng.randint(5), 2 + rng.randint(5), 2 + rng.randint(4)
    q, keys = unit(rng, n, d), unit(rng, k, d)
    pos = np.array([rng.randint(k) for _ in range(n)])
    res = C.info_nce(q, keys, pos, tau)

    def raw(qq, kk):
        logits = qq @ kk.T / tau
        return float(np.mean([log_sum_exp(r) - r[p] for r, p in zip(logits, pos)]))

    assert rel_error(res.grads["q"], numeric_grad(lambda v: raw(v, keys), q)) < 1e-6
    assert rel_error(res.grads["keys"], numeric_grad(lambda v: raw(q, v), keys)) < 1e-6


# -- symmetrized ctr ---------------------------------------------------------------------------------


def test_symmetrized_ctr_uniform():
    x = np.tile([[1.0, 0.0]], (4, 1))
    res = C.symmetrized_ctr(x, x, x, x, 0.25)
    assert abs(res.loss - UNIFORM_CTR_N4) < 1e-12
    for n, tau in ((3, 0.5), (8, 0.1)):
        x = np.tile([[0.0, 1.0]], (n, 1))
        assert abs(C.symmetrized_ctr(x, x, x, x, tau).loss - 2 * tau * math.log(n) * 2) < 1e-12


def test_ctr_orthonormal_closed_form():
    e = np.eye(4)
    part = C.ctr(e, e, 1.0)
    assert part.loss == pytest.approx(ORTHO_CTR_TAU1_N4, abs=1e-12)


def test_symmetrized_ctr_swap_symmetry():
    rng = SeededRng(2)
    q1, q2, k1, k2 = (unit(rng, 5, 3) for _ in range(4))
    a = C.symmetrized_ctr(q1, q2, k1, k2, 0.25)
    b = C.symmetrized_ctr(q2, q1, k2, k1, 0.25)
    assert a.loss == pytest.approx(b.loss, abs=1e-14)


def test_symmetrized_ctr_shape_mismatch():
    rng = SeededRng(0)
    with pytest.raises(LossError):
        C.symmetrized_ctr(unit(rng, 3, 2), unit(rng, 3, 2), unit(rng, 4, 2), unit(rng, 3, 2))


@given(st.integers(0, 10_000))
def test_symmetrized_ctr_gradients_to_queries(seed):
    rng = SeededRng(seed)
    n, d = 2 + rng.randint(4), 2 + rng.randint(3)
    q1, q2, k1, k2 = (unit(rng, n, d) for _ in range(4))
    res = C.symmetrized_ctr(q1, q2, k1, k2, 0.25)

    def raw(a, b):
        logits = a @ b.T / 0.25
        return 0.5 * float(np.mean([log_sum_exp(r) - r[i] for i, r in enumerate(logits)]))

    assert rel_error(res.grads["q1"], numeric_grad(lambda v: raw(v, k2) + raw(q2, k1), q1)) < 1e-6
    assert rel_error(res.grads["q2"], numeric_grad(lambda v: raw(q1, k2) + raw(v, k1), q2)) < 1e-6
    assert set(res.grads) == {"q1", "q2"}


# -- nt_xent ------------------------------------------------------------------------------------------


def test_nt_xent_brute_force():
    rng = SeededRng(6)
    z = rng.normal(6 * 3).reshape(6, 3)
    res = C.nt_xent(z, 0.5)
    zh = l2_normalize_rows(z)[0]
    total = 0.0
    for i in range(6):
        pos = (i + 3) % 6
        sims = {j: C.cosine_sim(zh[i], zh[j]) / 0.5 for j in range(6) if j != i}
        total += log_sum_exp(list(sims.values())) - sims[pos]
    assert res.loss == pytest.approx(total / 6, abs=1e-12)


@given(st.integers(0, 10_000))
def test_nt_xent_gradient(seed):
    rng = SeededRng(seed)
    n, d = 1 + rng.randint(4), 2 + rng.randint(3)
    z = rng.normal(2 * n * d).reshape(2 * n, d)
    res = C.nt_xent(z, 0.25)
    assert rel_error(res.grads["z"], numeric_grad(lambda v: C.nt_xent(v, 0.25).loss, z)) < 1e-6


def test_nt_xent_rejects_odd_and_degenerate():
    with pytest.raises(LossError):
        C.nt_xent(np.ones((3, 2)))
    with pytest.raises(LossError, match="degenerate"):
        C.nt_xent(np.array([[1.0, 0.0], [0.0, 0.0]]))


# -- momentum / cosine / joint -----------------------------------------------------------------------------


def test_momentum_update_examples():
    key = {"w": np.array([2.0])}
    assert C.momentum_update(key, {"w": np.array([4.0])}, 0.5)["w"].tolist() == [3.0]
    key = {"w": np.array([1.0, 2.0])}
    C.momentum_update(key, {"w": np.array([5.0, 7.0])}, 1.0)
    assert key["w"].tolist() == [1.0, 2.0]
    C.momentum_update(key, {"w": np.array([5.0, 7.0])}, 0.0)
    assert key["w"].tolist() == [5.0, 7.0]
    with pytest.raises(LossError, match="mismatch"):
        C.momentum_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(LossError, match="mismatch"):
        C.momentum_update({"w": np.zeros(2)}, {"v": np.zeros(2)}, 0.5)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_momentum_update_is_contraction(seed, m):
    rng = SeededRng(seed)
    k = {"a": rng.normal(6), "b": rng.normal(4)}
    q = {"a": rng.normal(6), "b": rng.normal(4)}
    before = math.sqrt(sum(np.sum((k[n] - q[n]) ** 2) for n in k))
    C.momentum_update(k, q, m)
    after = math.sqrt(sum(np.sum((k[n] - q[n]) ** 2) for n in k))
    assert after == pytest.approx(m * before, rel=1e-12, abs=1e-15)


def test_cosine_sim_examples():
    assert C.cosine_sim([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert C.cosine_sim([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert C.cosine_sim([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(LossError, match="zero"):
        C.cosine_sim([0.0, 0.0], [1.0, 0.0])


def _result(loss, g):
    return LossResult(loss, grads={"w": np.array(g, dtype=float)})


def test_joint_loss_examples():
    sup, ssl = _result(1.0, [1.0, 0.0]), _result(2.0, [0.0, 1.0])
    res = C.joint_loss(sup, ssl, C.JointConfig(0.9, 0.1))
    assert res.loss == pytest.approx(1.1, abs=1e-15)
    np.testing.assert_allclose(res.grads["w"], [0.9, 0.1], atol=1e-15)
    pure = C.joint_loss(sup, ssl, C.JointConfig(1.0, 0.0))
    assert pure.loss == sup.loss
    np.testing.assert_array_equal(pure.grads["w"], sup.grads["w"])


@given(st.floats(-5, 5), st.floats(0, 3), st.floats(0, 3))
def test_joint_loss_linear(a, l1, l2):
    if l1 + l2 == 0:
        l1 = 1.0
    cfg = C.JointConfig(l1, l2)
    base = C.joint_loss(_result(1.5, [1.0]), _result(-0.5, [2.0]), cfg).loss
    scaled = C.joint_loss(_result(a * 1.5, [a]), _result(a * -0.5, [2 * a]), cfg).loss
    assert scaled == pytest.approx(a * base, rel=1e-12, abs=1e-12)


def test_joint_config_validation():
    with pytest.raises(LossError):
        C.JointConfig(0.0, 0.0).validate()
    with pytest.raises(LossError):
        C.ContrastiveConfig(tau=0.0).validate()


# -- trainers ---------------------------------------------------------------------------------------------


def tiny_setup(n_unlabeled=200, seed=0):
    ds = generate(DatasetConfig(seed=seed, head_count=30, imbalance_ratio=0.2))
    mcfg = ModelConfig(hidden=(16,), embed_dim=8, proj_hidden=8, proj_dim=8, num_classes=ds.num_classes)
    model = Model(mcfg, seed=seed)
    rng = SeededRng(seed).child("pick")
    idx = rng.permutation(len(ds))[:n_unlabeled]
    return ds, model, ds.features[idx], ds.meta[idx]


SSL_POLICY = AugmentPolicy(jitter_sigma=0.3, mask_prob=0.1, scale_range=(0.8, 1.2))


def test_moco_noop_configuration_is_bit_identical():
    _, model, x, m = tiny_setup(60)
    before = {k: v.copy() for k, v in model.params.items()}
    key = C.make_key_model(model)
    key_before = {k: v.copy() for k, v in key.params.items()}
    opt = OptimizerState(base_lr=0.0, weight_decay=0.0, total_steps=10)
    batches = make_batches(x, m, None, 16, SeededRng(0), drop_last=True)
    C.moco_pretrain_epoch(model, key, batches, C.ContrastiveConfig(momentum_m=1.0), opt, SeededRng(1), SSL_POLICY)
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])
    for k in key_before:
        np.testing.assert_array_equal(key.params[k], key_before[k])


def _moco_run(seed, epochs=3, n=80):
    _, model, x, m = tiny_setup(n, seed)
    key = C.make_key_model(model)
    cfg = C.ContrastiveConfig()
    opt = OptimizerState(base_lr=1e-2, total_steps=epochs * (n // 16))
    losses = []
    for e in range(epochs):
        root = SeededRng(seed).child(f"epoch/{e}")
        batches = make_batches(x, m, None, 16, root.child("shuffle"), drop_last=True)
        losses.append(C.moco_pretrain_epoch(model, key, batches, cfg, opt, root.child("aug"), SSL_POLICY))
    return model, key, losses


def test_moco_deterministic_and_key_never_gets_gradient():
    a, key_a, la = _moco_run(5)
    b, key_b, lb = _moco_run(5)
    assert la == lb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert set(key_a.params) == {k for k in a.params if k.startswith(C.KEY_PREFIXES)}
    assert not any(k.startswith(("cls", "pred")) for k in key_a.params)
    for g in key_a.grad_buffer.values():
        assert not np.any(g)
    # the key moved toward the query encoder but is not equal to it
    assert any(not np.array_equal(key_a.params[k], a.params[k]) for k in key_a.params)


def test_moco_loss_trend_on_200_samples():
    _, _, losses = _moco_run(0, epochs=10, n=200)
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    assert np.mean(losses[5:]) < np.mean(losses[:5])


def test_moco_rejects_empty_loader():
    _, model, _, _ = tiny_setup(20)
    with pytest.raises(ValueError, match="empty"):
        C.moco_pretrain_epoch(model, C.make_key_model(model), [], C.ContrastiveConfig(), OptimizerState(), SeededRng(0), SSL_POLICY)


def _labeled(ds, seed=0, bs=16):
    tr = ds.subset("train")
    return make_batches(tr.features, tr.meta, tr.labels, bs, SeededRng(seed))


def test_simclr_lambda2_zero_equals_supervised():
    ds, model, x, m = tiny_setup(64)
    twin = model.copy()
    labeled = _labeled(ds)
    unlabeled = make_batches(x, m, None, 16, SeededRng(1), drop_last=True)
    spec = LossSpec("ce")
    o1, o2 = OptimizerState(total_steps=20), OptimizerState(total_steps=20)
    parts = C.simclr_joint_epoch(
        model, labeled, unlabeled, C.ContrastiveConfig(), C.JointConfig(1.0, 0.0), spec, o1, SeededRng(2), SeededRng(3), SSL_POLICY
    )
    loss = supervised_epoch(twin, labeled, spec, o2, SeededRng(2))
    assert parts["sup"] == loss and parts["self"] == 0.0
    for k in model.params:
        np.testing.assert_array_equal(model.params[k], twin.params[k])


def test_simclr_lambda1_zero_leaves_classifier_untouched():
    ds, model, x, m = tiny_setup(64)
    cls_before = {k: v.copy() for k, v in model.params.items() if k.startswith("cls")}
    unlabeled = make_batches(x, m, None, 16, SeededRng(1), drop_last=True)
    C.simclr_joint_epoch(
        model, _labeled(ds), unlabeled, C.ContrastiveConfig(), C.JointConfig(0.0, 1.0), LossSpec("ce"),
        OptimizerState(total_steps=20), SeededRng(2), SeededRng(3), SSL_POLICY,
    )
    for k, v in cls_before.items():
        np.testing.assert_array_equal(model.params[k], v)
    assert not np.array_equal(model.params["enc0.W"], tiny_setup(64)[1].params["enc0.W"])


def test_simclr_components_finite_and_self_term_decreases():
    ds, model, x, m = tiny_setup(200)
    opt = OptimizerState(base_lr=1e-2, total_steps=10 * len(_labeled(ds)))
    history = []
    for e in range(10):
        root = SeededRng(0).child(f"joint/{e}")
        unlabeled = make_batches(x, m, None, 16, root.child("u"), drop_last=True)
        parts = C.simclr_joint_epoch(
            model, _labeled(ds, e), unlabeled, C.ContrastiveConfig(), C.JointConfig(), LossSpec("ce"),
            opt, root.child("sup"), root.child("ssl"), SSL_POLICY,
        )
        history.append(parts)
    assert all(np.isfinite([h["sup"], h["self"], h["joint"]]).all() for h in history)
    assert history[-1]["self"] < history[0]["self"]
    assert history[-1]["sup"] < history[0]["sup"]


def test_simclr_rejects_empty_loaders():
    ds, model, _, _ = tiny_setup(20)
    with pytest.raises(ValueError):
        C.simclr_joint_epoch(model, _labeled(ds), [], C.ContrastiveConfig(), C.JointConfig(), LossSpec(), OptimizerState(), SeededRng(0), SeededRng(1), SSL_POLICY)
