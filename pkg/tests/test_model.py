import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longtail_lab import losses as L
from longtail_lab.gradcheck import numeric_grad, rel_error
from longtail_lab.model import (
    CKPT_VERSION,
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    Model,
    ModelConfig,
    ModelError,
    OptimizerState,
    accumulate_and_step,
    adamw_step,
    cosine_lr,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
)
from longtail_lab.numerics import SeededRng
from longtail_lab.training import Batch, LossSpec, make_batches, supervised_epoch, supervised_loss

ADAMW_ONE_STEP = 0.899000001999999996  # 0.999 - 0.1 * 0.5 / (0.5 + 1e-8)


def small(head="linear", use_meta=True, seed=0):
    cfg = ModelConfig(feature_dim=3, meta_dim=2, hidden=(4, 3), embed_dim=3, num_classes=4, head=head,
                      proj_hidden=3, proj_dim=3, use_meta=use_meta)
    return Model(cfg, seed=seed)


def data(seed, n=5):
    rng = SeededRng(seed)
    x = rng.normal(3 * n).reshape(n, 3)
    meta = np.eye(2)[[rng.randint(2) for _ in range(n)]]
    y = np.array([rng.randint(4) for _ in range(n)])
    return x, meta, y


# -- forward --------------------------------------------------------------------------------------


def test_zero_weights_give_zero_logits():
    model = small()
    for v in model.params.values():
        v[...] = 0.0
    x, m, _ = data(0)
    np.testing.assert_array_equal(model.forward(x, m).logits, 0.0)


def test_meta_disabled_equals_zero_meta():
    model = small()
    x, m, _ = data(1)
    off = Model(ModelConfig(**{**model.cfg.__dict__, "use_meta": False}), {k: v.copy() for k, v in model.params.items()})
    np.testing.assert_array_equal(off.forward(x, m).logits, model.forward(x, np.zeros_like(m)).logits)
    np.testing.assert_array_equal(model.forward(x, None).logits, model.forward(x, np.zeros_like(m)).logits)


def test_meta_channel_is_concatenation():
    model = small()
    x, m, _ = data(2)
    wide = np.vstack([model.params["enc0.W"], model.params["enc0.meta"]])
    pre = np.hstack([x, m]) @ wide + model.params["enc0.b"]
    _, cache = model.encode(x, m)
    np.testing.assert_allclose(cache.outputs[0], np.tanh(pre), atol=1e-15)


def test_hand_computed_logits():
    # one hidden layer; tanh(0) = 0 keeps the hand arithmetic linear
    cfg = ModelConfig(feature_dim=2, meta_dim=1, hidden=(2,), embed_dim=2, num_classes=2, proj_hidden=2, proj_dim=2)
    model = Model(cfg, seed=0)
    p = model.params
    p["enc0.W"][...] = [[1.0, 0.0], [0.0, 1.0]]
    p["enc0.meta"][...] = 0.0
    p["enc0.b"][...] = 0.0
    p["embed.W"][...] = [[2.0, 0.0], [1.0, 3.0]]
    p["embed.b"][...] = [0.5, -0.5]
    p["cls.W"][...] = [[1.0, -1.0], [0.0, 2.0]]
    p["cls.b"][...] = [0.0, 1.0]
    x = np.array([[0.0, 0.0], [0.3, -0.2]])
    h = np.tanh(x)
    emb = h @ np.array([[2.0, 0.0], [1.0, 3.0]]) + [0.5, -0.5]
    expected = emb @ np.array([[1.0, -1.0], [0.0, 2.0]]) + [0.0, 1.0]
    np.testing.assert_allclose(model.forward(x, np.zeros((2, 1))).logits, expected, atol=1e-15)
    # the zero sample goes through exactly: emb = [0.5, -0.5], logits = [0.5, -0.5]
    np.testing.assert_allclose(model.forward(x[:1], np.zeros((1, 1))).logits, [[0.5, -0.5]], atol=1e-15)


def test_dimension_mismatch_rejected():
    model = small()
    with pytest.raises(ModelError, match="feature dim"):
        model.forward(np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ModelError, match="meta shape"):
        model.forward(np.zeros((2, 3)), np.zeros((2, 3)))


def test_arcface_head_has_no_bias():
    model = small("arcface")
    assert "cls.b" not in model.params
    with pytest.raises(ModelError, match="bias"):
        Model(model.cfg, {**model.params, "cls.b": np.zeros(4)})


def test_batched_prediction_matches_single_pass():
    model = small()
    x, m, _ = data(3, n=37)
    np.testing.assert_array_equal(predict_logits(model, x, m, batch_size=5), model.forward(x, m).logits)


# -- backward -------------------------------------------------------------------------------------


def _ce_loss(model, x, m, y):
    return L.cross_entropy(model.forward(x, m).logits, y).loss


@given(st.integers(0, 10_000))
def test_full_backward_matches_finite_differences(seed):
    model = small(seed=seed)
    x, m, y = data(seed)
    fwd = model.forward(x, m)
    grads = model.backward(fwd.cache, grad_logits=L.cross_entropy(fwd.logits, y).grad_logits)
    assert set(grads) == set(model.params) - {k for k in model.params if k.startswith(("proj", "pred"))}
    for name in grads:
        p = model.params[name]

        def f(v, name=name):
            old = model.params[name]
            model.params[name] = v
            try:
                return _ce_loss(model, x, m, y)
            finally:
                model.params[name] = old

        assert rel_error(grads[name], numeric_grad(f, p.copy())) < 1e-6, name


def test_arcface_backward_through_encoder():
    model = small("arcface", seed=4)
    x, m, y = data(4)
    res = supervised_loss(model, Batch(x, m, y), LossSpec("arcface"))

    def f(v):
        old = model.params["enc0.meta"]
        model.params["enc0.meta"] = v
        try:
            emb = model.encode(x, m)[0]
            return L.arcface(emb, model.params["cls.W"], y, LossSpec("arcface").arcface).loss
        finally:
            model.params["enc0.meta"] = old

    assert rel_error(res.grads["enc0.meta"], numeric_grad(f, model.params["enc0.meta"].copy())) < 1e-6


def test_zero_upstream_gives_zero_gradients():
    model = small()
    x, m, _ = data(5)
    fwd = model.forward(x, m)
    grads = model.backward(fwd.cache, grad_logits=np.zeros_like(fwd.logits))
    assert all(not np.any(g) for g in grads.values())


def test_duplicated_sample_doubles_contribution():
    model = small()
    x, m, _ = data(6, n=1)
    g_up = np.array([[0.3, -0.1, 0.2, -0.4]])
    single = model.backward(model.forward(x, m).cache, grad_logits=g_up)
    fwd2 = model.forward(np.vstack([x, x]), np.vstack([m, m]))
    double = model.backward(fwd2.cache, grad_logits=np.vstack([g_up, g_up]))
    for k in single:
        np.testing.assert_allclose(double[k], 2 * single[k], atol=1e-14)


def test_stale_cache_rejected():
    model = small()
    x, m, y = data(7)
    fwd = model.forward(x, m)
    accumulate_and_step(model, {"cls.b": np.ones(4)}, OptimizerState(total_steps=5))
    with pytest.raises(ModelError, match="stale"):
        model.backward(fwd.cache, grad_logits=np.zeros_like(fwd.logits))


def test_grad_logits_requires_linear_head():
    model = small("arcface")
    x, m, _ = data(0)
    fwd = model.forward(x, m)
    with pytest.raises(ModelError):
        model.backward(fwd.cache, grad_logits=np.zeros_like(fwd.logits))


# -- optimizer -----------------------------------------------------------------------------------------


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    assert cosine_lr(0, 10, 5e-5, batch_size=56, ref_batch=28) == pytest.approx(1e-4, abs=1e-20)
    with pytest.raises(ModelError):
        cosine_lr(0, 0, 1e-3)
    with pytest.raises(ModelError):
        cosine_lr(11, 10, 1e-3)


def test_adamw_hand_oracle():
    params = {"w": np.array([1.0])}
    state = OptimizerState(base_lr=0.1, weight_decay=0.01, total_steps=10)
    adamw_step(params, {"w": np.array([0.5])}, state)
    assert params["w"][0] == pytest.approx(ADAMW_ONE_STEP, abs=1e-15)
    assert state.step == 1


def test_adamw_zero_grad_zero_decay_is_noop_and_decay_shrinks():
    params = {"w": np.array([2.0, -3.0])}
    adamw_step(params, {"w": np.zeros(2)}, OptimizerState(base_lr=0.1, weight_decay=0.0, total_steps=4))
    np.testing.assert_array_equal(params["w"], [2.0, -3.0])
    state = OptimizerState(base_lr=0.1, weight_decay=0.5, total_steps=1000)
    expected = np.array([2.0, -3.0])
    for _ in range(3):
        lr = state.current_lr()
        adamw_step(params, {"w": np.zeros(2)}, state)
        expected = expected * (1 - lr * 0.5)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-15)


def test_adamw_rejects_bad_grads():
    params = {"w": np.zeros(2)}
    with pytest.raises(ModelError, match="'w'"):
        adamw_step(params, {"w": np.array([np.nan, 0.0])}, OptimizerState())
    with pytest.raises(ModelError, match="unknown"):
        adamw_step(params, {"v": np.zeros(2)}, OptimizerState())


def _grads(model, x, m, y):
    return supervised_loss(model, Batch(x, m, y), LossSpec("ce")).grads


def test_accumulate_one_is_plain_step():
    a, b = small(), small()
    x, m, y = data(8)
    accumulate_and_step(a, _grads(a, x, m, y), OptimizerState(total_steps=3))
    adamw_step(b.params, _grads(b, x, m, y), OptimizerState(total_steps=3))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_accumulate_two_equal_micro_batches_equals_one_step():
    a, b = small(), small()
    x, m, y = data(9)
    sa = OptimizerState(total_steps=3, accumulate_steps=2)
    assert not accumulate_and_step(a, _grads(a, x, m, y), sa)
    assert accumulate_and_step(a, _grads(a, x, m, y), sa)
    accumulate_and_step(b, _grads(b, x, m, y), OptimizerState(total_steps=3))
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-15)


def test_accumulate_two_different_micro_batches_equals_union_step():
    a, b = small(), small()
    x, m, y = data(10, n=8)
    sa = OptimizerState(total_steps=3, accumulate_steps=2)
    accumulate_and_step(a, _grads(a, x[:4], m[:4], y[:4]), sa)
    accumulate_and_step(a, _grads(a, x[4:], m[4:], y[4:]), sa)
    accumulate_and_step(b, _grads(b, x, m, y), OptimizerState(total_steps=3))
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-12)


# -- checkpoints ---------------------------------------------------------------------------------------


def _trained(seed=0, epochs=2):
    model = small(seed=seed)
    x, m, y = data(seed, n=20)
    opt = OptimizerState(total_steps=40, accumulate_steps=2)
    for e in range(epochs):
        supervised_epoch(model, make_batches(x, m, y, 3, SeededRng(e)), LossSpec("ce"), opt, SeededRng(100 + e))
    return model, opt


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model, opt = _trained()
    rng = SeededRng(3)
    rng.normal(3)
    ck = Checkpoint(model.params, opt, rng.get_state(), {"note": "x"}, {"counts": np.arange(4.0)})
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.params.keys() == model.params.keys()
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    for k in opt.m:
        assert back.optimizer.m[k].tobytes() == opt.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == opt.v[k].tobytes()
    assert back.optimizer.scalars() == opt.scalars()
    assert back.rng_state == rng.get_state()
    assert back.config == {"note": "x"}
    np.testing.assert_array_equal(back.extra_arrays["counts"], np.arange(4.0))


def test_checkpoint_corruption_detected(tmp_path):
    model, opt = _trained()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, Checkpoint(model.params, opt))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(path)


def test_checkpoint_truncation_and_version(tmp_path):
    model, _ = _trained()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, Checkpoint(model.params))
    good = path.read_bytes()
    path.write_bytes(good[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(good[:6])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(good[:8] + struct.pack("<I", CKPT_VERSION + 1) + good[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + good[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted_training(tmp_path):
    full, _ = _trained(seed=1, epochs=4)
    half, opt = _trained(seed=1, epochs=2)
    save_checkpoint(tmp_path / "mid.ckpt", Checkpoint(half.params, opt))
    ck = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = Model(half.cfg, ck.params)
    x, m, y = data(1, n=20)
    for e in range(2, 4):
        supervised_epoch(resumed, make_batches(x, m, y, 3, SeededRng(e)), LossSpec("ce"), ck.optimizer, SeededRng(100 + e))
    for k in full.params:
        assert resumed.params[k].tobytes() == full.params[k].tobytes()
