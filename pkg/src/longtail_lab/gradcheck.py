"""Central finite-difference checks for every analytic gradient in the package.

The error metric is ``||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-8)``
over the whole gradient of one input.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import contrastive as C
from . import losses as L
from .datagen import AugmentPolicy
from .model import Model, ModelConfig
from .numerics import SeededRng, l2_normalize_rows
from .training import Batch, LossSpec, supervised_loss

H = 1e-5
TOLERANCE = 1e-6


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2.0 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8))


def _rand(rng: SeededRng, *shape) -> np.ndarray:
    return rng.normal(int(np.prod(shape))).reshape(shape)


def _unit(rng: SeededRng, *shape) -> np.ndarray:
    return l2_normalize_rows(_rand(rng, *shape))[0]


def _dims(rng: SeededRng) -> tuple[int, int]:
    return 2 + rng.randint(7), 2 + rng.randint(4)  # batch <= 8, classes <= 5


# one trial per loss; each returns the worst relative error across its inputs -----

def trial_soft_target_ce(rng: SeededRng) -> float:
    n, c = _dims(rng)
    z = 2.0 * _rand(rng, n, c)
    t = rng.uniform(n * c).reshape(n, c) + 0.05
    t /= t.sum(axis=1, keepdims=True)
    res = L.soft_target_ce(z, t)
    return rel_error(res.grad_logits, numeric_grad(lambda v: L.soft_target_ce(v, t).loss, z))


def trial_label_smoothing(rng: SeededRng) -> float:
    n, c = _dims(rng)
    z = 2.0 * _rand(rng, n, c)
    y = np.array([rng.randint(c) for _ in range(n)])
    eps = 0.3 * rng.next_uniform()
    res = L.label_smoothing_ce(z, y, eps)
    return rel_error(res.grad_logits, numeric_grad(lambda v: L.label_smoothing_ce(v, y, eps).loss, z))


def trial_arcface(rng: SeededRng) -> float:
    n, c = _dims(rng)
    d = 2 + rng.randint(5)
    x = _rand(rng, n, d)
    w = _rand(rng, d, c)
    y = np.array([rng.randint(c) for _ in range(n)])
    cfg = L.ArcfaceConfig(scale_s=1.0 + 15.0 * rng.next_uniform(), margin_m=0.5 * rng.next_uniform())
    res = L.arcface(x, w, y, cfg)
    ex = rel_error(res.grad_embeddings, numeric_grad(lambda v: L.arcface(v, w, y, cfg).loss, x))
    ew = rel_error(res.grad_weights, numeric_grad(lambda v: L.arcface(x, v, y, cfg).loss, w))
    return max(ex, ew)


def trial_seesaw(rng: SeededRng) -> float:
    n, c = _dims(rng)
    z = 2.0 * _rand(rng, n, c)
    y = np.array([rng.randint(c) for _ in range(n)])
    counts = np.array([rng.randint(50) for _ in range(c)], dtype=np.int64)
    cfg = L.SeesawConfig()
    res = L.seesaw(z, y, L.SeesawState(counts.copy()), cfg)
    factors = res.extras["factors"]

    # the rescaling factors are constants of the gradient: hold them fixed
    def frozen(v: np.ndarray) -> float:
        rows = np.arange(n)
        w = factors * np.exp(v)
        return float(np.mean(np.log(w.sum(axis=1)) - v[rows, y]))

    return rel_error(res.grad_logits, numeric_grad(frozen, z))


def trial_info_nce(rng: SeededRng) -> float:
    n = 2 + rng.randint(7)
    k = n + rng.randint(4)
    d = 2 + rng.randint(5)
    q = _unit(rng, n, d)
    keys = _unit(rng, k, d)
    pos = np.array([rng.randint(k) for _ in range(n)])
    tau = 0.1 + rng.next_uniform()
    res = C.info_nce(q, keys, pos, tau)

    def raw(qv, kv):
        logits = qv @ kv.T / tau
        top = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - top).sum(axis=1)) + top[:, 0]
        return float(np.mean(lse - logits[np.arange(n), pos]))

    eq = rel_error(res.grads["q"], numeric_grad(lambda v: raw(v, keys), q))
    ek = rel_error(res.grads["keys"], numeric_grad(lambda v: raw(q, v), keys))
    return max(eq, ek)


def trial_symmetrized_ctr(rng: SeededRng) -> float:
    n = 2 + rng.randint(7)
    d = 2 + rng.randint(5)
    q1, q2, k1, k2 = (_unit(rng, n, d) for _ in range(4))
    tau = 0.1 + rng.next_uniform()
    res = C.symmetrized_ctr(q1, q2, k1, k2, tau)

    def raw(a, b, c, e):
        total = 0.0
        for q, k in ((a, e), (b, c)):
            logits = q @ k.T / tau
            top = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - top).sum(axis=1)) + top[:, 0]
            total += 2 * tau * float(np.mean(lse - np.diag(logits)))
        return total

    e1 = rel_error(res.grads["q1"], numeric_grad(lambda v: raw(v, q2, k1, k2), q1))
    e2 = rel_error(res.grads["q2"], numeric_grad(lambda v: raw(q1, v, k1, k2), q2))
    return max(e1, e2)


def trial_nt_xent(rng: SeededRng) -> float:
    n = 2 + rng.randint(4)
    d = 2 + rng.randint(5)
    z = _rand(rng, 2 * n, d)
    tau = 0.1 + rng.next_uniform()
    res = C.nt_xent(z, tau)
    return rel_error(res.grads["z"], numeric_grad(lambda v: C.nt_xent(v, tau).loss, z))


def _tiny_model(rng: SeededRng, head: str = "linear") -> tuple[Model, Batch]:
    n, c = _dims(rng)
    cfg = ModelConfig(feature_dim=3, meta_dim=2, hidden=(4,), embed_dim=3, num_classes=c, head=head, proj_hidden=4, proj_dim=4)
    model = Model(cfg, seed=rng.next_u64())
    for k in model.params:
        model.params[k] = model.params[k] + 0.1 * _rand(rng, *model.params[k].shape)
    x = _rand(rng, n, 3)
    meta = np.zeros((n, 2))
    meta[np.arange(n), [rng.randint(2) for _ in range(n)]] = 1.0
    y = np.array([rng.randint(c) for _ in range(n)])
    return model, Batch(x, meta, y)


def _param_check(model: Model, grads: dict[str, np.ndarray], loss_fn: Callable[[], float]) -> float:
    worst = 0.0
    for name, p in model.params.items():
        if name not in grads:
            continue

        def f(v, name=name):
            saved = model.params[name]
            model.params[name] = v
            try:
                return loss_fn()
            finally:
                model.params[name] = saved

        worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
    return worst


def trial_joint(rng: SeededRng) -> float:
    model, batch = _tiny_model(rng)
    unl = Batch(_rand(rng, 3, 3), batch.meta[:1].repeat(3, axis=0))
    jc = C.JointConfig(rng.next_uniform(), rng.next_uniform())
    spec = LossSpec("ce")
    cc = C.ContrastiveConfig(tau=0.5)

    ident = AugmentPolicy()

    def total() -> float:
        sup = supervised_loss(model, batch, spec)
        ssl = C.self_supervised_loss(model, unl, cc, rng, ident)
        return C.joint_loss(sup, ssl, jc).loss

    res = C.joint_loss(supervised_loss(model, batch, spec), C.self_supervised_loss(model, unl, cc, rng, ident), jc)
    return _param_check(model, res.grads, total)


def trial_model_backward(rng: SeededRng) -> float:
    head = "arcface" if rng.next_uniform() < 0.3 else "linear"
    model, batch = _tiny_model(rng, head)
    spec = LossSpec("arcface" if head == "arcface" else "label_smoothing")
    res = supervised_loss(model, batch, spec)
    return _param_check(model, res.grads, lambda: supervised_loss(model, batch, spec).loss)


def trial_moco_query_path(rng: SeededRng) -> float:
    model, batch = _tiny_model(rng)
    key = C.make_key_model(model)
    tau = 0.5
    x1 = batch.features
    x2 = batch.features + 0.1 * _rand(rng, *batch.features.shape)
    k1 = C._key_path(key, x1, batch.meta)
    k2 = C._key_path(key, x2, batch.meta)

    def total() -> float:
        q1, _ = C._query_path(model, x1, batch.meta)
        q2, _ = C._query_path(model, x2, batch.meta)
        return C.symmetrized_ctr(q1, q2, k1, k2, tau).loss

    q1, c1 = C._query_path(model, x1, batch.meta)
    q2, c2 = C._query_path(model, x2, batch.meta)
    res = C.symmetrized_ctr(q1, q2, k1, k2, tau)
    grads: dict[str, np.ndarray] = {}
    C._query_backward(model, c1, res.grads["q1"], grads)
    C._query_backward(model, c2, res.grads["q2"], grads)
    return _param_check(model, grads, total)


TRIALS: dict[str, Callable[[SeededRng], float]] = {
    "soft_target_ce": trial_soft_target_ce,
    "label_smoothing_ce": trial_label_smoothing,
    "arcface": trial_arcface,
    "seesaw": trial_seesaw,
    "info_nce": trial_info_nce,
    "symmetrized_ctr": trial_symmetrized_ctr,
    "nt_xent": trial_nt_xent,
    "joint_loss": trial_joint,
    "model_backward": trial_model_backward,
    "moco_query_path": trial_moco_query_path,
}


@dataclass
class GradcheckReport:
    name: str
    trials: int
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def run_suite(trials: int = 100, seed: int = 0, names=None) -> list[GradcheckReport]:
    out = []
    for name in names or TRIALS:
        fn = TRIALS[name]
        rng = SeededRng(seed).child(f"gradcheck/{name}")
        t0 = time.perf_counter()
        worst = max(fn(rng) for _ in range(trials))
        out.append(GradcheckReport(name, trials, worst, time.perf_counter() - t0))
    return out
