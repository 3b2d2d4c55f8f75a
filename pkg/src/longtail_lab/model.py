"""Feed-forward encoder with a meta-attribute channel, heads, and AdamW.

Parameter names (all float64 arrays in ``Model.params``)::

    enc0.W  (feature_dim, h0)   enc0.meta (meta_dim, h0)   enc0.b (h0,)
    enc{i}.W, enc{i}.b          tanh hidden layers
    embed.W, embed.b            linear map to the embedding
    cls.W   (embed_dim, C)      cls.b (C,)   -- no bias in arcface mode
    proj0/proj1                 projection head (tanh between)
    pred0/pred1                 prediction head (tanh between)

Feeding the meta one-hot through ``enc0.meta`` is the same as concatenating
it to the features in front of one wide first layer.
"""
from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng, as_matrix, check_finite


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    meta_dim: int = 4
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    num_classes: int = 12
    head: str = "linear"  # "linear" or "arcface"
    arcface_scale: float = 16.0
    proj_hidden: int = 32
    proj_dim: int = 16
    use_meta: bool = True

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.head not in ("linear", "arcface"):
            raise ModelError(f"unknown classifier head {self.head!r}")
        if not self.hidden:
            raise ModelError("encoder needs at least one hidden layer")

    @property
    def encoder_layers(self) -> list[str]:
        return [f"enc{i}" for i in range(len(self.hidden))] + ["embed"]


PROJ_LAYERS = ["proj0", "proj1"]
PRED_LAYERS = ["pred0", "pred1"]


def init_params(cfg: ModelConfig, rng: SeededRng) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}

    def dense(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        params[f"{name}.W"] = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) / math.sqrt(fan_in)
        if bias:
            params[f"{name}.b"] = np.zeros(fan_out)

    dims = [cfg.feature_dim, *cfg.hidden]
    for i in range(len(cfg.hidden)):
        dense(f"enc{i}", dims[i], dims[i + 1])
        if i == 0:
            params["enc0.meta"] = rng.normal(cfg.meta_dim * dims[1]).reshape(cfg.meta_dim, dims[1]) / math.sqrt(
                cfg.feature_dim + cfg.meta_dim
            )
    dense("embed", cfg.hidden[-1], cfg.embed_dim)
    dense("cls", cfg.embed_dim, cfg.num_classes, bias=cfg.head == "linear")
    dense("proj0", cfg.embed_dim, cfg.proj_hidden)
    dense("proj1", cfg.proj_hidden, cfg.proj_dim)
    dense("pred0", cfg.proj_dim, cfg.proj_hidden)
    dense("pred1", cfg.proj_hidden, cfg.proj_dim)
    return params


@dataclass
class StackCache:
    layers: list[str]
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    activated: list[bool]
    meta: np.ndarray | None
    version: int


@dataclass
class ForwardResult:
    embedding: np.ndarray
    logits: np.ndarray
    cache: StackCache


class Model:
    """Parameters plus forward/backward.  ``version`` changes whenever params move."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, SeededRng(seed).child("init"))
        if cfg.head == "arcface" and "cls.b" in self.params:
            raise ModelError("arcface head takes no classifier bias")
        self.version = 0

    def copy(self) -> "Model":
        other = Model(copy.deepcopy(self.cfg), {k: v.copy() for k, v in self.params.items()})
        other.version = self.version
        return other

    def touch(self) -> None:
        self.version += 1

    # stacks ---------------------------------------------------------------------
    def _stack_forward(self, layers: list[str], x: np.ndarray, meta: np.ndarray | None = None) -> tuple[np.ndarray, StackCache]:
        cache = StackCache(layers, [], [], [], meta, self.version)
        h = x
        for i, name in enumerate(layers):
            pre = h @ self.params[f"{name}.W"] + self.params[f"{name}.b"]
            if meta is not None and i == 0:
                pre = pre + meta @ self.params[f"{name}.meta"]
            act = i < len(layers) - 1
            out = np.tanh(pre) if act else pre
            cache.inputs.append(h)
            cache.outputs.append(out)
            cache.activated.append(act)
            h = out
        return h, cache

    def _stack_backward(self, cache: StackCache, grad_out: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        if cache.version != self.version:
            raise ModelError("stale forward cache: parameters changed since the forward pass")
        g = grad_out
        for i in reversed(range(len(cache.layers))):
            name = cache.layers[i]
            if cache.activated[i]:
                g = g * (1.0 - cache.outputs[i] ** 2)
            _acc(grads, f"{name}.W", cache.inputs[i].T @ g)
            _acc(grads, f"{name}.b", g.sum(axis=0))
            if cache.meta is not None and i == 0:
                _acc(grads, f"{name}.meta", cache.meta.T @ g)
            g = g @ self.params[f"{name}.W"].T
        return g

    # encoder + classifier ------------------------------------------------------
    def _check_inputs(self, features, meta) -> tuple[np.ndarray, np.ndarray]:
        x = as_matrix(features)
        if x.shape[1] != self.cfg.feature_dim:
            raise ModelError(f"feature dim {x.shape[1]} != configured {self.cfg.feature_dim}")
        if meta is None or not self.cfg.use_meta:
            m = np.zeros((x.shape[0], self.cfg.meta_dim))
        else:
            m = as_matrix(meta)
            if m.shape != (x.shape[0], self.cfg.meta_dim):
                raise ModelError(f"meta shape {m.shape} != ({x.shape[0]}, {self.cfg.meta_dim})")
        check_finite(x, "features")
        return x, m

    def encode(self, features, meta=None) -> tuple[np.ndarray, StackCache]:
        x, m = self._check_inputs(features, meta)
        return self._stack_forward(self.cfg.encoder_layers, x, m)

    def classify(self, embedding: np.ndarray) -> np.ndarray:
        w = self.params["cls.W"]
        if self.cfg.head == "linear":
            return embedding @ w + self.params["cls.b"]
        e_norm = np.linalg.norm(embedding, axis=1, keepdims=True)
        w_norm = np.linalg.norm(w, axis=0, keepdims=True)
        cos = (embedding / np.maximum(e_norm, 1e-12)) @ (w / np.maximum(w_norm, 1e-12))
        return self.cfg.arcface_scale * cos

    def forward(self, features, meta=None) -> ForwardResult:
        emb, cache = self.encode(features, meta)
        return ForwardResult(emb, self.classify(emb), cache)

    def backward(
        self,
        cache: StackCache,
        grad_logits: np.ndarray | None = None,
        grad_embedding: np.ndarray | None = None,
        grads: dict[str, np.ndarray] | None = None,
    ) -> dict[str, np.ndarray]:
        """Reverse pass through classifier (linear head) and encoder.

        ``grad_logits`` is only accepted for the linear head; an arcface loss
        supplies ``grad_embedding`` and its own ``cls.W`` gradient.
        """
        grads = {} if grads is None else grads
        emb = cache.outputs[-1]
        g_emb = np.zeros_like(emb) if grad_embedding is None else np.array(grad_embedding, dtype=np.float64)
        if grad_logits is not None:
            if self.cfg.head != "linear":
                raise ModelError("grad_logits backward requires the linear head")
            _acc(grads, "cls.W", emb.T @ grad_logits)
            _acc(grads, "cls.b", grad_logits.sum(axis=0))
            g_emb = g_emb + grad_logits @ self.params["cls.W"].T
        self._stack_backward(cache, g_emb, grads)
        return grads

    # heads -----------------------------------------------------------------------
    def project(self, embedding: np.ndarray) -> tuple[np.ndarray, StackCache]:
        return self._stack_forward(PROJ_LAYERS, embedding)

    def predict_head(self, z: np.ndarray) -> tuple[np.ndarray, StackCache]:
        return self._stack_forward(PRED_LAYERS, z)

    def head_backward(self, cache: StackCache, grad_out: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        return self._stack_backward(cache, grad_out, grads)

    def encoder_backward(self, cache: StackCache, grad_embedding: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        self._stack_backward(cache, grad_embedding, grads)


def _acc(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = np.array(value, dtype=np.float64)


def predict_logits(model: Model, features, meta=None, batch_size: int = 512) -> np.ndarray:
    x = as_matrix(features)
    meta = None if meta is None else as_matrix(meta)
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        chunks.append(model.forward(x[sl], None if meta is None else meta[sl]).logits)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.cfg.num_classes))


# optimisation ------------------------------------------------------------------

PAPER_BASE_LR = 5e-5
REF_BATCH = 28


def cosine_lr(step: int, total_steps: int, base_lr: float, batch_size: int = REF_BATCH, ref_batch: int = REF_BATCH) -> float:
    if total_steps <= 0:
        raise ModelError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ModelError(f"step {step} outside [0, {total_steps}]")
    effective = base_lr * (batch_size / ref_batch)
    return effective * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    base_lr: float = 3e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    batch_size: int = REF_BATCH
    ref_batch: int = REF_BATCH
    accumulate_steps: int = 1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    grad_buffer: dict = field(default_factory=dict)
    buffered: int = 0

    def current_lr(self) -> float:
        return cosine_lr(min(self.step, self.total_steps), self.total_steps, self.base_lr, self.batch_size, self.ref_batch)

    def scalars(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("m", "v", "grad_buffer")}
        d["betas"] = list(self.betas)
        return d


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place, on the params that have a gradient."""
    for name, g in grads.items():
        if name not in params:
            raise ModelError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ModelError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for parameter {name!r}")
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def accumulate_and_step(model: Model, micro_grads: dict[str, np.ndarray], state: OptimizerState) -> bool:
    """Buffer one micro-batch gradient; step once ``accumulate_steps`` are in.  Returns True on a step."""
    if state.accumulate_steps < 1:
        raise ModelError("accumulate_steps must be >= 1")
    if state.accumulate_steps == 1:
        adamw_step(model.params, micro_grads, state)
        model.touch()
        return True
    for name, g in micro_grads.items():
        _acc(state.grad_buffer, name, g)
    state.buffered += 1
    if state.buffered < state.accumulate_steps:
        return False
    k = float(state.accumulate_steps)
    averaged = {name: g / k for name, g in state.grad_buffer.items()}
    state.grad_buffer = {}
    state.buffered = 0
    adamw_step(model.params, averaged, state)
    model.touch()
    return True


# checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"LTLABCKP"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sIQI")  # magic, version, total length, header length


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    config: dict = field(default_factory=dict)
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw_name = name.encode("utf-8")
    out = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return out + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout (little endian)::

        magic "LTLABCKP" | u32 version | u64 total file length | u32 header length
        header: UTF-8 JSON (config echo, optimizer scalars, rng state)
        u32 record count, then per record:
            u16 name length | name | u8 rank | u32 dims[rank] | f64 data
        u32 CRC32 of everything before it
    """
    arrays: dict[str, np.ndarray] = {f"param/{k}": v for k, v in ckpt.params.items()}
    header = {"config": ckpt.config, "rng": ckpt.rng_state, "optimizer": None}
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        header["optimizer"] = opt.scalars()
        arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
        arrays.update({f"grad_buffer/{k}": v for k, v in opt.grad_buffer.items()})
    arrays.update({f"extra/{k}": v for k, v in ckpt.extra_arrays.items()})
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(arrays)) + b"".join(_encode_record(k, v) for k, v in arrays.items())
    total = _PREFIX.size + len(header_bytes) + len(body) + 4
    blob = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, total, len(header_bytes)) + header_bytes + body
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed header")
    magic, version, total, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    if len(blob) < total:
        raise CheckpointTruncatedError(f"{path}: {len(blob)} bytes, header promises {total}")
    if len(blob) > total:
        raise CheckpointChecksumError(f"{path}: trailing bytes after the checksum")
    (stored,) = struct.unpack_from("<I", blob, total - 4)
    if zlib.crc32(blob[: total - 4]) & 0xFFFFFFFF != stored:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")

    pos = _PREFIX.size
    header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    optimizer = None
    if header.get("optimizer") is not None:
        sc = dict(header["optimizer"])
        sc["betas"] = tuple(sc["betas"])
        optimizer = OptimizerState(**sc, m=group("adam_m/"), v=group("adam_v/"), grad_buffer=group("grad_buffer/"))
    return Checkpoint(
        params=group("param/"),
        optimizer=optimizer,
        rng_state=header.get("rng"),
        config=header.get("config") or {},
        extra_arrays=group("extra/"),
    )
