"""Dense float64 helpers and a portable seeded random stream.

Matrices are plain 2-D ``numpy.float64`` arrays (row-major).  The random
stream is a counter-based splitmix64 generator so that every draw can be
reproduced from the seed alone, independent of numpy's bit generators:

* ``state`` advances by the golden gamma ``0x9E3779B97F4A7C15`` per word;
  the output word is the splitmix64 finalizer of the advanced state.
* uniforms are ``(word >> 11) * 2**-53`` in ``[0, 1)``.
* normals use the Marsaglia polar method on pairs of uniforms
  ``u, v = 2U - 1``; a rejected pair is skipped, an accepted pair yields two
  normals, the second one is cached and returned by the next request.
* child streams are keyed by ``(seed, tag)``: the child seed is the
  splitmix64 finalizer of ``seed XOR blake2b_64(tag)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class NumericsError(ValueError):
    """Raised for invalid numerical input (non-finite values, empty vectors)."""


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(m: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(m)))[0]
        raise NumericsError(f"{what} contains non-finite value at index {tuple(int(i) for i in bad)}")


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    check_finite(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    check_finite(m, "log-softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_sum_exp(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise NumericsError("log_sum_exp of an empty vector")
    check_finite(v, "log_sum_exp input")
    top = v.max()
    return float(top + math.log(np.exp(v - top).sum()))


def l2_normalize_rows(m, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit norm.

    Returns ``(normalized, degenerate)`` where ``degenerate`` is a boolean
    mask of rows whose norm was below ``eps``; those rows are returned as-is.
    """
    if not eps > 0:
        raise NumericsError("eps must be positive")
    m = as_matrix(m)
    norms = np.sqrt((m * m).sum(axis=1))
    degenerate = norms < eps
    out = m.copy()
    ok = ~degenerate
    out[ok] = m[ok] / norms[ok, None]
    return out, degenerate


def l2_normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given the gradient w.r.t. ``x / ||x||`` (row-wise)."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    unit = x / norms
    return (grad_unit - unit * (unit * grad_unit).sum(axis=1, keepdims=True)) / norms


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def argmax_rows(m: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lower class.
    return np.argmax(as_matrix(m), axis=1)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class SeededRng:
    """splitmix64 stream; see the module docstring for the exact algorithm."""

    seed: int
    state: int = field(default=-1)
    spare: float | None = None

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & MASK64
        if self.state < 0:
            self.state = self.seed

    def child(self, tag: str) -> "SeededRng":
        return SeededRng(_mix64(self.seed ^ _tag_hash(tag)))

    def get_state(self) -> dict:
        return {"seed": self.seed, "state": self.state, "spare": self.spare}

    @classmethod
    def from_state(cls, st: dict) -> "SeededRng":
        spare = st.get("spare")
        return cls(int(st["seed"]), int(st["state"]), None if spare is None else float(spare))

    # raw words ---------------------------------------------------------------
    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def _peek_words(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            return _mix64_array(states)

    def _advance(self, n: int) -> None:
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64

    # uniforms ----------------------------------------------------------------
    def next_uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, n: int) -> np.ndarray:
        words = self._peek_words(n)
        self._advance(n)
        return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53

    # normals -----------------------------------------------------------------
    def next_gaussian(self) -> float:
        return float(self.normal(1)[0])

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws, bit-identical to ``n`` calls of ``next_gaussian``."""
        out = np.empty(n)
        filled = 0
        if n > 0 and self.spare is not None:
            out[0] = self.spare
            self.spare = None
            filled = 1
        need_pairs = (n - filled + 1) // 2
        values: list[np.ndarray] = []
        while need_pairs > 0:
            chunk = max(16, int(need_pairs * 1.4) + 8)
            u = self._peek_words(2 * chunk)
            u = (u >> np.uint64(11)).astype(np.float64) * 2.0**-53
            a = 2.0 * u[0::2] - 1.0
            b = 2.0 * u[1::2] - 1.0
            s = a * a + b * b
            accepted = np.flatnonzero((s > 0.0) & (s < 1.0))
            take = accepted[:need_pairs]
            if take.size == need_pairs:
                self._advance(2 * (int(take[-1]) + 1))
            else:
                self._advance(2 * chunk)
            f = np.sqrt(-2.0 * np.log(s[take]) / s[take])
            pairs = np.empty(2 * take.size)
            pairs[0::2] = a[take] * f
            pairs[1::2] = b[take] * f
            values.append(pairs)
            need_pairs -= take.size
        if values:
            flat = np.concatenate(values)
            rest = n - filled
            out[filled:] = flat[:rest]
            if flat.size > rest:
                self.spare = float(flat[rest])
        return out

    # derived distributions -----------------------------------------------------
    def gamma(self, shape: float) -> float:
        """Marsaglia-Tsang gamma(shape, 1); shape < 1 uses the ``U**(1/shape)`` boost."""
        if shape <= 0:
            raise NumericsError("gamma shape must be positive")
        if shape < 1.0:
            g = self.gamma(shape + 1.0)
            u = self.next_uniform()
            return g * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.next_gaussian()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.next_uniform()
            if u < 1.0 - 0.0331 * x**4:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, a: float, b: float) -> float:
        x = self.gamma(a)
        y = self.gamma(b)
        if x + y == 0.0:
            return 0.5
        return x / (x + y)

    def permutation(self, n: int) -> np.ndarray:
        """Stable argsort of ``n`` uniforms."""
        return np.argsort(self.uniform(n), kind="stable")

    def randint(self, high: int) -> int:
        return min(int(self.next_uniform() * high), high - 1)
