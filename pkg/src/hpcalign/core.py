"""Dense arithmetic shared by every other module.

Two-layer tanh MLP with hand-derived gradients, cosine similarity,
a splittable seeded RNG and a central-difference gradient checker.
Vectors are plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class DegenerateInputError(ValueError):
    """An input has zero norm where a direction is required."""


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rng:
    """Immutable, key-addressed random stream.

    ``Rng(seed).split(3).split(1)`` always denotes the same stream, no
    matter how many other streams were drawn before it. Drawing never
    mutates the object: ``rng.generator()`` returns a fresh numpy
    Generator positioned at the start of this stream.
    """

    seed: int
    path: tuple[int, ...] = ()

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator().random(size)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """y = W2 tanh(W1 x + b1) + b2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        h, n_in = self.W1.shape
        n_out, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (n_out,):
            raise DimensionError(
                f"inconsistent MLP shapes W1={self.W1.shape} b1={self.b1.shape} "
                f"W2={self.W2.shape} b2={self.b2.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, n_in: int, hidden: int, n_out: int) -> "MlpParams":
        return cls(
            np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((n_out, hidden)), np.zeros(n_out)
        )

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: Rng, gain: float = 1.0) -> "MlpParams":
        """Glorot-style normal init; biases zero."""
        W1 = rng.split(0).normal((hidden, n_in), gain / np.sqrt(n_in))
        W2 = rng.split(1).normal((n_out, hidden), gain / np.sqrt(hidden))
        return cls(W1, np.zeros(hidden), W2, np.zeros(n_out))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.W1, self.b1, self.W2, self.b2

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()))

    def __add__(self, other: "MlpParams") -> "MlpParams":
        return MlpParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "MlpParams":
        return MlpParams(*(c * a for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v: np.ndarray) -> "MlpParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(v[i : i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return MlpParams(*out)


def _check_input(p: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.n_in or x.ndim not in (1, 2):
        raise DimensionError(f"MLP expects input dim {p.n_in}, got shape {x.shape}")
    return x


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Apply the MLP to one vector ``(n_in,)`` or a row batch ``(n, n_in)``."""
    x = _check_input(p, x)
    h = np.tanh(x @ p.W1.T + p.b1)
    return h @ p.W2.T + p.b2


def mlp_backward(p: MlpParams, x: np.ndarray, dy: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradient of ``<dy, mlp_forward(p, x)>`` w.r.t. the parameters and ``x``.

    For batched ``x`` the parameter gradient is summed over rows and ``dx``
    keeps the batch shape.
    """
    x = _check_input(p, x)
    dy = np.asarray(dy, dtype=float)
    if dy.shape[-1] != p.n_out or dy.ndim != x.ndim:
        raise DimensionError(f"upstream gradient shape {dy.shape} does not match output dim {p.n_out}")
    X = np.atleast_2d(x)
    DY = np.atleast_2d(dy)
    h = np.tanh(X @ p.W1.T + p.b1)
    dW2 = DY.T @ h
    db2 = DY.sum(axis=0)
    da = (DY @ p.W2) * (1.0 - h * h)
    dW1 = da.T @ X
    db1 = da.sum(axis=0)
    dX = da @ p.W1
    return MlpParams(dW1, db1, dW2, db2), (dX if x.ndim == 2 else dX[0])


# ---------------------------------------------------------------------------
# Similarity and normalization
# ---------------------------------------------------------------------------


def cosine_sim(a: np.ndarray, b: np.ndarray, tau: float = 1.0) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim on shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb) / tau)


def cosine_sim_grad(a: np.ndarray, b: np.ndarray, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``cosine_sim(a, b, tau)`` w.r.t. ``a`` and ``b``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    c = a @ b / (na * nb)
    ga = (b / (na * nb) - c * a / na**2) / tau
    gb = (a / (na * nb) - c * b / nb**2) / tau
    return ga, gb


def normalize(v: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization; raises on zero rows."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / n


def normalize_backward(v: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Pull ``du`` (gradient w.r.t. ``v/|v|``) back to ``v``; row-wise."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / n


def pairwise_sum(values: Iterable[float] | np.ndarray) -> float:
    """Order-stable pairwise summation of a 1-D sequence."""
    v = list(np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel())
    if not v:
        return 0.0
    while len(v) > 1:
        nxt = [v[i] + v[i + 1] for i in range(0, len(v) - 1, 2)]
        if len(v) % 2:
            nxt.append(v[-1])
        v = nxt
    return float(v[0])


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every i."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|n|, floor)`` -- scale-aware error used by gradient checks."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))
