"""Prompt-conditioned denoising score matching.

The score network sees ``concat(z + xi, p)`` and is regressed onto
``-xi / sigma^2``. Noise is always drawn from the ``Rng`` passed in, and
``Rng`` never advances, so a loss call and a gradient call with the same
arguments see the same perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, MlpParams, Rng, mlp_backward, mlp_forward

DEFAULT_SIGMA = 0.5


@dataclass
class ScoreNet:
    params: MlpParams
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.params.n_in != 2 * self.params.n_out:
            raise DimensionError(
                f"score net maps 2d -> d; got {self.params.n_in} -> {self.params.n_out}"
            )

    @property
    def dim(self) -> int:
        return self.params.n_out

    @classmethod
    def init(cls, dim: int, hidden: int, rng: Rng, sigma: float = DEFAULT_SIGMA) -> "ScoreNet":
        return cls(MlpParams.init(2 * dim, hidden, dim, rng), sigma)


def _as_batch(z, p) -> tuple[np.ndarray, np.ndarray]:
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    P = np.atleast_2d(np.asarray(p, dtype=float))
    if P.shape[0] == 1 and Z.shape[0] > 1:
        P = np.broadcast_to(P, Z.shape)
    if Z.shape != P.shape:
        raise DimensionError(f"state batch {Z.shape} vs prompt batch {P.shape}")
    if Z.shape[0] == 0:
        raise ValueError("empty score batch")
    return Z, P


def perturb(z: np.ndarray, sigma: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z + xi, xi)`` with ``xi ~ N(0, sigma^2 I)``."""
    z = np.asarray(z, dtype=float)
    xi = rng.normal(z.shape, sigma)
    return z + xi, xi


def score_query(net: ScoreNet, z: np.ndarray, p: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    if z.shape[-1] != net.dim or p.shape[-1] != net.dim:
        raise DimensionError(f"score net dim {net.dim}; got z {z.shape}, p {p.shape}")
    return mlp_forward(net.params, np.concatenate([z, p], axis=-1))


def _residual(net: ScoreNet, Z, P, rng: Rng):
    Zn, xi = perturb(Z, net.sigma, rng)
    X = np.concatenate([Zn, P], axis=1)
    R = mlp_forward(net.params, X) + xi / net.sigma**2
    return X, R


def score_loss(net: ScoreNet, z, p, rng: Rng) -> float:
    """Mean over the batch of ``|s(z + xi, p) + xi / sigma^2|^2``."""
    Z, P = _as_batch(z, p)
    _, R = _residual(net, Z, P, rng)
    return float(np.mean(np.sum(R * R, axis=1)))


def score_loss_and_grads(net: ScoreNet, z, p, rng: Rng):
    """Loss plus gradients w.r.t. the net, the states and the prompts."""
    Z, P = _as_batch(z, p)
    X, R = _residual(net, Z, P, rng)
    n = Z.shape[0]
    loss = float(np.mean(np.sum(R * R, axis=1)))
    dparams, dX = mlp_backward(net.params, X, 2.0 * R / n)
    d = net.dim
    return loss, dparams, dX[:, :d], dX[:, d:]


def score_loss_grad(net: ScoreNet, z, p, rng: Rng) -> MlpParams:
    return score_loss_and_grads(net, z, p, rng)[1]


def train_score_net(
    net: ScoreNet,
    sample_z,
    p: np.ndarray,
    steps: int,
    rng: Rng,
    batch: int = 256,
    lr: float = 1e-2,
):
    """Fit ``net`` with Adam on fresh draws from ``sample_z(gen, batch)``.

    Returns the trained net and the per-step loss history.
    """
    from .optim import AdamW

    params = {"W1": net.params.W1, "b1": net.params.b1, "W2": net.params.W2, "b2": net.params.b2}
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        srng = rng.split(step)
        Z = sample_z(srng.split(0).generator(), batch)
        cur = ScoreNet(MlpParams(**params), net.sigma)
        loss, g, _, _ = score_loss_and_grads(cur, Z, p, srng.split(1))
        history.append(loss)
        params = opt.step(params, {"W1": g.W1, "b1": g.b1, "W2": g.W2, "b2": g.b2})
    return ScoreNet(MlpParams(**params), net.sigma), np.array(history)
