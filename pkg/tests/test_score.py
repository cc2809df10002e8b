from dataclasses import dataclass

import numpy as np
import pytest

from hpcalign.core import DimensionError, MlpParams, Rng, finite_diff_grad, max_rel_error, mlp_forward
from hpcalign.score import (ScoreNet, perturb, score_loss, score_loss_and_grads, score_loss_grad, score_query,
                            train_score_net)


def test_perturb_vanishing_noise_and_determinism():
    z = np.array([0.3, -1.2])
    zn, xi = perturb(z, 1e-12, Rng(0))
    assert np.allclose(zn, z, atol=1e-9)
    a, b = perturb(z, 0.5, Rng(3)), perturb(z, 0.5, Rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_perturb_moments():
    _, xi = perturb(np.zeros((100_000, 1)), 0.5, Rng(8))
    assert abs(xi.mean()) < 0.01
    assert xi.var() == pytest.approx(0.25, rel=0.05)


def test_zero_net_loss_is_d_over_sigma_squared():
    d = 4
    net = ScoreNet(MlpParams.zeros(2 * d, 8, d), sigma=1.0)
    loss = score_loss(net, np.zeros((10_000, d)), np.zeros(d), Rng(1))
    assert loss == pytest.approx(d / 1.0, rel=0.05)


def test_perfect_denoiser_has_zero_loss(monkeypatch):
    import hpcalign.score as sc

    sigma, z = 0.5, Rng(2).normal((6, 3))
    net = ScoreNet(MlpParams.zeros(6, 4, 3), sigma)
    # Test double: the net predicts -(z_noisy - z)/sigma^2 exactly.
    monkeypatch.setattr(sc, "mlp_forward", lambda p, X: -(X[:, :3] - z) / sigma**2)
    assert sc.score_loss(net, z, np.zeros(3), Rng(4)) == pytest.approx(0.0, abs=1e-20)


def test_loss_matches_straight_line_recomputation():
    net = ScoreNet.init(3, 5, Rng(5), sigma=0.7)
    Z, Pm = Rng(6).normal((4, 3)), Rng(7).normal((4, 3))
    rng = Rng(8)
    _, xi = perturb(Z, 0.7, rng)
    ref = np.mean([np.sum((mlp_forward(net.params, np.concatenate([Z[i] + xi[i], Pm[i]])) + xi[i] / 0.49) ** 2)
                   for i in range(4)])
    assert score_loss(net, Z, Pm, rng) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    r = Rng(seed)
    net = ScoreNet.init(3, 6, r.split(0), sigma=0.5)
    net = ScoreNet(MlpParams(net.params.W1, r.split(5).normal(6, 0.2), net.params.W2, net.params.b2), 0.5)
    Z, Pm, noise = r.split(1).normal((5, 3)), r.split(2).normal((5, 3)), r.split(3)
    loss, g, dz, dp = score_loss_and_grads(net, Z, Pm, noise)
    f_params = lambda v: score_loss(ScoreNet(net.params.with_flat(v), 0.5), Z, Pm, noise)  # noqa: E731
    assert max_rel_error(g.flat(), finite_diff_grad(f_params, net.params.flat())) < 1e-3
    assert max_rel_error(dz, finite_diff_grad(lambda v: score_loss(net, v, Pm, noise), Z)) < 1e-3
    assert max_rel_error(dp, finite_diff_grad(lambda v: score_loss(net, Z, v, noise), Pm)) < 1e-3


@dataclass(frozen=True)
class FixedNoise(Rng):
    """Rng double whose normal draws repeat one row of noise."""

    xi: np.ndarray = None

    def normal(self, size, scale=1.0):
        return np.broadcast_to(self.xi, size).copy()


def test_gradient_is_batch_mean():
    net = ScoreNet.init(2, 4, Rng(0))
    z, p = Rng(1).normal((1, 2)), Rng(2).normal((1, 2))
    _, xi = perturb(z, net.sigma, Rng(3))
    g1 = score_loss_grad(net, z, p, FixedNoise(0, (), xi))
    g2 = score_loss_grad(net, np.vstack([z, z]), np.vstack([p, p]), FixedNoise(0, (), xi))
    assert np.allclose(g1.flat(), g2.flat(), atol=1e-14)


def test_stationary_point_has_zero_gradient():
    # W2 = 0 and b2 = -xi/sigma^2 make every residual vanish for a batch of identical pairs.
    z, p = np.array([[0.2, -0.1]]), np.array([[1.0, 0.5]])
    _, xi = perturb(z, 0.5, Rng(9))
    base = MlpParams.init(4, 3, 2, Rng(0))
    net = ScoreNet(MlpParams(base.W1, base.b1, np.zeros((2, 3)), -xi[0] / 0.25), 0.5)
    g = score_loss_grad(net, np.vstack([z, z]), np.vstack([p, p]), FixedNoise(0, (), xi))
    assert np.linalg.norm(g.flat()) < 1e-8


def test_query_examples():
    net = ScoreNet(MlpParams.zeros(4, 3, 2))
    assert np.array_equal(score_query(net, np.ones(2), np.ones(2)), np.zeros(2))
    net = ScoreNet.init(2, 5, Rng(1))
    z, p = np.array([0.1, 0.2]), np.array([0.3, -0.4])
    assert score_query(net, z, p).tobytes() == score_query(net, z, p).tobytes()
    with pytest.raises(DimensionError):
        score_query(net, np.ones(3), np.ones(3))
    with pytest.raises(DimensionError):
        ScoreNet(MlpParams.zeros(3, 3, 2))


def test_training_recovers_smoothed_gaussian_score():
    d, sigma = 4, 0.5
    net = ScoreNet.init(d, 64, Rng(1), sigma)
    p = np.zeros(d)
    net, hist = train_score_net(net, lambda g, n: g.normal(size=(n, d)), p, 2000, Rng(2), batch=256, lr=3e-3)
    z = np.zeros(d)
    z[0] = 2.0
    s = score_query(net, z, p)
    target = -z / (1 + sigma**2)
    assert s @ target / np.linalg.norm(s) / np.linalg.norm(target) > 0.95
    ma = np.convolve(hist, np.ones(100) / 100, mode="valid")
    assert ma[-1] < ma[0]
