import math

import numpy as np
import pytest
from scipy import integrate

from kmyriad import tensor as T
from kmyriad.errors import BoundaryError, ContractError
from kmyriad.policy import LOG_STD_MAX, LOG_STD_MIN, MultiHeadPolicy, SingleHeadActor
from kmyriad.store import load_checkpoint, save_checkpoint


def zero_policy(action_dim=2, state_dim=4, heads=1, **kw):
    return MultiHeadPolicy(heads, state_dim, action_dim, seed=None, **kw)


def set_head_output(policy, h, mu, log_std):
    head = policy.heads[h]
    head.mu.bias.data = np.full(policy.action_dim, mu, dtype=float)
    head.log_std.bias.data = np.full(policy.action_dim, log_std, dtype=float)


class TestForward:
    def test_zero_network(self, rng):
        mu, log_std = zero_policy().forward(rng.normal(size=(5, 4)), 0)
        np.testing.assert_array_equal(mu.data, 0.0)
        np.testing.assert_array_equal(log_std.data, -0.5)

    def test_one_unit_layers_by_hand(self):
        p = MultiHeadPolicy(1, state_dim=1, action_dim=1, trunk=(1, 1), adapter=1, seed=None)
        w1, b1, w2, b2 = 2.0, -1.0, -3.0, 0.5
        wa, ba, wm, bm, ws, bs = 1.5, 0.25, 0.7, -0.1, 0.4, -1.0
        for layer, (w, b) in zip(p.trunk.layers, [(w1, b1), (w2, b2)]):
            layer.weight.data = np.array([[w]])
            layer.bias.data = np.array([b])
        h = p.heads[0]
        for layer, (w, b) in zip([h.adapter, h.mu, h.log_std], [(wa, ba), (wm, bm), (ws, bs)]):
            layer.weight.data = np.array([[w]])
            layer.bias.data = np.array([b])
        s = -0.8
        x = max(w2 * max(w1 * s + b1, 0) + b2, 0)
        z = max(wa * x + ba, 0)
        mu, log_std = p.forward(np.array([[s]]), 0)
        assert mu.data[0, 0] == pytest.approx(wm * z + bm, abs=1e-15)
        assert log_std.data[0, 0] == pytest.approx(ws * z + bs, abs=1e-15)

    def test_head_routing(self, rng):
        p = MultiHeadPolicy(3, seed=0)
        s = np.tile(rng.normal(size=(1, 4)), (4, 1))
        mu, _ = p.forward(s, [0, 1, 1, 2])
        np.testing.assert_array_equal(mu.data[1], mu.data[2])
        assert not np.array_equal(mu.data[0], mu.data[1])
        for h in range(3):
            alone, _ = p.forward(s[:1], h)
            np.testing.assert_allclose(mu.data[[0, 1, 3][h]], alone.data[0], atol=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(ContractError):
            MultiHeadPolicy(2).forward(np.zeros((1, 4)), 2)

    def test_log_std_clamp(self, rng):
        p = zero_policy()
        for value, expected in [(10.0, LOG_STD_MAX), (-10.0, LOG_STD_MIN)]:
            set_head_output(p, 0, 0.0, value)
            _, log_std = p.forward(rng.normal(size=(3, 4)), 0)
            np.testing.assert_array_equal(log_std.data, expected)

    def test_parameter_count_affine(self):
        counts = {m: MultiHeadPolicy(m, seed=None).parameter_count() for m in (1, 10, 50)}
        block = (counts[10] - counts[1]) / 9
        assert block == 256 * 256 + 256 + 2 * (256 * 2 + 2)
        assert counts[50] == counts[1] + 49 * block
        trunk = 4 * 512 + 512 + 512 * 256 + 256
        assert counts[1] == trunk + block

    def test_heads_shared_across_sizes(self):
        a, b = MultiHeadPolicy(4, seed=2), MultiHeadPolicy(10, seed=2)
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x.data, y.data)


class TestDensity:
    def test_standard_normal_at_zero(self):
        p = zero_policy()
        set_head_output(p, 0, 0.0, 0.0)
        a, logp, u = p.sample(np.zeros((1, 4)), 0, np.zeros((1, 2)))
        np.testing.assert_array_equal(a, 0.0)
        assert logp[0] == pytest.approx(-0.5 * 2 * math.log(2 * math.pi), abs=1e-15)

    def test_even_symmetry(self):
        p = zero_policy()
        set_head_output(p, 0, 0.0, -0.3)
        s = np.zeros((2, 4))
        lp = p.log_prob(s, np.array([[0.4, -0.7], [-0.4, 0.7]]), 0).data
        assert lp[0] == pytest.approx(lp[1], abs=1e-14)

    def test_mode_at_center(self):
        p = zero_policy(action_dim=1)
        # the squashed density peaks at tanh(0) only while sigma^2 <= 1/2
        set_head_output(p, 0, 0.0, -1.0)
        grid = np.linspace(-0.99, 0.99, 199)[:, None]
        lp = p.log_prob(np.zeros((199, 4)), grid, 0).data
        assert abs(grid[np.argmax(lp), 0]) < 1e-12

    def test_hand_value(self):
        p = zero_policy(action_dim=1)
        set_head_output(p, 0, 0.3, math.log(0.5))
        u = math.atanh(0.1)
        gauss = -0.5 * ((u - 0.3) / 0.5) ** 2 - math.log(0.5) - 0.5 * math.log(2 * math.pi)
        expected = gauss - math.log(1 - 0.1**2)
        assert p.log_prob(np.zeros((1, 4)), np.array([[0.1]]), 0).data[0] == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("low, high", [(-1.0, 1.0), (-2.0, 3.0)])
    def test_integrates_to_one(self, low, high):
        p = zero_policy(action_dim=1, low=low, high=high)
        set_head_output(p, 0, 0.2, -0.4)

        def density(a):
            return math.exp(p.log_prob(np.zeros((1, 4)), np.array([[a]]), 0).data[0])

        eps = 1e-9 * (high - low)
        total, _ = integrate.quad(density, low + eps, high - eps, limit=200)
        assert abs(total - 1.0) < 1e-3

    def test_sample_log_prob_roundtrip(self, rng):
        p = MultiHeadPolicy(2, seed=5)
        s = rng.normal(size=(200, 4))
        heads = rng.integers(0, 2, size=200)
        a, logp, _ = p.sample_rng(s, heads, rng)
        inside = np.abs(a).max(axis=1) < 0.999999  # atanh loses digits near the bounds
        np.testing.assert_allclose(p.log_prob(s[inside], a[inside], heads[inside]).data, logp[inside],
                                   atol=1e-9, rtol=0)

    def test_boundary_error(self):
        p = zero_policy()
        with pytest.raises(BoundaryError):
            p.log_prob(np.zeros((1, 4)), np.array([[1.0, 0.0]]), 0)

    def test_million_samples_strictly_inside(self, rng):
        p = zero_policy(low=-2.0, high=0.5)
        # widest clamped sigma, then far tails: tanh saturates to +-1 in floating point
        u = np.exp(LOG_STD_MAX) * 4.0 * rng.standard_normal((500_000, 2))
        a = p.squash(u)
        assert (a > -2.0).all() and (a < 0.5).all()
        a, _, _ = p.sample(np.zeros((1000, 4)), 0, rng.standard_normal((1000, 2)))
        assert (a > -2.0).all() and (a < 0.5).all()


class TestSingleHead:
    def test_equivalence(self, rng):
        p = MultiHeadPolicy(4, seed=3)
        s = rng.normal(size=(1000, 4))
        for h in range(4):
            actor = p.to_single_head(h)
            assert isinstance(actor, SingleHeadActor)
            mu_a, ls_a = actor.forward(s)
            mu_p, ls_p = p.forward(s, h)
            np.testing.assert_allclose(mu_a.data, mu_p.data, atol=1e-12, rtol=0)
            np.testing.assert_allclose(ls_a.data, ls_p.data, atol=1e-12, rtol=0)

    def test_isolation(self):
        p = MultiHeadPolicy(2, seed=3)
        actor = p.to_single_head(1)
        before = p.heads[1].mu.weight.data.copy()
        actor.heads[0].mu.weight.data = actor.heads[0].mu.weight.data + 1.0
        np.testing.assert_array_equal(p.heads[1].mu.weight.data, before)

    def test_through_checkpoint(self, tmp_path, rng):
        p = MultiHeadPolicy(3, seed=8)
        actor = load_checkpoint(save_checkpoint(p, tmp_path / "p.kmyr")).to_single_head(2)
        s = rng.normal(size=(100, 4))
        np.testing.assert_allclose(actor.forward(s)[0].data, p.forward(s, 2)[0].data, atol=1e-12, rtol=0)

    def test_bad_index(self):
        with pytest.raises(ContractError):
            MultiHeadPolicy(2).to_single_head(2)


class TestGradientFlow:
    def test_other_heads_untouched(self, rng):
        p = MultiHeadPolicy(6, seed=0)
        s = rng.normal(size=(8, 4))
        params = p.parameters()
        with T.GradientTape() as tape:
            logp = p.log_prob_pre(s, rng.normal(size=(8, 2)), 2)
            loss = T.sum_(logp)
        grads = dict(zip(map(id, params), tape.gradient(loss, params)))
        for q in p.head_parameters(5):
            assert not grads[id(q)].any()
        assert any(grads[id(q)].any() for q in p.head_parameters(2))
        assert any(grads[id(q)].any() for q in p.trunk.parameters())
