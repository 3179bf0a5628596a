import math

import numpy as np
import pytest
from conftest import central_difference, max_rel_err

from kmyriad import tensor as T
from kmyriad.envs import ParallelTrajectory, ReplicaSet, reset_all, rollout
from kmyriad.errors import ContractError, NonFiniteError
from kmyriad.estimators import entropy_knn
from kmyriad.nn import Adam
from kmyriad.policy import MultiHeadPolicy
from kmyriad.store import checkpoint_bytes
from kmyriad.train import (
    TrainConfig,
    advantages,
    assign,
    cumulative_ratio,
    entropy_trend,
    head_clouds,
    importance_weights,
    intrinsic_rewards,
    measure_diversity,
    pooled_states,
    surrogate,
    train,
    update,
)


def toy_trajectory(xs, heads=None):
    """States whose x coordinate follows ``xs`` [m, T+1]; everything else zero."""
    xs = np.asarray(xs, dtype=np.float64)
    m, steps = xs.shape[0], xs.shape[1] - 1
    states = np.zeros((m, steps + 1, 4))
    states[..., 0] = xs
    heads = np.zeros(m, int) if heads is None else np.asarray(heads)
    return ParallelTrajectory(states, np.zeros((m, steps, 2)), np.zeros((m, steps)), heads,
                              np.zeros((m, steps, 2)))


def tiny_policy(heads=2, seed=0):
    return MultiHeadPolicy(heads, trunk=(3,), adapter=2, seed=seed)


def collect(policy, m=6, steps=5, seed=0):
    heads = assign(m, policy.n_heads)
    return rollout(reset_all(ReplicaSet.create(m), seed), policy, heads, steps, seed)


class TestAssign:
    @pytest.mark.parametrize("envs, heads, sizes", [
        (1000, 10, [100] * 10),
        (1000, 50, [20] * 50),
        (7, 3, [3, 2, 2]),
    ])
    def test_sizes(self, envs, heads, sizes):
        a = assign(envs, heads)
        assert np.bincount(a).tolist() == sizes
        assert (np.diff(a) >= 0).all()  # contiguous blocks

    def test_too_many_heads(self):
        with pytest.raises(ContractError):
            assign(3, 4)


class TestRewards:
    def test_cross_replica_neighbor(self):
        traj = toy_trajectory([[9.0, 0.0], [9.0, 0.5]])
        r = intrinsic_rewards(traj, k=1, projection=(0,))
        np.testing.assert_allclose(r, [[math.log(0.5)], [math.log(0.5)]], atol=1e-15)

    def test_degenerate_pool_floored(self):
        r = intrinsic_rewards(toy_trajectory(np.zeros((3, 4))), k=2)
        np.testing.assert_allclose(r, 2 * math.log(1e-8))

    def test_translation_invariance(self, rng):
        xs = rng.normal(size=(4, 6))
        a = intrinsic_rewards(toy_trajectory(xs), 3)
        b = intrinsic_rewards(toy_trajectory(xs + 250.0), 3)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_pool_excludes_start_state(self):
        traj = toy_trajectory([[5.0, 1.0, 2.0]])
        np.testing.assert_array_equal(pooled_states(traj)[:, 0], [1.0, 2.0])

    def test_too_small_pool(self):
        with pytest.raises(ContractError):
            intrinsic_rewards(toy_trajectory([[0.0, 1.0]]), k=1)


class TestWeights:
    def test_on_policy_exactly_one(self):
        policy = tiny_policy()
        traj = collect(policy)
        np.testing.assert_array_equal(importance_weights(traj, policy.copy(), policy), 1.0)
        np.testing.assert_array_equal(importance_weights(traj, None, policy), 1.0)

    def test_single_log_two(self):
        cur = np.zeros((2, 4))
        cur[0, 0] = math.log(2.0)
        w = cumulative_ratio(cur, np.zeros((2, 4)))
        np.testing.assert_allclose(w[0], 2.0, rtol=1e-15)
        np.testing.assert_array_equal(w[1], 1.0)

    def test_monotone(self, rng):
        w = cumulative_ratio(np.abs(rng.normal(size=(3, 10))), np.zeros((3, 10)))
        assert (np.diff(w, axis=1) >= 0).all()

    def test_overflow(self):
        with pytest.raises(NonFiniteError):
            cumulative_ratio(np.full((1, 3), 400.0), np.zeros((1, 3)))

    def test_changed_policy_moves_weights(self):
        policy = tiny_policy()
        traj = collect(policy)
        other = policy.copy()
        other.heads[0].mu.bias.data = other.heads[0].mu.bias.data + 0.3
        w = importance_weights(traj, policy, other)
        assert np.abs(w - 1).max() > 1e-3


class TestUpdate:
    def test_advantage_normalization(self, rng):
        adv = advantages(rng.normal(size=(5, 7)))
        assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1) < 1e-12

    def test_reward_to_go(self):
        adv = advantages(np.array([[1.0, 2.0, 3.0]]))
        togo = np.array([6.0, 5.0, 3.0])
        np.testing.assert_allclose(adv[0], (togo - togo.mean()) / togo.std(), atol=1e-15)

    def test_flat_returns_leave_parameters(self):
        policy = tiny_policy()
        traj = collect(policy)
        before = [p.data.copy() for p in policy.parameters()]
        # every reward-to-go equal, so every advantage is zero
        rewards = np.zeros((6, 5))
        rewards[:, -1] = 2.0
        info = update(policy, traj, rewards, Adam(policy.parameters(), 1e-2))
        assert info.skipped
        for p, b in zip(policy.parameters(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_surrogate_gradient_finite_difference(self, rng):
        policy = tiny_policy(seed=3)
        params = policy.parameters()
        for p in params:  # zero biases put ReLUs exactly on the kink
            p.data = p.data + 0.1 * rng.normal(size=p.data.shape)
        traj = collect(policy, m=4, steps=3)
        adv = advantages(rng.normal(size=(4, 3)))
        with T.GradientTape() as tape:
            obj, _ = surrogate(policy, traj, adv, weighted=False)
        grads = tape.gradient(obj, params)
        numeric = central_difference(
            lambda: surrogate(policy, traj, adv, weighted=False)[0].data, [p.data for p in params])
        for g, n in zip(grads, numeric):
            assert max_rel_err(g, n) < 1e-3

    def test_only_touched_heads_move(self, rng):
        policy = MultiHeadPolicy(6, trunk=(8,), adapter=4, seed=1)
        heads = np.full(4, 2)
        traj = rollout(reset_all(ReplicaSet.create(4), 0), policy, heads, 5, 0)
        before = [p.data.copy() for p in policy.head_parameters(5)]
        trunk_before = policy.trunk.layers[0].weight.data.copy()
        info = update(policy, traj, rng.normal(size=(4, 5)), Adam(policy.parameters(), 1e-3))
        assert not info.skipped and info.max_weight_dev < 1e-12
        for p, b in zip(policy.head_parameters(5), before):
            np.testing.assert_array_equal(p.data, b)
        assert not np.array_equal(policy.trunk.layers[0].weight.data, trunk_before)

    def test_gradient_clip(self, rng):
        policy = tiny_policy()
        traj = collect(policy)
        info = update(policy, traj, rng.normal(size=(6, 5)), Adam(policy.parameters(), 1e-3),
                      max_grad_norm=1e-6)
        assert info.grad_norm > 1e-6  # reported norm is the pre-clip value


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.lr, c.milestones, c.decay, c.k, c.horizon) == (200, 2e-4, (30, 80), 0.5, 5, 600)
        assert c.seeds == (0, 1, 56, 123)

    def test_schedule(self):
        c = TrainConfig(lr=1.0)
        assert [c.lr_at(e) for e in (0, 29, 30, 79, 80, 199)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]

    def test_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(heads=5, envs=4)
        with pytest.raises(ContractError):
            TrainConfig(k=0)


SMALL = dict(envs=8, heads=2, horizon=12, epochs=4)


class TestTrain:
    def test_zero_epochs(self):
        res = train(TrainConfig(**{**SMALL, "epochs": 0}), seed=0)
        assert res.entropy == [] and res.last_trajectory is None
        fresh = MultiHeadPolicy(2, seed=0)
        assert checkpoint_bytes(res.policy) == checkpoint_bytes(fresh)

    def test_deterministic(self):
        a = train(TrainConfig(**SMALL), seed=4)
        b = train(TrainConfig(**SMALL), seed=4)
        assert a.entropy == b.entropy
        assert checkpoint_bytes(a.policy) == checkpoint_bytes(b.policy)

    def test_curve_and_weights(self):
        seen = []
        res = train(TrainConfig(**SMALL), seed=1, callback=lambda *row: seen.append(row))
        assert len(res.entropy) == 4 and [r[0] for r in seen] == [1, 2, 3, 4]
        assert max(res.weight_dev) < 1e-12
        assert res.lrs == [2e-4] * 4

    def test_frozen_policy_curve(self):
        res = train(TrainConfig(**{**SMALL, "lr": 0.0, "epochs": 3}), seed=2)
        fresh = MultiHeadPolicy(2, seed=2)
        assert checkpoint_bytes(res.policy) == checkpoint_bytes(fresh)
        # each epoch is a fresh sample of the same policy, so values move only by noise
        assert np.ptp(res.entropy) < 1.0

    def test_mixture_dominates_components(self):
        res = train(TrainConfig(envs=16, heads=2, horizon=40, epochs=3), seed=0)
        traj = res.last_trajectory
        pool = entropy_knn(pooled_states(traj), 5).value
        parts = [entropy_knn(c, 5).value for c in head_clouds(traj)]
        assert pool >= max(parts) - 0.05

    def test_nonfinite_abort_keeps_curve(self, monkeypatch):
        import kmyriad.train as mod

        calls = {"n": 0}
        real = mod.update

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NonFiniteError("injected")
            return real(*args, **kwargs)

        monkeypatch.setattr(mod, "update", flaky)
        res = train(TrainConfig(**SMALL), seed=0)
        assert len(res.entropy) == 2 and "epoch 3" in res.aborted


class TestDiversity:
    def test_single_head_rejected(self):
        with pytest.raises(ContractError):
            measure_diversity(MultiHeadPolicy(1), 10, 20, 0)

    def test_identical_heads_small(self):
        policy = MultiHeadPolicy(2, seed=0)
        for a, b in zip(policy.head_parameters(0), policy.head_parameters(1)):
            b.data = a.data.copy()
        mean, per, n = measure_diversity(policy, 150, 60, 0)
        assert n == 150 * 6 and abs(mean) < 0.1

    def test_stride(self):
        traj = toy_trajectory(np.arange(22.0).reshape(2, 11), heads=[0, 1])
        clouds = head_clouds(traj, projection=(0,), stride=5)
        np.testing.assert_array_equal(clouds[0][:, 0], [5.0, 10.0])
        np.testing.assert_array_equal(clouds[1][:, 0], [16.0, 21.0])


def test_entropy_trend():
    assert entropy_trend([0, 0, 1, 5, 5], 2) == 5.0
    assert math.isnan(entropy_trend([1.0], 2))
