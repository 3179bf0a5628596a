"""Goal-reaching fine-tuning: score pretrained heads, pick one, run PPO on a sparse reward."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from . import tensor as T
from .envs import ParallelTrajectory, ReplicaSet, TerrainSpec, reset_all, rollout
from .errors import ContractError, NonFiniteError
from .nn import Adam, Critic
from .policy import MultiHeadPolicy, gaussian_log_density, squash_log_det

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoalTask:
    goal: tuple[float, float]
    radius: float = 1.0
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    annulus: tuple[float, float] = (3.0, 4.5)

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractError("success radius must be positive")
        lo, hi = self.annulus
        if not 0 <= lo <= hi:
            raise ContractError("annulus needs 0 <= r_min <= r_max")
        if self.terrain.blocked(np.asarray([self.goal], dtype=np.float64))[0]:
            raise ContractError(f"goal {self.goal} is outside the arena or inside a wall")

    @classmethod
    def sample(cls, seed: int, terrain: TerrainSpec | None = None,
               annulus: tuple[float, float] = (3.0, 4.5), radius: float = 1.0,
               max_tries: int = 1000) -> "GoalTask":
        """Goal at a uniform angle and distance inside the annulus around the spawn."""
        terrain = terrain or TerrainSpec()
        rng = seeding.stream(seed, seeding.GOAL)
        spawn = np.asarray(terrain.spawn, dtype=np.float64)
        for _ in range(max_tries):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(*annulus)
            goal = spawn + dist * np.array([math.cos(angle), math.sin(angle)])
            if not terrain.blocked(goal[None])[0]:
                return cls((float(goal[0]), float(goal[1])), radius, terrain, tuple(annulus))
        raise ContractError(f"no free goal in annulus {annulus} after {max_tries} draws")


def sparse_reward(states, task: GoalTask) -> np.ndarray:
    """1 where the position lies strictly within ``task.radius`` of the goal, else 0."""
    pos = np.asarray(states, dtype=np.float64)[..., :2]
    dist = np.sqrt(np.sum((pos - np.asarray(task.goal)) ** 2, axis=-1))
    return (dist < task.radius).astype(np.float64)


def episode_success(trajectory: ParallelTrajectory, task: GoalTask) -> np.ndarray:
    """Per replica: did any of s_1..s_T earn the reward."""
    return sparse_reward(trajectory.states[:, 1:], task).max(axis=1)


def evaluate_heads(policy: MultiHeadPolicy, task: GoalTask, rollouts_per_head: int,
                   seed: int, horizon: int = 600) -> tuple[np.ndarray, int]:
    """Success rate of every head over ``rollouts_per_head`` episodes; ties go to the lowest index."""
    if rollouts_per_head < 1:
        raise ContractError("need at least one rollout per head")
    heads = np.repeat(np.arange(policy.n_heads), rollouts_per_head)
    base = ReplicaSet.create(heads.size, task.terrain)
    start = reset_all(base, seeding.child_seed(seed, seeding.EVAL, 0))
    traj = rollout(start, policy, heads, horizon, seeding.child_seed(seed, seeding.EVAL, 1))
    hits = episode_success(traj, task)
    rates = np.array([hits[heads == h].mean() for h in range(policy.n_heads)])
    # np.argmax returns the first maximum
    return rates, int(np.argmax(rates))


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates by the reverse recursion.

    ``rewards`` is [..., T] and ``values`` [..., T+1]; leading axes are
    independent episodes.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[:-1] != rewards.shape[:-1] or values.shape[-1] != rewards.shape[-1] + 1:
        raise ContractError("values need one more step than rewards")
    delta = rewards + gamma * values[..., 1:] - values[..., :-1]
    adv = np.empty_like(delta)
    running = np.zeros(delta.shape[:-1])
    for t in range(delta.shape[-1] - 1, -1, -1):
        running = delta[..., t] + gamma * lam * running
        adv[..., t] = running
    return adv


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    epochs: int = 10
    warmup: int = 1
    minibatch_per_replica: int = 64
    horizon: int = 600
    replicas: int = 300
    total_steps: int = 10_000_000
    actor_lr: float = 1e-5
    critic_lr: float = 3e-4

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ContractError("gamma and lambda must lie in [0, 1]")
        if not self.clip > 0:
            raise ContractError("clip epsilon must be positive")
        for name in ("epochs", "minibatch_per_replica", "horizon", "replicas"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.warmup < 0 or self.total_steps < 0:
            raise ContractError("warmup and total steps must be non-negative")

    @property
    def minibatch(self) -> int:
        return self.minibatch_per_replica * self.replicas

    @property
    def rollouts(self) -> int:
        return self.total_steps // (self.replicas * self.horizon)

    @classmethod
    def no_pretrain(cls, **overrides) -> "PpoConfig":
        return cls(**overrides)

    @classmethod
    def pretrained(cls, **overrides) -> "PpoConfig":
        base = dict(clip=0.15, entropy_coef=0.0, epochs=3, warmup=5)
        return cls(**{**base, **overrides})

    def with_updates(self, updates: int) -> "PpoConfig":
        return replace(self, total_steps=updates * self.replicas * self.horizon)


@dataclass
class PpoBatch:
    states: np.ndarray       # [B, d_s]
    pre_squash: np.ndarray   # [B, d_a]
    log_density: np.ndarray  # [B]
    advantages: np.ndarray   # [B]
    returns: np.ndarray      # [B]

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def take(self, idx) -> "PpoBatch":
        return PpoBatch(*(a[idx] for a in (self.states, self.pre_squash, self.log_density,
                                          self.advantages, self.returns)))


def make_batch(trajectory: ParallelTrajectory, rewards: np.ndarray, critic: Critic,
               config: PpoConfig) -> PpoBatch:
    """Flatten a rollout; the episode ends at the horizon, so the final value is 0."""
    m, horizon = rewards.shape
    values = critic.values(trajectory.states.reshape(-1, trajectory.states.shape[-1]).copy())
    values = values.data.reshape(m, horizon + 1).copy()
    values[:, -1] = 0.0
    adv = gae(rewards, values, config.gamma, config.lam)
    returns = adv + values[:, :-1]
    return PpoBatch(trajectory.states[:, :-1].reshape(m * horizon, -1),
                    trajectory.pre_squash.reshape(m * horizon, -1),
                    trajectory.log_densities.reshape(-1),
                    adv.reshape(-1), returns.reshape(-1))


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / std if std > 0 else np.zeros_like(adv)


def ppo_loss(actor: MultiHeadPolicy, critic: Critic, batch: PpoBatch, config: PpoConfig,
             train_actor: bool = True) -> tuple[T.Tensor, dict]:
    """Negated clipped surrogate plus value loss minus entropy bonus, as one taped scalar.

    With ``train_actor=False`` only the value term is built.
    """
    value = critic.values(batch.states)
    value_loss = T.mean(T.square(value - batch.returns))
    stats = {"value_loss": float(value_loss.data)}
    if not train_actor:
        return config.value_coef * value_loss, stats
    mu, log_std = actor.forward(batch.states, np.zeros(batch.size, dtype=np.intp))
    logp = gaussian_log_density(mu, log_std, batch.pre_squash) - squash_log_det(
        batch.pre_squash, actor.scale)
    ratio = T.exp(logp - batch.log_density)
    adv = normalize(batch.advantages)
    clipped = T.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    policy_obj = T.mean(T.minimum(ratio * adv, clipped * adv))
    entropy = T.mean(actor.entropy(log_std))
    loss = -policy_obj + config.value_coef * value_loss - config.entropy_coef * entropy
    stats.update(surrogate=float(policy_obj.data), entropy=float(entropy.data),
                 max_ratio_dev=float(np.max(np.abs(ratio.data - 1.0))))
    return loss, stats


@dataclass
class PpoInfo:
    minibatches: int = 0
    first_ratio_dev: float = 0.0
    surrogate: float = math.nan
    value_loss: float = math.nan
    aborted: bool = False


class PpoLearner:
    """Actor, critic and their optimizers; one ``update`` per collected rollout."""

    def __init__(self, actor: MultiHeadPolicy, critic: Critic, config: PpoConfig):
        if actor.state_dim != critic.layers[0].shape[0]:
            raise ContractError("actor and critic disagree on the state dimension")
        self.actor = actor
        self.critic = critic
        self.config = config
        self.actor_opt = Adam(actor.parameters(), config.actor_lr)
        self.critic_opt = Adam(critic.parameters(), config.critic_lr)

    def _snapshot(self):
        return copy.deepcopy((
            [p.data for p in self.actor.parameters()],
            [p.data for p in self.critic.parameters()],
            self.actor_opt.__dict__.copy(), self.critic_opt.__dict__.copy()))

    def _restore(self, snap) -> None:
        actor_data, critic_data, actor_state, critic_state = snap
        for p, d in zip(self.actor.parameters(), actor_data):
            p.data = d
        for p, d in zip(self.critic.parameters(), critic_data):
            p.data = d
        actor_state["params"] = self.actor_opt.params
        critic_state["params"] = self.critic_opt.params
        self.actor_opt.__dict__.update(actor_state)
        self.critic_opt.__dict__.update(critic_state)

    def update(self, batch: PpoBatch, seed: int, train_actor: bool = True) -> PpoInfo:
        """Shuffled minibatch passes; a non-finite loss restores the pre-update parameters."""
        cfg = self.config
        rng = seeding.stream(seed, seeding.MINIBATCH)
        actor_params = self.actor.parameters() if train_actor else []
        critic_params = self.critic.parameters()
        params = actor_params + critic_params
        snap = self._snapshot()
        info = PpoInfo()
        try:
            for _ in range(cfg.epochs):
                order = rng.permutation(batch.size)
                for lo in range(0, batch.size, cfg.minibatch):
                    mb = batch.take(order[lo:lo + cfg.minibatch])
                    with T.GradientTape() as tape:
                        loss, stats = ppo_loss(self.actor, self.critic, mb, cfg, train_actor)
                    grads = tape.gradient(loss, params)
                    grads, _ = T.clip_by_global_norm(grads, cfg.max_grad_norm)
                    if train_actor:
                        self.actor_opt.step(grads[:len(actor_params)])
                    self.critic_opt.step(grads[len(actor_params):])
                    if info.minibatches == 0:
                        info.first_ratio_dev = stats.get("max_ratio_dev", 0.0)
                    info.minibatches += 1
                    info.surrogate = stats.get("surrogate", math.nan)
                    info.value_loss = stats["value_loss"]
        except NonFiniteError as exc:
            log.warning("PPO update aborted, parameters restored: %s", exc)
            self._restore(snap)
            info.aborted = True
        return info


@dataclass
class JumpstartResult:
    actor: MultiHeadPolicy
    critic: Critic
    success: list[float]
    infos: list[PpoInfo]

    def first_reaching(self, level: float) -> int | None:
        """1-based index of the first rollout whose success rate is at least ``level``."""
        for i, s in enumerate(self.success):
            if s >= level:
                return i + 1
        return None


def jumpstart_train(task: GoalTask, actor: MultiHeadPolicy, config: PpoConfig, seed: int,
                    critic: Critic | None = None, callback=None,
                    stop_at: float | None = None, max_rollouts: int | None = None) -> JumpstartResult:
    """Critic-only warmup rollouts, then PPO; one success-rate entry per rollout.

    Success is measured on the training rollouts themselves.  ``stop_at``
    ends the run at the first rollout reaching that success rate.
    ``callback(index, success)`` fires per rollout (1-based).
    """
    if actor.n_heads != 1:
        raise ContractError("fine-tuning needs a single-head actor")
    critic = critic or Critic(actor.state_dim, rng=seeding.stream(seed, seeding.INIT, 2))
    learner = PpoLearner(actor, critic, config)
    base = ReplicaSet.create(config.replicas, task.terrain)
    heads = np.zeros(config.replicas, dtype=np.intp)
    result = JumpstartResult(actor, critic, [], [])
    total = config.rollouts if max_rollouts is None else min(config.rollouts, max_rollouts)
    for n in range(total):
        start = reset_all(base, seeding.child_seed(seed, seeding.RESET, n))
        traj = rollout(start, actor, heads, config.horizon,
                       seeding.child_seed(seed, seeding.ACTION, n))
        rewards = sparse_reward(traj.states[:, 1:], task)
        success = float(rewards.max(axis=1).mean())
        batch = make_batch(traj, rewards, critic, config)
        info = learner.update(batch, seeding.child_seed(seed, seeding.MINIBATCH, n),
                              train_actor=n >= config.warmup)
        result.success.append(success)
        result.infos.append(info)
        if callback is not None:
            callback(n + 1, success)
        log.info("seed %d rollout %d success %.3f", seed, n + 1, success)
        if stop_at is not None and success >= stop_at:
            break
    return result


def select_actor(policy: MultiHeadPolicy, task: GoalTask, rollouts_per_head: int, seed: int,
                 horizon: int) -> tuple[MultiHeadPolicy, np.ndarray, int]:
    """Evaluate every head and return the best one as a single-head actor."""
    rates, best = evaluate_heads(policy, task, rollouts_per_head, seed, horizon)
    return policy.to_single_head(best), rates, best


__all__ = [
    "GoalTask", "PpoBatch", "PpoConfig", "PpoInfo", "PpoLearner", "JumpstartResult",
    "episode_success", "evaluate_heads", "gae", "jumpstart_train", "make_batch",
    "normalize", "ppo_loss", "select_actor", "sparse_reward",
]
