"""Parallel state-entropy pretraining of a multi-head policy.

Each epoch: snapshot the policy, roll out every replica under its assigned
head, score each visited state by its log k-NN distance inside the pooled
cloud of all replicas, and take one score-function gradient step on the
whole network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from . import tensor as T
from .envs import ParallelTrajectory, ReplicaSet, TerrainSpec, reset_all, rollout
from .errors import ContractError, DegenerateRadiusError, NonFiniteError
from .estimators import DISTANCE_FLOOR, entropy_knn, pairwise_diversity, particle_loss
from .nn import Adam
from .policy import MultiHeadPolicy

log = logging.getLogger(__name__)

XY = (0, 1)
FULL_STATE = (0, 1, 2, 3)
# consecutive states of one trajectory sit ~v*dt apart and crowd out the
# own-cloud neighbor radius of the KL estimator; one state per second
# (every 10th step at dt=0.1) keeps the per-head clouds close to independent
DIVERSITY_STRIDE = 10


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    milestones: tuple[int, ...] = (30, 80)
    decay: float = 0.5
    k: int = 5
    envs: int = 1000
    heads: int = 10
    horizon: int = 600
    seeds: tuple[int, ...] = (0, 1, 56, 123)
    projection: tuple[int, ...] = XY
    max_grad_norm: float = 0.5
    terrain: TerrainSpec = field(default_factory=TerrainSpec)

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        for name in ("k", "envs", "heads", "horizon"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.lr < 0 or self.decay <= 0:
            raise ContractError("learning rate must be >= 0 and decay > 0")
        if self.heads > self.envs:
            raise ContractError("more heads than replicas")

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` is 0-based."""
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.decay**passed


def assign(envs: int, heads: int) -> np.ndarray:
    """Contiguous balanced blocks: the first ``envs % heads`` heads get one extra."""
    if not 1 <= heads <= envs:
        raise ContractError(f"need 1 <= heads <= envs, got heads={heads}, envs={envs}")
    base, extra = divmod(envs, heads)
    sizes = [base + (1 if h < extra else 0) for h in range(heads)]
    return np.repeat(np.arange(heads), sizes)


def pooled_states(trajectory: ParallelTrajectory, projection=XY) -> np.ndarray:
    """Projected states s_1..s_T of all replicas, replica-major, [m*T, d]."""
    s = trajectory.states[:, 1:, :][..., list(projection)]
    return s.reshape(-1, len(projection))


def intrinsic_rewards(trajectory: ParallelTrajectory, k: int = 5, projection=XY) -> np.ndarray:
    """Per-step rewards [m, T]: reward t is the log-distance term of s_{t+1}.

    The neighbor search runs over the pool of every replica, so a state's
    nearest neighbor may come from another replica.
    """
    pool = pooled_states(trajectory, projection)
    if pool.shape[0] < k + 1:
        raise ContractError(f"pooled cloud of {pool.shape[0]} states is too small for k={k}")
    _, per = particle_loss(pool, k)
    return per.reshape(trajectory.replicas, trajectory.horizon)


def cumulative_ratio(current_logp: np.ndarray, behavior_logp: np.ndarray) -> np.ndarray:
    """``exp`` of the running sum over steps of log pi - log beta, per replica."""
    with np.errstate(over="ignore"):
        w = np.exp(np.cumsum(current_logp - behavior_logp, axis=1))
    if not np.isfinite(w).all():
        raise NonFiniteError("importance weight overflow")
    return w


def _flat_log_prob(policy, trajectory: ParallelTrajectory):
    m, horizon = trajectory.log_densities.shape
    states = trajectory.states[:, :-1].reshape(m * horizon, -1)
    heads = np.repeat(trajectory.heads, horizon)
    if trajectory.pre_squash is not None:
        return policy.log_prob_pre(states, trajectory.pre_squash.reshape(m * horizon, -1), heads)
    return policy.log_prob(states, trajectory.actions.reshape(m * horizon, -1), heads)


def importance_weights(trajectory: ParallelTrajectory, behavior: MultiHeadPolicy | None,
                       current: MultiHeadPolicy) -> np.ndarray:
    """Per-step importance weights [m, T] of ``current`` against the behavior policy.

    With ``behavior=None`` the densities recorded at collection time stand in
    for the behavior snapshot.
    """
    m, horizon = trajectory.log_densities.shape
    cur = _flat_log_prob(current, trajectory).data.reshape(m, horizon)
    if behavior is None:
        beh = trajectory.log_densities
    else:
        beh = _flat_log_prob(behavior, trajectory).data.reshape(m, horizon)
    return cumulative_ratio(cur, beh)


def advantages(rewards: np.ndarray) -> np.ndarray:
    """Reward-to-go minus the batch mean, scaled to unit standard deviation."""
    togo = np.flip(np.cumsum(np.flip(rewards, axis=1), axis=1), axis=1)
    adv = togo - togo.mean()
    std = adv.std()
    return adv / std if std > 0 else np.zeros_like(adv)


@dataclass
class UpdateInfo:
    surrogate: float
    grad_norm: float
    max_weight_dev: float = 0.0
    skipped: bool = False


def surrogate(policy, trajectory: ParallelTrajectory, adv: np.ndarray,
              weighted: bool = True) -> tuple[T.Tensor, np.ndarray]:
    """Mean over samples of ``w * log pi(a|s) * A`` as a taped scalar.

    The importance weights ``w`` come from the same forward pass, against
    the densities recorded at collection time; they are held constant.
    """
    m, horizon = adv.shape
    logp = _flat_log_prob(policy, trajectory)
    if weighted:
        w = cumulative_ratio(logp.data.reshape(m, horizon), trajectory.log_densities)
    else:
        w = np.ones_like(adv)
    return T.mean(logp * (w * adv).reshape(-1)), w


def update(policy: MultiHeadPolicy, trajectory: ParallelTrajectory, rewards: np.ndarray,
           optimizer: Adam, max_grad_norm: float = 0.5) -> UpdateInfo:
    """One gradient-ascent step on the importance-weighted score-function surrogate.

    Gradients of trunk and every head come from a single backward pass and
    are clipped to ``max_grad_norm`` jointly.  A non-finite gradient raises
    before any parameter changes.
    """
    adv = advantages(rewards)
    if not adv.any() or optimizer.lr == 0.0:
        return UpdateInfo(0.0, 0.0, skipped=True)
    params = policy.parameters()
    with T.GradientTape() as tape:
        obj, w = surrogate(policy, trajectory, adv)
    grads = tape.gradient(obj, params)
    grads, norm = T.clip_by_global_norm(grads, max_grad_norm)
    optimizer.step(grads, ascent=True)
    return UpdateInfo(float(obj.data), norm, float(np.max(np.abs(w - 1.0))))


@dataclass
class TrainResult:
    policy: MultiHeadPolicy
    entropy: list[float]
    lrs: list[float]
    diversity: dict = field(default_factory=dict)
    weight_dev: list[float] = field(default_factory=list)
    last_trajectory: ParallelTrajectory | None = None
    aborted: str | None = None


def pooled_entropy(trajectory: ParallelTrajectory, k: int, projection=XY) -> float:
    """Reported entropy of the pooled cloud.

    Replicas pinned in a corner revisit identical states; those zero radii
    are floored at the training distance floor rather than aborting the run.
    """
    pool = pooled_states(trajectory, projection)
    try:
        return entropy_knn(pool, k).value
    except DegenerateRadiusError as exc:
        log.debug("floored %d zero radii in the entropy report", len(exc.indices))
        return entropy_knn(pool, k, radius_floor=DISTANCE_FLOOR).value


def head_clouds(trajectory: ParallelTrajectory, projection=XY, stride: int = 1) -> list[np.ndarray]:
    """Projected states s_stride, s_2*stride, ... of each head's replicas, by head index."""
    if stride < 1:
        raise ContractError("stride must be positive")
    out = []
    for h in np.unique(trajectory.heads):
        sub = trajectory.states[trajectory.heads == h, stride::stride, :][..., list(projection)]
        out.append(sub.reshape(-1, len(projection)))
    return out


def train(config: TrainConfig, seed: int, policy: MultiHeadPolicy | None = None,
          callback=None) -> TrainResult:
    """Run the pretraining loop for one seed.

    ``callback(epoch, entropy, lr)`` fires after every epoch (1-based).  On a
    numeric failure the partial curve is returned with ``aborted`` set.
    """
    policy = policy or MultiHeadPolicy(config.heads, seed=seed)
    heads = assign(config.envs, config.heads)
    base = ReplicaSet.create(config.envs, config.terrain)
    optimizer = Adam(policy.parameters(), config.lr)
    result = TrainResult(policy, [], [])
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        optimizer.lr = lr
        behavior = policy.copy()
        start = reset_all(base, seeding.child_seed(seed, seeding.RESET, epoch))
        traj = rollout(start, behavior, heads, config.horizon,
                       seeding.child_seed(seed, seeding.ACTION, epoch))
        rewards = intrinsic_rewards(traj, config.k, config.projection)
        entropy = pooled_entropy(traj, config.k, config.projection)
        try:
            info = update(policy, traj, rewards, optimizer, config.max_grad_norm)
        except NonFiniteError as exc:
            result.aborted = f"epoch {epoch + 1}: {exc}"
            log.error("aborting: %s", result.aborted)
            break
        result.entropy.append(entropy)
        result.lrs.append(lr)
        result.weight_dev.append(info.max_weight_dev)
        result.last_trajectory = traj
        if callback is not None:
            callback(epoch + 1, entropy, lr)
        log.info("seed %d epoch %d entropy %.4f lr %.2e", seed, epoch + 1, entropy, lr)
    if config.heads > 1 and result.last_trajectory is not None:
        clouds = head_clouds(result.last_trajectory, config.projection, DIVERSITY_STRIDE)
        if min(c.shape[0] for c in clouds) > config.k:
            mean_kl, per_head = pairwise_diversity(clouds, config.k, radius_floor=DISTANCE_FLOOR)
            result.diversity = {"mean": mean_kl, "per_head": per_head}
        else:
            log.warning("per-head clouds too small for k=%d; diversity skipped", config.k)
    return result


def measure_diversity(policy: MultiHeadPolicy, rollouts_per_head: int, horizon: int, seed: int,
                      k: int = 5, terrain: TerrainSpec | None = None, projection=XY,
                      stride: int = DIVERSITY_STRIDE) -> tuple[float, list[float], int]:
    """Fresh rollouts of every head, then the mean and per-head KL against the others.

    Returns ``(mean, per_head, n)`` with ``n`` the per-head cloud size.
    """
    if policy.n_heads < 2:
        raise ContractError(f"diversity needs at least 2 heads, policy has {policy.n_heads}")
    heads = np.repeat(np.arange(policy.n_heads), rollouts_per_head)
    base = ReplicaSet.create(heads.size, terrain or TerrainSpec())
    start = reset_all(base, seeding.child_seed(seed, seeding.EVAL, 2))
    traj = rollout(start, policy, heads, horizon, seeding.child_seed(seed, seeding.EVAL, 3))
    clouds = head_clouds(traj, projection, stride)
    mean_kl, per_head = pairwise_diversity(clouds, k, radius_floor=DISTANCE_FLOOR)
    return mean_kl, per_head, clouds[0].shape[0]


def entropy_trend(curve, window: int) -> float:
    """Median of the last ``window`` values minus median of the first ``window``."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < window or window < 1:
        return math.nan
    return float(np.median(curve[-window:]) - np.median(curve[:window]))
