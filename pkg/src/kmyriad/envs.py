"""Replicated 2D point-mass navigation.

Each replica is a double integrator: actions in [-1, 1]^2 scale to an
acceleration, velocity is clipped to ``max_speed``, and position advances by
``velocity * dt``.  Collisions are resolved one axis at a time: if moving
along x would cross a wall or the arena edge, the x move is dropped and vx
is zeroed; then the same for y.  States are ``(x, y, vx, vy)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .errors import ContractError, DomainError, TerrainError

STATE_DIM = 4
ACTION_DIM = 2


@dataclass(frozen=True)
class TerrainSpec:
    variant: str = "empty"
    half_width: float = 5.0
    walls: tuple[tuple[float, float, float, float], ...] = ()
    spawn: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.half_width > 0:
            raise TerrainError("arena half-width must be positive")
        walls = tuple(tuple(float(v) for v in w) for w in self.walls)
        object.__setattr__(self, "walls", walls)
        hw = self.half_width
        for x0, y0, x1, y1 in walls:
            if not (x0 < x1 and y0 < y1):
                raise TerrainError(f"wall {(x0, y0, x1, y1)} has no interior")
            if min(x0, y0) < -hw or max(x1, y1) > hw:
                raise TerrainError(f"wall {(x0, y0, x1, y1)} leaves the arena")
        if self.blocked(np.asarray([self.spawn], dtype=np.float64))[0]:
            raise TerrainError("spawn point lies inside a wall or outside the arena")

    @property
    def wall_array(self) -> np.ndarray:
        return np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)

    def blocked(self, pos: np.ndarray) -> np.ndarray:
        """True where a position is outside the arena or strictly inside a wall."""
        hw = self.half_width
        out = (np.abs(pos) > hw).any(axis=1)
        for x0, y0, x1, y1 in self.walls:
            out |= (pos[:, 0] > x0) & (pos[:, 0] < x1) & (pos[:, 1] > y0) & (pos[:, 1] < y1)
        return out

    @classmethod
    def preset(cls, variant: str, half_width: float = 5.0) -> "TerrainSpec":
        """Built-in layouts scaled to ``half_width``; walls are 0.04*hw thick."""
        s = half_width / 5.0
        t = 0.2 * s
        if variant == "empty":
            walls = ()
        elif variant == "corridor":
            # a horizontal corridor through the spawn, open at both ends
            walls = ((-4.0 * s, 1.0 * s, 4.0 * s, 1.0 * s + t),
                     (-4.0 * s, -1.0 * s - t, 4.0 * s, -1.0 * s))
        elif variant == "maze":
            walls = ((-5.0 * s, 1.5 * s, 2.5 * s, 1.5 * s + t),
                     (-2.5 * s, -1.5 * s - t, 5.0 * s, -1.5 * s),
                     (2.5 * s, -1.5 * s, 2.5 * s + t, 3.5 * s),
                     (-2.5 * s - t, -3.5 * s, -2.5 * s, 1.5 * s),
                     (-1.0 * s, 3.2 * s, 5.0 * s, 3.2 * s + t),
                     (-5.0 * s, -3.4 * s - t, 1.0 * s, -3.4 * s))
        else:
            raise TerrainError(f"unknown terrain variant {variant!r}")
        return cls(variant, half_width, walls)


@dataclass(frozen=True, eq=False)
class ReplicaSet:
    terrain: TerrainSpec
    position: np.ndarray
    velocity: np.ndarray
    t: int = 0
    dt: float = 0.1
    max_accel: float = 1.0
    max_speed: float = 1.0

    @classmethod
    def create(cls, count: int, terrain: TerrainSpec | None = None, **dynamics) -> "ReplicaSet":
        if count < 1:
            raise ContractError("replica count must be positive")
        terrain = terrain or TerrainSpec()
        pos = np.tile(np.asarray(terrain.spawn, dtype=np.float64), (count, 1))
        return cls(terrain, pos, np.zeros((count, 2)), **dynamics)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity], axis=1)

    def subset(self, index) -> "ReplicaSet":
        index = np.asarray(index, dtype=np.intp)
        return replace(self, position=self.position[index], velocity=self.velocity[index])

    @staticmethod
    def merge(parts: list["ReplicaSet"], index_lists: list) -> "ReplicaSet":
        """Reassemble disjoint subsets into replica order."""
        total = sum(p.count for p in parts)
        pos = np.empty((total, 2))
        vel = np.empty((total, 2))
        for part, idx in zip(parts, index_lists):
            pos[idx] = part.position
            vel[idx] = part.velocity
        return replace(parts[0], position=pos, velocity=vel)


def reset_all(replicas: ReplicaSet, seed: int, jitter: float = 0.05,
              max_tries: int = 100) -> ReplicaSet:
    """Place every replica at the spawn plus independent Gaussian jitter, at rest.

    Replica ``i`` draws from its own stream, so a replica's start does not
    depend on how many others exist.
    """
    terrain = replicas.terrain
    spawn = np.asarray(terrain.spawn, dtype=np.float64)
    pos = np.empty((replicas.count, 2))
    for i in range(replicas.count):
        rng = seeding.stream(seed, seeding.RESET, i)
        for _ in range(max_tries):
            cand = spawn + jitter * rng.standard_normal(2)
            if not terrain.blocked(cand[None, :])[0]:
                pos[i] = cand
                break
        else:
            raise TerrainError(f"replica {i}: no free spawn after {max_tries} draws")
    return replace(replicas, position=pos, velocity=np.zeros_like(pos), t=0)


def _axis_blocked(terrain: TerrainSpec, start: np.ndarray, end: np.ndarray, axis: int) -> np.ndarray:
    """Whether the axis-aligned move start->end crosses the edge or any wall interior."""
    hw = terrain.half_width
    blocked = np.abs(end[:, axis]) > hw
    other = 1 - axis
    lo = np.minimum(start[:, axis], end[:, axis])
    hi = np.maximum(start[:, axis], end[:, axis])
    moving = hi > lo
    for wall in terrain.walls:
        a0, a1 = wall[axis], wall[axis + 2]
        o0, o1 = wall[other], wall[other + 2]
        across = (start[:, other] > o0) & (start[:, other] < o1)
        blocked |= moving & across & (hi > a0) & (lo < a1)
    return blocked


def step_all(replicas: ReplicaSet, actions) -> ReplicaSet:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (replicas.count, ACTION_DIM):
        raise ContractError(f"actions must be [{replicas.count}, {ACTION_DIM}], got {actions.shape}")
    if not np.isfinite(actions).all():
        raise DomainError("non-finite action")
    if np.abs(actions).max(initial=0.0) > 1.0:
        raise DomainError("action components must lie in [-1, 1]")
    vel = replicas.velocity + actions * replicas.max_accel * replicas.dt
    speed = np.sqrt(np.sum(vel * vel, axis=1, keepdims=True))
    too_fast = speed > replicas.max_speed
    vel = np.where(too_fast, vel * (replicas.max_speed / np.where(too_fast, speed, 1.0)), vel)
    pos = replicas.position.copy()
    for axis in (0, 1):
        target = pos.copy()
        target[:, axis] = pos[:, axis] + vel[:, axis] * replicas.dt
        hit = _axis_blocked(replicas.terrain, pos, target, axis)
        pos[:, axis] = np.where(hit, pos[:, axis], target[:, axis])
        vel[:, axis] = np.where(hit, 0.0, vel[:, axis])
    return replace(replicas, position=pos, velocity=vel, t=replicas.t + 1)


@dataclass(eq=False)
class ParallelTrajectory:
    """One episode for every replica.

    ``pre_squash`` holds the Gaussian draws before tanh squashing; densities
    are evaluated from them so saturated actions stay exact.
    """

    states: np.ndarray            # [m, T+1, 4]
    actions: np.ndarray           # [m, T, 2]
    log_densities: np.ndarray     # [m, T]
    heads: np.ndarray             # [m]
    pre_squash: np.ndarray | None = field(default=None, repr=False)  # [m, T, 2]

    @property
    def replicas(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def save(self, path) -> None:
        extra = {} if self.pre_squash is None else {"pre_squash": self.pre_squash}
        np.savez(path, states=self.states, actions=self.actions,
                 log_densities=self.log_densities, heads=self.heads, **extra)

    @classmethod
    def load(cls, path) -> "ParallelTrajectory":
        with np.load(path) as z:
            return cls(z["states"], z["actions"], z["log_densities"], z["heads"],
                       z["pre_squash"] if "pre_squash" in z else None)


def action_noise(seed: int, replicas: int, steps: int, start: int = 0) -> np.ndarray:
    """Standard normal draws [replicas, steps, 2] from per-replica streams.

    Replica ``i`` always consumes its stream from step 0, so a rollout resumed
    at ``start`` sees the same noise the uninterrupted one would have.
    """
    out = np.empty((replicas, steps, ACTION_DIM))
    for i in range(replicas):
        block = seeding.stream(seed, seeding.ACTION, i).standard_normal((start + steps, ACTION_DIM))
        out[i] = block[start:]
    return out


def rollout(replicas: ReplicaSet, policy, heads, horizon: int, seed: int) -> ParallelTrajectory:
    """Run ``horizon`` steps, replica ``i`` driven by head ``heads[i]``.

    ``policy`` needs ``sample(states, heads, noise) -> (actions, log_density,
    pre_squash)``.  Noise is keyed by the replica's absolute step counter.
    """
    heads = np.asarray(heads, dtype=np.intp)
    if heads.shape != (replicas.count,):
        raise ContractError("assignment must give one head per replica")
    m = replicas.count
    noise = action_noise(seed, m, horizon, start=replicas.t)
    states = np.empty((m, horizon + 1, STATE_DIM))
    actions = np.empty((m, horizon, ACTION_DIM))
    pre = np.empty((m, horizon, ACTION_DIM))
    logp = np.empty((m, horizon))
    states[:, 0] = replicas.states
    current = replicas
    for t in range(horizon):
        a, lp, u = policy.sample(states[:, t], heads, noise[:, t])
        actions[:, t] = a
        logp[:, t] = lp
        pre[:, t] = u
        current = step_all(current, a)
        states[:, t + 1] = current.states
    return ParallelTrajectory(states, actions, logp, heads.copy(), pre)


def rollout_with_final(replicas, policy, heads, horizon, seed):
    """Like :func:`rollout` but also returns the final :class:`ReplicaSet`."""
    traj = rollout(replicas, policy, heads, horizon, seed)
    final = replace(replicas, position=traj.states[:, -1, :2].copy(),
                    velocity=traj.states[:, -1, 2:].copy(), t=replicas.t + horizon)
    return traj, final


def occupancy_grid(trajectory: ParallelTrajectory, bins: int, half_width: float,
                   heads=None) -> np.ndarray:
    """Visit counts on a uniform ``bins x bins`` grid over the arena.

    Indexed ``[iy, ix]`` with y ascending.  ``heads`` restricts counting to
    replicas whose head is in the given collection.
    """
    if bins < 1:
        raise ContractError("bins must be at least 1")
    states = trajectory.states
    if heads is not None:
        states = states[np.isin(trajectory.heads, np.atleast_1d(heads))]
    xy = states[..., :2].reshape(-1, 2)
    edges = np.linspace(-half_width, half_width, bins + 1)
    counts, _, _ = np.histogram2d(xy[:, 1], xy[:, 0], bins=[edges, edges])
    return counts.astype(np.int64)
