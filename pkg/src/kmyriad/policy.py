"""Shared-trunk, multi-head tanh-squashed Gaussian policy."""

from __future__ import annotations

import copy
import math

import numpy as np

from . import seeding
from . import tensor as T
from .errors import BoundaryError, ContractError
from .nn import MLP, Linear
from .tensor import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_BIAS = -0.5
_LOG_2PI = math.log(2.0 * math.pi)
# keeps squashed actions strictly inside the bounds when tanh saturates
_TANH_LIMIT = 1.0 - 2.0**-50


class Head:
    """Adapter [h -> h] with ReLU, then linear mean and log-std maps."""

    def __init__(self, width: int, adapter: int, action_dim: int, rng=None):
        self.adapter = Linear(width, adapter, rng)
        self.mu = Linear(adapter, action_dim, rng)
        self.log_std = Linear(adapter, action_dim, rng, bias=LOG_STD_BIAS)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        z = T.relu(self.adapter(x))
        return self.mu(z), T.clip(self.log_std(z), LOG_STD_MIN, LOG_STD_MAX)

    def parameters(self) -> list[Tensor]:
        return self.adapter.parameters() + self.mu.parameters() + self.log_std.parameters()


def squash_log_det(u: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Per-row log |da/du| for ``a = low + scale*(tanh(u) + 1)``."""
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)), stable for large |u|
    log1m = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return np.sum(log1m + np.log(scale), axis=-1)


def gaussian_log_density(mu: Tensor, log_std: Tensor, u: np.ndarray) -> Tensor:
    z = (u - mu) * T.exp(-log_std)
    d = u.shape[-1]
    return T.sum_(-0.5 * T.square(z) - log_std, axis=1) - 0.5 * d * _LOG_2PI


class MultiHeadPolicy:
    """One trunk ``[d_s -> 512 -> 256]`` shared by ``n_heads`` Gaussian heads.

    Parameters are drawn from per-component streams of ``seed`` (trunk, then
    head ``h``), so head ``h`` of a 4-head and a 10-head policy built from the
    same seed start identical.  ``seed=None`` builds the all-zero network.
    """

    def __init__(self, n_heads: int, state_dim: int = 4, action_dim: int = 2,
                 trunk: tuple[int, ...] = (512, 256), adapter: int = 256,
                 low=-1.0, high=1.0, seed: int | None = 0):
        if n_heads < 1:
            raise ContractError("need at least one head")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.low = np.broadcast_to(np.asarray(low, dtype=np.float64), (action_dim,)).copy()
        self.high = np.broadcast_to(np.asarray(high, dtype=np.float64), (action_dim,)).copy()
        if not (self.high > self.low).all():
            raise ContractError("action bounds need high > low")
        rng = None if seed is None else seeding.stream(seed, seeding.INIT, 0)
        self.trunk = MLP([state_dim, *trunk], rng, final_activation=True)
        self.heads = [
            Head(trunk[-1], adapter, action_dim,
                 None if seed is None else seeding.stream(seed, seeding.INIT, 1, h))
            for h in range(n_heads)
        ]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def scale(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    def parameters(self) -> list[Tensor]:
        """Trunk layers, then each head in index order (adapter, mean, log-std)."""
        params = self.trunk.parameters()
        for head in self.heads:
            params += head.parameters()
        return params

    def head_parameters(self, h: int) -> list[Tensor]:
        return self.heads[h].parameters()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MultiHeadPolicy":
        return copy.deepcopy(self)

    def _check_heads(self, heads, batch: int) -> np.ndarray:
        heads = np.broadcast_to(np.asarray(heads, dtype=np.intp), (batch,))
        if heads.size and (heads.min() < 0 or heads.max() >= self.n_heads):
            raise ContractError(f"head index out of range [0, {self.n_heads})")
        return heads

    def forward(self, states, heads) -> tuple[Tensor, Tensor]:
        """Means and clamped log-stds; one trunk pass, rows routed by head."""
        states = T.tensor(states)
        heads = self._check_heads(heads, states.shape[0])
        x = self.trunk(states)
        present = np.unique(heads)
        if present.size == 1:
            return self.heads[present[0]](x)
        rows = [np.flatnonzero(heads == h) for h in present]
        outs = [self.heads[h](T.take(x, idx)) for h, idx in zip(present, rows)]
        inverse = np.empty(states.shape[0], dtype=np.intp)
        inverse[np.concatenate(rows)] = np.arange(states.shape[0])
        mu = T.take(T.concat([o[0] for o in outs]), inverse)
        log_std = T.take(T.concat([o[1] for o in outs]), inverse)
        return mu, log_std

    def squash(self, u: np.ndarray) -> np.ndarray:
        th = np.clip(np.tanh(u), -_TANH_LIMIT, _TANH_LIMIT)
        return self.low + self.scale * (th + 1.0)

    def unsquash(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        unit = (actions - self.low) / self.scale - 1.0
        if not (np.abs(unit) < 1.0).all():
            raise BoundaryError("action lies on or outside the action bounds")
        return np.arctanh(unit)

    def log_prob_pre(self, states, pre_squash, heads) -> Tensor:
        """Log-density of the squashed action produced by ``pre_squash``."""
        u = np.asarray(pre_squash, dtype=np.float64)
        mu, log_std = self.forward(states, heads)
        return gaussian_log_density(mu, log_std, u) - squash_log_det(u, self.scale)

    def log_prob(self, states, actions, heads) -> Tensor:
        return self.log_prob_pre(states, self.unsquash(actions), heads)

    def sample(self, states, heads, noise) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Reparameterized draw from standard normal ``noise`` [B, d_a].

        Returns ``(actions, log_density, pre_squash)``.
        """
        mu, log_std = self.forward(states, heads)
        u = mu.data + np.exp(log_std.data) * np.asarray(noise, dtype=np.float64)
        logp = gaussian_log_density(mu, log_std, u).data - squash_log_det(u, self.scale)
        return self.squash(u), logp, u

    def sample_rng(self, states, heads, rng: np.random.Generator):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.sample(states, heads, rng.standard_normal((states.shape[0], self.action_dim)))

    def entropy(self, log_std: Tensor) -> Tensor:
        """Entropy of the pre-squash Gaussian, per row."""
        return T.sum_(log_std, axis=1) + 0.5 * self.action_dim * (1.0 + _LOG_2PI)

    def to_single_head(self, h: int) -> "SingleHeadActor":
        if not 0 <= h < self.n_heads:
            raise ContractError(f"head {h} out of range [0, {self.n_heads})")
        actor = SingleHeadActor.__new__(SingleHeadActor)
        actor.state_dim = self.state_dim
        actor.action_dim = self.action_dim
        actor.low = self.low.copy()
        actor.high = self.high.copy()
        actor.trunk = copy.deepcopy(self.trunk)
        actor.heads = [copy.deepcopy(self.heads[h])]
        return actor


class SingleHeadActor(MultiHeadPolicy):
    """A one-head policy; ``heads`` arguments default to head 0."""

    def __init__(self, **kwargs):
        super().__init__(1, **kwargs)

    def forward(self, states, heads=0):
        return super().forward(states, heads)

    def log_prob_pre(self, states, pre_squash, heads=0):
        return super().log_prob_pre(states, pre_squash, heads)

    def log_prob(self, states, actions, heads=0):
        return super().log_prob(states, actions, heads)

    def sample(self, states, heads=0, noise=None):
        return super().sample(states, heads, noise)
