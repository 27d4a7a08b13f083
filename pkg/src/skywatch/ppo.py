"""Proximal Policy Optimization over factored discrete action spaces.

The policy has a shared two-layer trunk, one categorical head per action
component and a scalar value head. Heads are independent, so the joint
log-probability of an action is the sum of the per-head log-probabilities.
Defaults follow the usual published PPO settings (clip 0.2, gamma 0.99,
GAE lambda 0.95, 10 epochs, Adam 3e-4, value coefficient 0.5, gradient-norm
clip 0.5).
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DimensionError, NumericError, StateError
from .nn import Adam, Dense, load_checkpoint, save_checkpoint
from .rng import as_generator


# ---- policy network ----------------------------------------------------------------

class PolicyNetwork:
    """Shared trunk, per-head categorical logits and a value head."""

    def __init__(self, obs_dim: int, head_sizes: Sequence[int], hidden: int = 64,
                 activation: str = "tanh", rng: np.random.Generator | None = None):
        if activation not in ("tanh", "relu"):
            raise ConfigError(f"trunk activation must be tanh or relu, got {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = int(obs_dim)
        self.head_sizes = [int(h) for h in head_sizes]
        if not self.head_sizes or min(self.head_sizes) < 1:
            raise ConfigError("every action head needs at least one choice")
        self.hidden, self.activation = int(hidden), activation
        self.trunk = [Dense(obs_dim, hidden, activation, rng=rng),
                      Dense(hidden, hidden, activation, rng=rng)]
        self.pi = Dense(hidden, sum(self.head_sizes), rng=rng)
        self.pi.params["W"] *= 0.01  # near-uniform initial heads
        self.vf = Dense(hidden, 1, rng=rng)
        self.layers = [*self.trunk, self.pi, self.vf]
        # consecutive equal-size heads are processed as one [N, n_heads, size] block
        self.groups = []
        start = 0
        for size in self.head_sizes:
            if self.groups and self.groups[-1][2] == size:
                s, n, _ = self.groups[-1]
                self.groups[-1] = (s, n + 1, size)
            else:
                self.groups.append((start, 1, size))
            start += size

    def parameters(self):
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for key, value in self.state_dict().items():
            if tensors[key].shape != value.shape:
                raise DimensionError(f"checkpoint tensor {key} has shape {tensors[key].shape}")
            value[...] = tensors[key]

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise DimensionError(f"observations must be [N, {self.obs_dim}], got {obs.shape}")
        h = obs
        for layer in self.trunk:
            h = layer.forward(h)
        logits = self.pi.forward(h)
        values = self.vf.forward(h)[:, 0]
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite policy logits")
        return logits, values

    def backward(self, dlogits: np.ndarray, dvalues: np.ndarray) -> None:
        dh = self.pi.backward(dlogits) + self.vf.backward(dvalues[:, None])
        for layer in reversed(self.trunk):
            dh = layer.backward(dh)

    def head_blocks(self, logits: np.ndarray):
        """Yield ``(group_index, [N, n_heads, size] view)`` per head group."""
        for g, (start, n, size) in enumerate(self.groups):
            yield g, logits[:, start:start + n * size].reshape(-1, n, size)

    def distributions(self, logits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per group ``(log_probs, probs)`` arrays of shape ``[N, n_heads, size]``."""
        out = []
        for _, block in self.head_blocks(logits):
            shifted = block - block.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            out.append((logp, np.exp(logp)))
        return out

    def split_actions(self, actions: np.ndarray) -> list[np.ndarray]:
        out, col = [], 0
        for _, n, _ in self.groups:
            out.append(actions[:, col:col + n])
            col += n
        return out

    def log_prob_entropy(self, logits, actions) -> tuple[np.ndarray, np.ndarray, list]:
        dists = self.distributions(logits)
        logp_total = np.zeros(len(logits))
        ent_total = np.zeros(len(logits))
        for (logp, p), acts in zip(dists, self.split_actions(actions)):
            logp_total += np.take_along_axis(logp, acts[..., None], axis=-1)[..., 0].sum(axis=1)
            ent_total += -(p * logp).sum(axis=(1, 2))
        return logp_total, ent_total, dists

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "head_sizes": self.head_sizes,
                "hidden": self.hidden, "activation": self.activation}


def sample_action(policy: PolicyNetwork, observation, rng: np.random.Generator,
                  deterministic: bool = False) -> tuple[np.ndarray, float, float]:
    """Sample every head independently; returns ``(action, log_prob, value)``."""
    obs = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    logits, values = policy.forward(obs)
    parts, logp_total = [], 0.0
    for logp, p in policy.distributions(logits):
        if deterministic:
            idx = logp[0].argmax(axis=-1)
        else:
            cdf = np.cumsum(p[0], axis=-1)
            u = rng.random(cdf.shape[0])[:, None] * cdf[:, -1:]
            idx = np.minimum((cdf < u).sum(axis=-1), cdf.shape[1] - 1)
        logp_total += float(logp[0][np.arange(len(idx)), idx].sum())
        parts.append(idx)
    return np.concatenate(parts).astype(np.int64), logp_total, float(values[0])


# ---- rollouts and advantages ----------------------------------------------------------

class RolloutBuffer:
    def __init__(self, horizon: int, obs_dim: int, n_heads: int):
        self.horizon = int(horizon)
        self.obs = np.zeros((horizon, obs_dim))
        self.actions = np.zeros((horizon, n_heads), dtype=np.int64)
        self.log_probs = np.zeros(horizon)
        self.rewards = np.zeros(horizon)
        self.values = np.zeros(horizon)
        self.dones = np.zeros(horizon)
        self.size = 0

    @property
    def full(self) -> bool:
        return self.size == self.horizon

    def add(self, obs, action, log_prob, reward, value, done) -> None:
        if self.full:
            raise StateError("rollout buffer is full")
        i = self.size
        self.obs[i], self.actions[i] = obs, action
        self.log_probs[i], self.rewards[i] = log_prob, reward
        self.values[i], self.dones[i] = value, float(done)
        self.size += 1

    def clear(self) -> None:
        self.size = 0


def compute_gae(buffer: RolloutBuffer, last_value: float, gamma: float = 0.99,
                lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for a full buffer.

    ``dones[t]`` marks that the transition at ``t`` ended an episode, which
    cuts both the bootstrap and the advantage recursion there.
    """
    n = buffer.size
    if n == 0:
        raise StateError("cannot compute advantages on an empty buffer")
    r, v, d = buffer.rewards[:n], buffer.values[:n], buffer.dones[:n]
    next_v = np.append(v[1:], last_value)
    delta = r + gamma * next_v * (1.0 - d) - v
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = delta[t] + gamma * lam * (1.0 - d[t]) * acc
        adv[t] = acc
    return adv, adv + v


class RunningMeanStd:
    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(x)
        b_mean, b_var, b_n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = b_mean - self.mean
        total = self.count + b_n
        self.mean = self.mean + delta * b_n / total
        m2 = self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray, clip: float = 10.0) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -clip, clip)


# ---- update ------------------------------------------------------------------------------

@dataclass
class PpoLossParts:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def ppo_loss_and_grads(policy: PolicyNetwork, obs, actions, old_log_probs, advantages,
                       returns, clip_epsilon: float, value_coef: float,
                       entropy_coef: float) -> PpoLossParts:
    """Forward the clipped PPO objective on one minibatch and fill parameter grads."""
    m = len(obs)
    logits, values = policy.forward(obs)
    logp, ent, dists = policy.log_prob_entropy(logits, actions)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surr1, surr2 = ratio * advantages, clipped * advantages
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_loss = float(np.mean((values - returns) ** 2))
    entropy = float(np.mean(ent))
    if not np.isfinite(policy_loss + value_loss + entropy):
        raise NumericError(f"non-finite PPO loss: policy={policy_loss} value={value_loss} "
                           f"entropy={entropy} max|logit|={np.max(np.abs(logits))}")
    # the unclipped branch carries gradient wherever it is the active minimum
    active = surr1 <= surr2
    dlogp = -np.where(active, surr1, 0.0) / m

    dlogits = np.zeros_like(logits)
    for (start, n, size), (logp_g, p_g), acts in zip(policy.groups, dists,
                                                      policy.split_actions(actions)):
        onehot = np.zeros_like(p_g)
        np.put_along_axis(onehot, acts[..., None], 1.0, axis=-1)
        head_ent = -(p_g * logp_g).sum(axis=-1, keepdims=True)
        d_ent = -p_g * (logp_g + head_ent)
        block = dlogp[:, None, None] * (onehot - p_g) - entropy_coef * d_ent / m
        dlogits[:, start:start + n * size] = block.reshape(m, n * size)
    dvalues = value_coef * 2.0 * (values - returns) / m
    policy.backward(dlogits, dvalues)
    return PpoLossParts(policy_loss, value_loss, entropy,
                        float(np.mean((ratio - 1.0) - np.log(ratio))),
                        float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)))


def ppo_update(policy: PolicyNetwork, optimizer: Adam, buffer: RolloutBuffer, advantages,
               returns, rng: np.random.Generator, clip_epsilon: float = 0.2,
               epochs: int = 10, minibatch_size: int = 64, value_coef: float = 0.5,
               entropy_coef: float = 0.01, max_grad_norm: float | None = 0.5) -> dict:
    """Several epochs of minibatch Adam on the clipped surrogate."""
    n = buffer.size
    adv = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    parts = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch_size):
            b = order[start:start + minibatch_size]
            parts.append(ppo_loss_and_grads(policy, buffer.obs[b], buffer.actions[b],
                                            buffer.log_probs[b], adv[b], returns[b],
                                            clip_epsilon, value_coef, entropy_coef))
            optimizer.step(max_grad_norm)
    buffer.clear()
    return {k: float(np.mean([getattr(p, k) for p in parts]))
            for k in PpoLossParts.__dataclass_fields__}


# ---- agent -----------------------------------------------------------------------------

CURVE_COLUMNS = ("update_index", "env_steps", "mean_reward", "entropy", "value_loss")


class PPOAgent(BaseEstimator):
    """PPO trainer with an estimator-style interface.

    ``fit(env)`` trains on any object with ``reset(seed)``, ``step(action)``,
    ``action_nvec`` and ``observation_dim``; ``predict(obs)`` returns an
    action. Training stops after ``total_steps`` environment steps or when
    the mean episode reward of the last ``plateau_window`` updates improves
    by less than ``plateau_tol`` (relative) on the window before it.
    """

    def __init__(self, n_steps=2048, minibatch_size=64, epochs_per_update=10,
                 learning_rate=3e-4, gamma=0.99, gae_lambda=0.95, clip_epsilon=0.2,
                 entropy_coef=0.01, value_coef=0.5, max_grad_norm=0.5, hidden=64,
                 activation="tanh", normalize_obs=True, total_steps=100_000,
                 plateau_window=20, plateau_tol=0.01, random_state=0):
        self.n_steps = n_steps
        self.minibatch_size = minibatch_size
        self.epochs_per_update = epochs_per_update
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_epsilon = clip_epsilon
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.max_grad_norm = max_grad_norm
        self.hidden = hidden
        self.activation = activation
        self.normalize_obs = normalize_obs
        self.total_steps = total_steps
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol
        self.random_state = random_state

    def _validate(self):
        if not self.clip_epsilon > 0:
            raise ConfigError("clip_epsilon must be positive")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.n_steps < 1 or self.minibatch_size < 1 or self.epochs_per_update < 1:
            raise ConfigError("n_steps, minibatch_size and epochs_per_update must be positive")
        if self.total_steps < 1 or self.plateau_window < 0:
            raise ConfigError("total_steps must be positive and plateau_window non-negative")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"trunk activation must be tanh or relu, got {self.activation!r}")

    def _setup(self, obs_dim: int, head_sizes) -> None:
        seed = self.random_state if self.random_state is not None else 0
        self.rng_ = np.random.default_rng([seed, 1])
        self.policy_ = PolicyNetwork(obs_dim, head_sizes, self.hidden, self.activation,
                                     rng=np.random.default_rng([seed, 0]))
        self.optimizer_ = Adam(self.policy_, learning_rate=self.learning_rate, epsilon=1e-5)
        self.obs_rms_ = RunningMeanStd(obs_dim)

    def _norm(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        return self.obs_rms_.normalize(obs) if self.normalize_obs else obs

    def fit(self, env, callback: Callable[[dict], None] | None = None):
        self._validate()
        self._setup(env.observation_dim, env.action_nvec)
        seed = self.random_state if self.random_state is not None else 0
        buffer = RolloutBuffer(self.n_steps, env.observation_dim, len(env.action_nvec))
        episode_returns: deque = deque(maxlen=100)
        self.learning_curve_ = []
        obs = np.asarray(env.reset(seed=seed), dtype=np.float64)
        running, steps, update = 0.0, 0, 0
        while steps < self.total_steps:
            while not buffer.full:
                if self.normalize_obs:
                    self.obs_rms_.update(obs)
                nobs = self._norm(obs)
                action, logp, value = sample_action(self.policy_, nobs, self.rng_)
                next_obs, reward, done, _ = env.step(action)
                buffer.add(nobs, action, logp, reward, value, done)
                running += reward
                steps += 1
                if done:
                    episode_returns.append(running)
                    running = 0.0
                    next_obs = env.reset()
                obs = np.asarray(next_obs, dtype=np.float64)
            _, last_value = self.policy_.forward(self._norm(obs)[None])
            adv, ret = compute_gae(buffer, float(last_value[0]), self.gamma, self.gae_lambda)
            stats = ppo_update(self.policy_, self.optimizer_, buffer, adv, ret, self.rng_,
                               self.clip_epsilon, self.epochs_per_update, self.minibatch_size,
                               self.value_coef, self.entropy_coef, self.max_grad_norm)
            mean_reward = float(np.mean(episode_returns)) if episode_returns else 0.0
            row = {"update_index": update, "env_steps": steps, "mean_reward": mean_reward,
                   "entropy": stats["entropy"], "value_loss": stats["value_loss"]}
            self.learning_curve_.append(row)
            if callback is not None:
                callback(row)
            update += 1
            if self._plateaued():
                break
        return self

    def _plateaued(self) -> bool:
        w = self.plateau_window
        if not w or len(self.learning_curve_) < 2 * w:
            return False
        r = [row["mean_reward"] for row in self.learning_curve_]
        recent, before = np.mean(r[-w:]), np.mean(r[-2 * w:-w])
        if before <= 0:
            return False
        return (recent - before) / before < self.plateau_tol

    def predict(self, observation, deterministic: bool = False, rng=None) -> np.ndarray:
        check_is_fitted(self, "policy_")
        rng = as_generator(rng) if rng is not None else self.rng_
        action, _, _ = sample_action(self.policy_, self._norm(observation), rng, deterministic)
        return action

    def action_probabilities(self, observation) -> list[np.ndarray]:
        """Per head-group probability arrays ``[n_heads, size]`` for one observation."""
        check_is_fitted(self, "policy_")
        logits, _ = self.policy_.forward(self._norm(observation)[None])
        return [p[0] for _, p in self.policy_.distributions(logits)]

    def learning_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in self.learning_curve_:
            w.writerow([row["update_index"], row["env_steps"]]
                       + [repr(float(row[k])) for k in CURVE_COLUMNS[2:]])
        return buf.getvalue()

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "policy_")
        tensors = self.policy_.state_dict()
        tensors["obs_mean"] = self.obs_rms_.mean
        tensors["obs_var"] = self.obs_rms_.var
        tensors["obs_count"] = np.array([self.obs_rms_.count])
        arch = {"kind": "ppo_policy", "policy": self.policy_.config(), "params": self.get_params()}
        return save_checkpoint(path, arch, tensors, meta)

    @classmethod
    def load(cls, path) -> "PPOAgent":
        arch, tensors, _ = load_checkpoint(path)
        if arch.get("kind") != "ppo_policy":
            raise ConfigError(f"{path} is not a policy checkpoint")
        agent = cls(**arch["params"])
        pc = arch["policy"]
        agent._setup(pc["obs_dim"], pc["head_sizes"])
        agent.policy_.load_state_dict(tensors)
        agent.obs_rms_.mean = tensors["obs_mean"]
        agent.obs_rms_.var = tensors["obs_var"]
        agent.obs_rms_.count = float(tensors["obs_count"][0])
        return agent


def train(env_factory: Callable[[], object], config: dict | None = None, seed: int = 0):
    """Build an environment, train a PPO agent on it, return ``(agent, curve)``."""
    agent = PPOAgent(**(config or {}), random_state=seed)
    agent.fit(env_factory())
    return agent, agent.learning_curve_
