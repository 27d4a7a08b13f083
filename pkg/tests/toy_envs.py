"""Small environments with known optima for exercising the PPO trainer."""

import numpy as np


class BanditEnv:
    """One state, two arms; arm 1 pays 1, arm 0 pays 0."""

    action_nvec = [2]
    observation_dim = 1
    optimum = 1.0

    def reset(self, seed=None):
        return np.zeros(1)

    def step(self, action):
        return np.zeros(1), float(action[0] == 1), True, {}


class ContextMatchEnv:
    """Ten steps per episode; reward 1 when the action names the shown context."""

    action_nvec = [3]
    observation_dim = 3
    horizon = 10
    optimum = 10.0

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def _obs(self):
        o = np.zeros(3)
        o[self.ctx] = 1.0
        return o

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.ctx = int(self.rng.integers(3))
        return self._obs()

    def step(self, action):
        reward = float(action[0] == self.ctx)
        self.t += 1
        self.ctx = int(self.rng.integers(3))
        return self._obs(), reward, self.t >= self.horizon, {}


class CorridorEnv:
    """Five cells in a row; start left, reward 1 on reaching the right end within 8 moves."""

    action_nvec = [2]
    observation_dim = 5
    horizon = 8
    optimum = 1.0

    def _obs(self):
        o = np.zeros(5)
        o[self.pos] = 1.0
        return o

    def reset(self, seed=None):
        self.pos, self.t = 0, 0
        return self._obs()

    def step(self, action):
        self.pos = min(4, self.pos + 1) if action[0] == 1 else max(0, self.pos - 1)
        self.t += 1
        if self.pos == 4:
            return self._obs(), 1.0, True, {}
        return self._obs(), 0.0, self.t >= self.horizon, {}


def mean_episode_reward(agent, env, episodes, seed=0, deterministic=False):
    rng = np.random.default_rng(seed)
    total = 0.0
    for k in range(episodes):
        obs = env.reset(seed=None if k else seed)
        done = False
        while not done:
            obs, r, done, _ = env.step(agent.predict(obs, deterministic=deterministic, rng=rng))
            total += r
    return total / episodes
