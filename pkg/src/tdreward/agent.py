"""Value-based RL on the combined proxy + sparse success reward.

Double-Q learning over the five discrete grid actions with epsilon-greedy
exploration, an n-step FIFO replay buffer, and soft target updates. Each
stored transition carries the combined reward

    r = proxy(o_t, o_t+1) + success_weight * success_indicator

computed at insertion time; passing no reward handle gives the
sparse-only baseline. Episodes terminate at success, so the bonus lands
on the terminal transition exactly once. Runs are bitwise reproducible
from (config, seed) in this single-threaded loop.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import envs, nets, persist
from .errors import TrainingDivergedError
from .seeding import child_seed, rng_for


@dataclass
class RLConfig:
    gamma: float = 0.99
    n_step: int = 3
    replay_capacity: int = 150_000
    batch_size: int = 512
    target_update_rate: float = 0.005
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    success_weight: float = 1.0
    max_steps: int = 50_000
    eval_interval: int = 2_500
    eval_episodes: int = 20
    learning_rate: float = 1e-3
    train_every: int = 2
    warmup_steps: int = 1_000
    hidden: tuple = (256, 256)
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.n_step < 1:
            raise ValueError(f"n_step must be >= 1, got {self.n_step}")
        if self.success_weight < 0:
            raise ValueError("success_weight must be >= 0")

    @classmethod
    def toy(cls, **overrides):
        """Grid-scale defaults: smaller replay and batch than the full config."""
        base = dict(replay_capacity=50_000, batch_size=128)
        base.update(overrides)
        return cls(**base)

    def epsilon(self, step):
        frac = min(1.0, step / max(1, self.eps_decay_steps))
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def combined_reward(handle, frame_now, frame_next, success, success_weight):
    """Proxy reward plus weighted success bonus; sparse-only when handle is None."""
    if success_weight < 0:
        raise ValueError("success_weight must be >= 0")
    bonus = success_weight if success else 0.0
    if handle is None:
        return bonus
    return handle.infer(frame_now, frame_next) + bonus


def n_step_return(rewards, bootstrap, gamma, done):
    """Discounted sum of up to n rewards plus the optional bootstrap tail."""
    if len(rewards) == 0:
        raise ValueError("need at least one reward")
    total = 0.0 if done else float(bootstrap)
    for r in reversed(rewards):
        total = r + gamma * total
    return total


class NStepReplay:
    """FIFO transition store with n-step reward aggregation at insertion.

    Windows never cross episode boundaries: a done transition flushes all
    pending shorter windows with bootstrapping disabled.
    """

    def __init__(self, capacity, n_step, gamma, obs_dim):
        self.capacity = capacity
        self.n_step = n_step
        self.gamma = gamma
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.returns = np.zeros(capacity, dtype=np.float64)
        self.bootstraps = np.zeros(capacity, dtype=np.float64)  # gamma^n or 0
        self.count = 0
        self.pending = deque()

    def __len__(self):
        return min(self.count, self.capacity)

    def push(self, obs, action, reward, next_obs, done):
        self.pending.append((obs, action, reward))
        if len(self.pending) == self.n_step:
            self._emit(next_obs, done)
        if done:
            while self.pending:
                self._emit(next_obs, True)

    def _emit(self, next_obs, done):
        rewards = [r for _, _, r in self.pending]
        obs0, action0, _ = self.pending[0]
        self.pending.popleft()
        idx = self.count % self.capacity
        self.obs[idx] = obs0
        self.next_obs[idx] = next_obs
        self.actions[idx] = action0
        self.returns[idx] = n_step_return(rewards, 0.0, self.gamma, True)
        self.bootstraps[idx] = 0.0 if done else self.gamma ** len(rewards)
        self.count += 1

    def sample(self, batch_size, rng):
        idx = rng.integers(0, len(self), size=batch_size)
        return (self.obs[idx].astype(np.float64),
                self.actions[idx],
                self.returns[idx],
                self.next_obs[idx].astype(np.float64),
                self.bootstraps[idx])


class QPolicy:
    """Greedy action selection from a frozen action-value net."""

    def __init__(self, net):
        self.net = net

    def __call__(self, obs, state=None):
        values = self.net(np.asarray(obs, dtype=np.float64).reshape(1, -1))
        return int(np.argmax(values[0]))


class ExpertPolicy:
    """Scripted expert wrapped with the policy call signature."""

    def __call__(self, obs, state=None):
        return int(envs.scripted_expert(state))


def soft_update(target, online, rate):
    """target <- (1 - rate) * target + rate * online, exactly."""
    for pt, po in zip(target.params, online.params):
        pt *= 1.0 - rate
        pt += rate * po


def double_q_targets(online, target, next_obs, returns, bootstraps):
    """n-step targets with the online net picking the bootstrap action."""
    best = np.argmax(online(next_obs), axis=1)
    tail = target(next_obs)[np.arange(len(best)), best]
    return returns + bootstraps * tail


def q_learning_update(online, target, optimizer, batch):
    obs, actions, returns, next_obs, bootstraps = batch
    targets = double_q_targets(online, target, next_obs, returns, bootstraps)
    values, cache = online.forward(obs)
    rows = np.arange(len(actions))
    err = values[rows, actions] - targets
    loss = float(np.mean(err ** 2))
    grad = np.zeros_like(values)
    grad[rows, actions] = 2.0 * err / len(actions)
    grads, _ = online.backward(cache, grad)
    optimizer.step(online.params, grads)
    return loss


def train_policy(task, reward_handle, cfg, height=envs.DEFAULT_HEIGHT,
                 width=envs.DEFAULT_WIDTH, horizon=None):
    """Run the full training loop; returns (policy, learning curve).

    The curve has one row (env_step, eval_success_rate, mean_episode_return)
    per evaluation, using cfg.eval_episodes fresh greedy episodes each time.
    """
    obs_dim = envs.frame_dim(height, width)
    online = nets.MLP((obs_dim, *cfg.hidden, len(envs.Action)),
                      rng_for(cfg.rng_seed, "q-init"))
    target = nets.MLP(online.sizes, rng_for(cfg.rng_seed, "q-init"))
    optimizer = nets.Adam(online.params, lr=cfg.learning_rate)
    buffer = NStepReplay(cfg.replay_capacity, cfg.n_step, cfg.gamma, obs_dim)
    explore_rng = rng_for(cfg.rng_seed, "explore")
    replay_rng = rng_for(cfg.rng_seed, "replay")

    curve = []
    episode = 0
    state = envs.reset(task, child_seed(cfg.rng_seed, "episode", episode),
                       height=height, width=width, horizon=horizon)
    obs = envs.render(state).reshape(-1)
    for step in range(1, cfg.max_steps + 1):
        if explore_rng.random() < cfg.epsilon(step):
            action = int(explore_rng.integers(0, len(envs.Action)))
        else:
            action = int(np.argmax(online(obs[None, :])[0]))
        state, frame, success, done = envs.step(state, action)
        next_obs = frame.reshape(-1)
        r = combined_reward(reward_handle, obs, next_obs, success,
                            cfg.success_weight)
        buffer.push(obs, action, r, next_obs, done)
        obs = next_obs
        if done:
            episode += 1
            state = envs.reset(task,
                               child_seed(cfg.rng_seed, "episode", episode),
                               height=height, width=width, horizon=horizon)
            obs = envs.render(state).reshape(-1)

        if step >= cfg.warmup_steps and step % cfg.train_every == 0:
            batch = buffer.sample(cfg.batch_size, replay_rng)
            loss = q_learning_update(online, target, optimizer, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite value loss at step {step} "
                    f"(episode {episode})")
            soft_update(target, online, cfg.target_update_rate)

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            policy = QPolicy(online)
            rate, mean_return = _evaluate(
                policy, task, reward_handle, cfg,
                child_seed(cfg.rng_seed, "eval", step), height, width,
                horizon)
            if not curve or curve[-1][0] != step:
                curve.append((step, rate, mean_return))
    return QPolicy(online), curve


def _evaluate(policy, task, reward_handle, cfg, seed, height, width,
              horizon):
    successes = 0
    returns = []
    for ep in range(cfg.eval_episodes):
        state = envs.reset(task, child_seed(seed, "ep", ep),
                           height=height, width=width, horizon=horizon)
        obs = envs.render(state).reshape(-1)
        total = 0.0
        while not state.done:
            state, frame, success, done = envs.step(
                state, policy(obs, state=state))
            next_obs = frame.reshape(-1)
            total += combined_reward(reward_handle, obs, next_obs, success,
                                     cfg.success_weight)
            obs = next_obs
        successes += int(state.success)
        returns.append(total)
    return successes / cfg.eval_episodes, float(np.mean(returns))


def evaluate_policy(policy, task, episodes, seed, height=envs.DEFAULT_HEIGHT,
                    width=envs.DEFAULT_WIDTH, horizon=None):
    """Greedy success rate over fresh episodes with derived seeds."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    successes = 0
    for ep in range(episodes):
        state = envs.reset(task, child_seed(seed, "ep", ep),
                           height=height, width=width, horizon=horizon)
        obs = envs.render(state).reshape(-1)
        while not state.done:
            state, frame, _, _ = envs.step(state, policy(obs, state=state))
            obs = frame.reshape(-1)
        successes += int(state.success)
    return successes / episodes


def save_policy(path, policy):
    nets.save_policy_net(path, policy.net)


def load_policy(path):
    return QPolicy(nets.load_policy_net(path))


def save_curve_csv(path, curve):
    lines = ["step,success_rate,mean_episode_return"]
    lines += [f"{s},{r!r},{m!r}" for s, r, m in curve]
    persist.atomic_write_text(path, "\n".join(lines) + "\n")
