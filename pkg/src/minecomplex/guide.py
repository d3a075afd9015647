"""Heuristic-selection agent: recent performance in, heuristic scores out.

The agent is a value network with one output per heuristic, trained by
double Q-learning from a prioritized replay buffer with a periodically
synced target network. Scores are the clamped per-step values; Gaussian
exploration noise is added before L1 normalization so the agent can express
confidence through the norm of its output.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import neuro


def reward(delta_f, elapsed):
    """Improvement per unit time; deteriorations are scaled up by their cost."""
    if not elapsed > 0:
        raise ValueError("elapsed time must be positive")
    if delta_f >= 0:
        return delta_f / elapsed
    return delta_f * elapsed


@dataclass
class GuideAction:
    raw: np.ndarray
    final: np.ndarray
    choice: int


class StateWindow:
    """Last K iterations x n heuristics x m metrics, zero padded.

    Metrics per iteration: objective change relative to |best so far|,
    elapsed time relative to its running mean, accepted flag. Only the block
    of the heuristic used in that iteration is nonzero.
    """

    n_metrics = 3

    def __init__(self, n_heuristics, window=8):
        self.n, self.k = int(n_heuristics), int(window)
        self.rows = deque(maxlen=self.k)
        self.mean_elapsed = 0.0
        self.count = 0

    @property
    def dim(self):
        return self.k * self.n * self.n_metrics

    def push(self, heuristic, delta_f, elapsed, accepted, best_abs):
        self.count += 1
        self.mean_elapsed += (elapsed - self.mean_elapsed) / self.count
        row = np.zeros((self.n, self.n_metrics))
        rel = delta_f / best_abs if best_abs > 0 else 0.0
        row[heuristic] = (np.clip(rel, -10.0, 10.0),
                          elapsed / self.mean_elapsed if self.mean_elapsed > 0 else 0.0,
                          1.0 if accepted else 0.0)
        self.rows.appendleft(row)

    def vector(self):
        out = np.zeros((self.k, self.n, self.n_metrics))
        for i, row in enumerate(self.rows):
            out[i] = row
        return out.ravel()


class ReplayBuffer:
    """Proportional prioritized replay over fixed-size numpy storage."""

    def __init__(self, capacity, state_dim, alpha=0.6, eps=1e-3):
        self.capacity = int(capacity)
        self.alpha, self.eps = alpha, eps
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.priorities = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward_value, next_state, done=False):
        i = self.pos
        self.states[i] = state
        self.next_states[i] = next_state
        self.actions[i] = action
        self.rewards[i] = reward_value
        self.dones[i] = float(done)
        top = self.priorities[:self.size].max() if self.size else 1.0
        self.priorities[i] = max(top, self.eps)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng, beta=0.4):
        p = self.priorities[:self.size] ** self.alpha
        p = p / p.sum()
        idx = np.minimum(np.searchsorted(np.cumsum(p), rng.random(batch_size) * p.sum() * (1 - 1e-12),
                                         side="right"), self.size - 1)
        w = (self.size * p[idx]) ** -beta
        return idx, w / w.max()

    def update(self, idx, td_error):
        self.priorities[idx] = np.abs(td_error) + self.eps


class GuideAgent:
    def __init__(self, n_heuristics, state_dim, hidden=(64, 64), lr=1e-3, gamma=0.5,
                 target_sync=100, seed=0):
        rng = np.random.default_rng(seed)
        sizes = [state_dim, *hidden, n_heuristics]
        self.online = neuro.mlp(sizes, rng)
        self.target = neuro.mlp(sizes, rng)
        self.target.copy_from(self.online)
        self.optimizer = neuro.Adam(lr)
        self.n = n_heuristics
        self.gamma = gamma
        self.target_sync = target_sync
        self.steps = 0

    def q_values(self, state):
        return self.online.forward(np.asarray(state, dtype=float))

    def scores(self, state):
        """Per-heuristic scores in [0, 1] (values rescaled to per-step units)."""
        return np.clip((1.0 - self.gamma) * self.q_values(state), 0.0, 1.0)

    def greedy(self, state):
        return int(np.argmax(self.q_values(state)))

    def train_step(self, buffer: ReplayBuffer, batch_size, rng, beta=0.4):
        """One prioritized double-Q update; returns the loss or None if skipped."""
        if len(buffer) == 0 or len(buffer) < batch_size:
            return None
        idx, w = buffer.sample(batch_size, rng, beta)
        s, a = buffer.states[idx], buffer.actions[idx]
        r, s2, done = buffer.rewards[idx], buffer.next_states[idx], buffer.dones[idx]
        best_next = np.argmax(self.online.forward(s2), axis=1)
        q_next = self.target.forward(s2)[np.arange(len(idx)), best_next]
        y = r + self.gamma * (1.0 - done) * q_next
        q = self.online.forward(s)
        rows = np.arange(len(idx))
        td = q[rows, a] - y
        loss = float(np.mean(w * td * td))
        g = np.zeros_like(q)
        g[rows, a] = 2.0 * w * td / len(idx)
        self.online.backward(g)
        self.optimizer.step(self.online.params, self.online.grads)
        buffer.update(idx, td)
        self.steps += 1
        if self.steps % self.target_sync == 0:
            self.target.copy_from(self.online)
        return loss


def score_heuristics(agent: GuideAgent, state, sigma_explore, rng) -> GuideAction:
    raw = agent.scores(state)
    return finalize_scores(raw, sigma_explore, rng)


def finalize_scores(raw, sigma_explore, rng) -> GuideAction:
    raw = np.asarray(raw, dtype=float)
    noisy = raw + rng.normal(0.0, sigma_explore, raw.shape) if sigma_explore > 0 else raw.copy()
    noisy = np.maximum(noisy, 0.0)
    norm = noisy.sum()
    final = noisy / norm if norm > 0 else np.full(len(raw), 1.0 / len(raw))
    choice = min(int(np.searchsorted(np.cumsum(final), rng.random() * final.sum(), side="right")),
                 len(final) - 1)
    return GuideAction(raw, final, choice)


class RunningScale:
    """Exponential moving average of |x|, for scale-free rewards."""

    def __init__(self, decay=0.99):
        self.decay = decay
        self.value = 0.0

    def update(self, x):
        x = abs(x)
        if x == 0:
            return
        self.value = x if self.value == 0 else self.decay * self.value + (1 - self.decay) * x

    def normalize(self, x, clip=5.0):
        if self.value == 0:
            return 0.0 if x == 0 else float(np.sign(x))
        return float(np.clip(x / self.value, -clip, clip))


class UniformSelector:
    """Predefined selection: every heuristic equally likely."""
    name = "uniform"

    def __init__(self, n_heuristics):
        self.n = n_heuristics
        self.probs = np.full(n_heuristics, 1.0 / n_heuristics)
        self.cdf = np.cumsum(self.probs)

    def select(self, rng, progress):
        h = min(int(np.searchsorted(self.cdf, rng.random() * self.cdf[-1], side="right")), self.n - 1)
        return h, self.probs

    def observe(self, heuristic, delta_f, elapsed, accepted, best):
        pass

    def end_epoch(self, rng):
        return None


class GuideSelector:
    """Wires a GuideAgent into the annealing loop."""
    name = "guide"

    def __init__(self, n_heuristics, window=8, hidden=(64, 64), lr=1e-3, gamma=0.5,
                 target_sync=100, buffer_size=20000, batch_size=32, train_steps=8,
                 sigma_start=0.2, sigma_end=0.02, seed=0):
        self.window = StateWindow(n_heuristics, window)
        self.agent = GuideAgent(n_heuristics, self.window.dim, hidden, lr, gamma, target_sync, seed)
        self.buffer = ReplayBuffer(buffer_size, self.window.dim)
        self.batch_size, self.train_steps = batch_size, train_steps
        self.sigma_start, self.sigma_end = sigma_start, sigma_end
        self.scale = RunningScale()
        self._state = self.window.vector()
        self.losses = []

    def sigma(self, progress):
        p = min(max(progress, 0.0), 1.0)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * p

    def select(self, rng, progress):
        action = score_heuristics(self.agent, self._state, self.sigma(progress), rng)
        return action.choice, action.final

    def observe(self, heuristic, delta_f, elapsed, accepted, best):
        r = reward(delta_f, elapsed)
        self.scale.update(r)
        prev = self._state
        self.window.push(heuristic, delta_f, elapsed, accepted, abs(best))
        self._state = self.window.vector()
        self.buffer.add(prev, heuristic, self.scale.normalize(r), self._state)

    def end_epoch(self, rng):
        loss = None
        for _ in range(self.train_steps):
            out = self.agent.train_step(self.buffer, self.batch_size, rng)
            loss = out if out is not None else loss
        if loss is not None:
            self.losses.append(loss)
        return loss
