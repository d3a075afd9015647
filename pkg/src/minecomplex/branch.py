"""Block-sampling (branching) policies for extraction-period moves.

* ``nn_nb``: one shared MLP scores every block independently; softmax over blocks.
* ``cnn_nb``: a 3D convolution over the feature grid regresses a central
  block; probability is an isotropic Gaussian in grid distance to it,
  truncated at three standard deviations and normalized.
* ``gnn_nb``: graph convolutions over the 6-neighbour block graph emit one
  logit per block; softmax over blocks.

Policies are trained with a clipped-surrogate policy-gradient step on
(distribution snapshot, sampled block, reward) records.
"""

from dataclasses import dataclass

import numpy as np

from . import neuro
from .blockmodel import grid_edges, normalized_coords
from .flowsheet import MiningComplex, Solution
from .perturb import SamplingDistribution

KINDS = ("uniform", "nn_nb", "cnn_nb", "gnn_nb")


class BlockFeatures:
    """Per-block inputs with normalization frozen at construction.

    Columns: tonnage, grade mean, grade std, x, y, z, extraction period
    (-1 when unmined), one-hot destination of the block's mean-grade bin in
    its extraction period.
    """

    def __init__(self, problem: MiningComplex):
        m = problem.model
        self.problem = problem
        gmean = m.grade.mean(axis=1)
        gstd = m.grade.std(axis=1)
        gscale = max(float(gmean.max()), 1e-12)
        static = np.column_stack([m.tonnage / m.tonnage.max(), gmean / gscale, gstd / gscale,
                                  normalized_coords(m)])
        self.static = static
        self.mean_bin = np.minimum((gmean / problem.bin_width).astype(np.int64), problem.n_bins - 1)
        self.n_dest = len(problem.destinations)
        self.width = static.shape[1] + 1 + self.n_dest

    def __call__(self, sol: Solution):
        T = self.problem.n_periods
        period = sol.period
        mined = period >= 0
        cur = np.where(mined, period / max(T - 1, 1), -1.0)
        onehot = np.zeros((len(period), self.n_dest))
        rows = np.flatnonzero(mined)
        onehot[rows, sol.destination[period[rows], self.mean_bin[rows]]] = 1.0
        return np.column_stack([self.static, cur, onehot])


class UniformPolicy:
    kind = "uniform"
    net = None

    def __init__(self, n_blocks):
        self.n = n_blocks

    def probabilities(self, x):
        return np.full(self.n, 1.0 / self.n)


class _LogitPolicy:
    """Shared machinery for policies ending in a softmax over blocks."""

    def probabilities(self, x):
        return self.net.forward(x, self.graph)

    def backward_probs(self, g):
        """Backprop d(loss)/d(probs) of the last forward call."""
        self.net.backward(g)
        return self.net.grads


class NNPolicy(_LogitPolicy):
    kind = "nn_nb"

    def __init__(self, n_features, hidden=(64, 64), seed=0):
        rng = np.random.default_rng(seed)
        sizes = [n_features, *hidden, 1]
        self.net = neuro.mlp(sizes, rng)
        self.net.layers += [neuro.Flatten(), neuro.SoftmaxHead(axis=0)]
        self.graph = None


class GNNPolicy(_LogitPolicy):
    kind = "gnn_nb"

    def __init__(self, n_features, graph: neuro.Graph, width=32, rounds=3, seed=0):
        rng = np.random.default_rng(seed)
        layers = []
        fan_in = n_features
        for _ in range(rounds):
            layers += [neuro.GraphConv(fan_in, width, rng), neuro.ReLU()]
            fan_in = width
        layers += [neuro.Dense(fan_in, 1, rng), neuro.Flatten(), neuro.SoftmaxHead(axis=0)]
        self.net = neuro.Sequential(layers)
        self.graph = graph


class CNNPolicy:
    kind = "cnn_nb"

    def __init__(self, n_features, dims, kernels=8, kernel_size=3, std=2.0, seed=0):
        rng = np.random.default_rng(seed)
        self.dims = tuple(dims)
        n = int(np.prod(self.dims))
        self.net = neuro.Sequential([
            neuro.Conv3d(n_features, kernels, kernel_size, rng), neuro.ReLU(), neuro.Flatten(),
            neuro.Dense(kernels * n, 3, rng), neuro.Sigmoid(),
        ])
        self.std = float(std)
        nx, ny, nz = self.dims
        idx = np.arange(n)
        self.coords = np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1).astype(float)
        self.span = np.array(self.dims, dtype=float) - 1.0
        self._last = None

    def grid(self, x):
        """(n_blocks, F) block features -> (F, nx, ny, nz) grid."""
        nx, ny, nz = self.dims
        return x.T.reshape(-1, nz, ny, nx).transpose(0, 3, 2, 1)

    def center(self, x):
        return self.net.forward(self.grid(x)) * self.span

    def kernel(self, center):
        d2 = np.sum((self.coords - center) ** 2, axis=1)
        k = np.exp(-0.5 * d2 / self.std ** 2)
        k[d2 > (3.0 * self.std) ** 2] = 0.0
        if not k.sum() > 0:
            # center sits farther than the cutoff from every block
            k = np.exp(-0.5 * (d2 - d2.min()) / self.std ** 2)
        return k / k.sum()

    def probabilities(self, x):
        c = self.center(x)
        p = self.kernel(c)
        self._last = (c, p)
        return p

    def backward_probs(self, g):
        c, p = self._last
        diff = (self.coords - c) / self.std ** 2            # d log k_b / d c
        dlogp = diff - p @ diff                              # (n, 3)
        g_center = (g * p) @ dlogp
        self.net.backward(g_center * self.span)
        return self.net.grads


def make_policy(kind, problem: MiningComplex, seed=0, **kw):
    feats = BlockFeatures(problem)
    n = problem.model.n_blocks
    if kind == "uniform":
        return UniformPolicy(n), feats
    if kind == "nn_nb":
        return NNPolicy(feats.width, kw.get("hidden", (64, 64)), seed), feats
    if kind == "cnn_nb":
        return CNNPolicy(feats.width, problem.model.dims, kw.get("kernels", 8), 3,
                         kw.get("std", 2.0), seed), feats
    if kind == "gnn_nb":
        graph = neuro.Graph.from_edges(n, grid_edges(problem.model.dims))
        return GNNPolicy(feats.width, graph, kw.get("width", 32), kw.get("rounds", 3), seed), feats
    raise ValueError(f"unknown branching policy {kind!r}")


def sample_distribution(policy, features) -> SamplingDistribution:
    p = policy.probabilities(features)
    return SamplingDistribution.from_weights(p)


@dataclass
class Record:
    snapshot: int
    block: int
    old_prob: float
    reward: float


class ClippedTrainer:
    """Clipped-surrogate policy-gradient updates for a branching policy."""

    def __init__(self, policy, lr=1e-2, clip=0.2, baseline_decay=0.9, entropy_coef=0.0):
        self.policy = policy
        self.optimizer = neuro.Adam(lr)
        self.clip = clip
        self.entropy_coef = entropy_coef
        self.baseline = 0.0
        self.baseline_decay = baseline_decay
        self.updates = 0

    def advantages(self, rewards):
        return np.asarray(rewards, dtype=float) - self.baseline

    def train_episode(self, records, snapshots, fresh=None):
        """One optimizer step on the surrogate; returns its value or None if skipped.

        ``fresh`` is an optional ``(snapshot id, probabilities)`` pair from the
        policy's most recent forward pass with the current parameters; that
        snapshot is processed first and its forward pass is not repeated.
        """
        if not records:
            return None
        adv = self.advantages([r.reward for r in records])
        mean_r = float(np.mean([r.reward for r in records]))
        self.baseline = self.baseline_decay * self.baseline + (1 - self.baseline_decay) * mean_r
        if not np.any(adv):
            return None
        n = len(records)
        total = None
        objective = 0.0
        by_snap = {}
        for rec, a in zip(records, adv):
            by_snap.setdefault(rec.snapshot, []).append((rec, a))
        order = sorted(by_snap)
        if fresh is not None and fresh[0] in by_snap:
            order.remove(fresh[0])
            order.insert(0, fresh[0])
        for n_done, sid in enumerate(order):
            if n_done == 0 and fresh is not None and fresh[0] == sid:
                p = fresh[1]
            else:
                p = self.policy.probabilities(snapshots[sid])
            g = np.zeros_like(p)
            if self.entropy_coef:
                # constant bonus on the entropy of this snapshot's distribution,
                # weighted by its share of the records
                w = self.entropy_coef * len(by_snap[sid]) / n
                pos = p > 0
                logp = np.log(p[pos])
                objective -= w * float(np.sum(p[pos] * logp))
                g[pos] += w * (logp + 1.0)
            for rec, a in by_snap[sid]:
                ratio = p[rec.block] / rec.old_prob
                clipped = np.clip(ratio, 1 - self.clip, 1 + self.clip)
                objective += min(ratio * a, clipped * a) / n
                if ratio * a <= clipped * a:
                    # unclipped branch active; maximize ratio * A
                    g[rec.block] -= a / (rec.old_prob * n)
            grads = self.policy.backward_probs(g)
            if total is None:
                total = [gr.copy() for gr in grads]
            else:
                for t, gr in zip(total, grads):
                    t += gr
        self.optimizer.step(self.policy.net.params, total)
        self.updates += 1
        return objective


class UniformSampler:
    name = "uniform"

    def __init__(self, n_blocks):
        self.dist = SamplingDistribution.uniform(n_blocks)

    def distribution(self, sol, iteration):
        return self.dist

    def record(self, block, reward_value):
        pass

    def end_epoch(self, rng):
        return None


class PolicySampler:
    """Serves a policy's distribution to the solver and trains between epochs.

    The distribution is recomputed every ``refresh`` iterations; its input
    snapshot is kept so the update re-evaluates probabilities on the same
    features the block was drawn from.
    """

    def __init__(self, policy, features, refresh=100, lr=1e-2, clip=0.2, reward_scale=None,
                 entropy_coef=0.0):
        self.policy = policy
        self.features = features
        self.refresh = refresh
        self.trainer = ClippedTrainer(policy, lr, clip, entropy_coef=entropy_coef)
        self.name = policy.kind
        self.dist = None
        self.snapshots = {}
        self.records = []
        self._sid = -1
        self._last_refresh = None
        self._fresh = None
        self.scale = reward_scale

    def distribution(self, sol, iteration):
        if self.dist is None or iteration - self._last_refresh >= self.refresh:
            x = self.features(sol)
            self._sid += 1
            self.snapshots[self._sid] = x
            p = self.policy.probabilities(x)
            self.dist = SamplingDistribution.from_weights(p)
            self._fresh = (self._sid, p)
            self._last_refresh = iteration
        return self.dist

    def record(self, block, reward_value):
        if self.scale is not None:
            self.scale.update(reward_value)
            reward_value = self.scale.normalize(reward_value)
        self.records.append(Record(self._sid, int(block),
                                   float(self.dist.probabilities[block]), float(reward_value)))

    def end_epoch(self, rng):
        out = self.trainer.train_episode(self.records, self.snapshots, self._fresh)
        self._fresh = None
        self.records = []
        self.snapshots = {self._sid: self.snapshots[self._sid]} if self._sid in self.snapshots else {}
        if out is not None:
            self.dist = None   # parameters changed: refresh on next request
        return out
