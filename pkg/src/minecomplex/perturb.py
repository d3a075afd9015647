"""Low-level heuristics: extraction-period, destination and stream moves.

Every generator returns a :class:`Perturbation` describing the change
against a specific solution version; :func:`apply` and :func:`undo` mutate
the solution and keep the version counter consistent so stale evaluations
can be detected.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flowsheet import NOT_MINED, MiningComplex, Solution

EXTRACTION = "extraction_shift"
DESTINATION = "destination_change"
STREAM = "stream_change"
KINDS = (EXTRACTION, DESTINATION, STREAM)


class VersionMismatchError(RuntimeError):
    pass


class SamplingDistribution:
    """Per-block sampling weights with a cached CDF for O(log n) draws."""

    def __init__(self, probabilities, check=True):
        p = np.asarray(probabilities, dtype=float)
        if check:
            if p.ndim != 1 or p.size == 0:
                raise ValueError("sampling distribution must be a nonempty vector")
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ValueError("sampling weights must be finite and nonnegative")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"sampling weights sum to {p.sum()!r}, not 1")
        self.probabilities = p
        self.cdf = np.cumsum(p)

    @classmethod
    def uniform(cls, n):
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def from_weights(cls, w):
        """Normalize nonnegative weights; all-zero weights fall back to uniform."""
        w = np.maximum(np.asarray(w, dtype=float), 0.0)
        total = w.sum()
        if not total > 0 or not np.isfinite(total):
            return cls.uniform(len(w))
        p = w / total
        return cls(p / p.sum())

    def __len__(self):
        return len(self.probabilities)

    def sample(self, rng) -> int:
        u = rng.random() * self.cdf[-1]
        return min(int(np.searchsorted(self.cdf, u, side="right")), len(self.cdf) - 1)


@dataclass
class Perturbation:
    kind: str
    base_version: int
    moves: list = field(default_factory=list)   # extraction: (block, old, new) public periods
    cell: Optional[tuple] = None                # destination: (bin, period, old, new)
    stream: Optional[tuple] = None              # stream: (node, period, old_vec, new_vec)
    block: int = -1                             # block drawn from the sampling distribution
    applied_version: int = 0
    applied: bool = False
    noop: bool = False

    @property
    def is_noop(self):
        return self.noop

    @property
    def period(self):
        if self.cell is not None:
            return self.cell[1]
        if self.stream is not None:
            return self.stream[1]
        return min((p for _, a, b in self.moves for p in (a, b) if p >= 0), default=-1)

    @property
    def work(self):
        """Rough size of the change, used by the modeled clock."""
        return max(len(self.moves), 1)


def _noop(kind, sol, block=-1):
    return Perturbation(kind, sol.version, block=block, noop=True)


def cascade(problem: MiningComplex, period, block, new_rank):
    """Minimal-change repair after moving ``block`` to ``new_rank``.

    Moving earlier drags every predecessor that is later than the new rank up
    to it; moving later pushes every successor that is earlier down to it.
    Ranks treat NOT_MINED as period T. Returns {block: new_rank}.
    """
    T = problem.n_periods
    rank = lambda b: T if period[b] < 0 else int(period[b])
    old = rank(block)
    changed = {block: new_rank}
    stack = [block]
    if new_rank < old:
        links = problem.pred_lists
        violates = lambda r: r > new_rank
    else:
        links = problem.succ_lists
        violates = lambda r: r < new_rank
    while stack:
        u = stack.pop()
        for v in links[u]:
            if v not in changed and violates(rank(v)):
                changed[v] = new_rank
                stack.append(v)
    return changed


def perturb_extraction(problem: MiningComplex, sol: Solution, dist: SamplingDistribution,
                       rng, direction=None) -> Perturbation:
    """Shift one sampled block by +-1 period and repair slope precedence.

    NOT_MINED sits just after the last period, so shifting the last period
    later un-mines a block and shifting an unmined block earlier mines it in
    the final period.
    """
    T = problem.n_periods
    b = dist.sample(rng)
    step = direction if direction is not None else (1 if rng.random() < 0.5 else -1)
    r = T if sol.period[b] < 0 else int(sol.period[b])
    new = r + step
    if not 0 <= new <= T:
        new = r - step
    if not 0 <= new <= T or new == r:
        return _noop(EXTRACTION, sol, b)
    changed = cascade(problem, sol.period, b, new)
    public = lambda x: NOT_MINED if x >= T else x
    moves = [(v, int(sol.period[v]), public(nr)) for v, nr in sorted(changed.items())]
    return Perturbation(EXTRACTION, sol.version, moves=moves, block=b)


def perturb_destination(problem: MiningComplex, sol: Solution, rng) -> Perturbation:
    """Re-route one (grade bin, period) cell, i.e. a whole group of similar blocks."""
    n_dest = len(problem.destinations)
    if n_dest < 2:
        return _noop(DESTINATION, sol)
    k = int(rng.integers(problem.n_bins))
    t = int(rng.integers(problem.n_periods))
    old = int(sol.destination[t, k])
    r = int(rng.integers(n_dest - 1))
    new = r if r < old else r + 1
    return Perturbation(DESTINATION, sol.version, cell=(k, t, old, new))


def renormalized(vec, arc, value):
    """Set ``vec[arc] = value`` (clamped to [0, 1]) and rescale the siblings."""
    out = np.array(vec, dtype=float)
    v = min(max(float(value), 0.0), 1.0)
    rest = 1.0 - v
    others = np.ones(len(out), dtype=bool)
    others[arc] = False
    total = out[others].sum()
    if total > 0:
        out[others] = out[others] * (rest / total)
    else:
        out[others] = rest / others.sum()
    out[arc] = v
    return out


def perturb_stream(problem: MiningComplex, sol: Solution, rng, step_sigma=0.1,
                   noise=None) -> Perturbation:
    """Add Gaussian noise to one stream variable and keep the simplex."""
    nodes = problem.flowsheet.splitters
    if not nodes:
        return _noop(STREAM, sol)
    node = nodes[int(rng.integers(len(nodes)))]
    t = int(rng.integers(problem.n_periods))
    old = sol.streams[node][t].copy()
    if len(old) < 2:
        return _noop(STREAM, sol)
    arc = int(rng.integers(len(old)))
    eps = rng.normal(0.0, step_sigma) if noise is None else float(noise)
    new = renormalized(old, arc, old[arc] + eps)
    return Perturbation(STREAM, sol.version, stream=(node, t, old, new))


def apply(sol: Solution, p: Perturbation):
    if p.applied or sol.version != p.base_version:
        raise VersionMismatchError("perturbation was generated against another solution state")
    if p.kind == EXTRACTION:
        for b, _, new in p.moves:
            sol.period[b] = new
    elif p.kind == DESTINATION and p.cell is not None:
        k, t, _, new = p.cell
        sol.destination[t, k] = new
    elif p.kind == STREAM and p.stream is not None:
        node, t, _, new = p.stream
        sol.streams[node][t] = new
    sol.version = Solution.fresh_version()
    p.applied_version = sol.version
    p.applied = True


def undo(sol: Solution, p: Perturbation):
    if not p.applied or sol.version != p.applied_version:
        raise VersionMismatchError("undo of a perturbation that is not the last one applied")
    if p.kind == EXTRACTION:
        for b, old, _ in p.moves:
            sol.period[b] = old
    elif p.kind == DESTINATION and p.cell is not None:
        k, t, old, _ = p.cell
        sol.destination[t, k] = old
    elif p.kind == STREAM and p.stream is not None:
        node, t, old, _ = p.stream
        sol.streams[node][t] = old
    sol.version = p.base_version
    p.applied = False
