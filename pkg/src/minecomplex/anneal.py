"""Simulated-annealing hyper-heuristic over the perturbation pool."""

import csv
import math
import time
from array import array
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import perturb
from .flowsheet import NOT_MINED, MiningComplex, ObjectiveBreakdown, Solution
from .guide import reward

HEURISTICS = (perturb.EXTRACTION, perturb.DESTINATION, perturb.STREAM)


class RestoreError(RuntimeError):
    pass


def accept_probability(delta_f, temp):
    """Metropolis rule for maximization: 1 for improvements, exp(delta_f / temp) otherwise."""
    if not temp > 0:
        raise ValueError("temperature must be positive")
    if delta_f > 0:
        return 1.0
    return math.exp(delta_f / temp)


@dataclass
class AnnealSchedule:
    temp0: Optional[float] = None   # None: calibrate on a warmup
    cooling: float = 0.95
    epoch_len: int = 100
    max_iters: int = 10_000
    max_wall_time: float = math.inf
    warmup: int = 200
    step_sigma: float = 0.1

    def validate(self):
        if self.temp0 is not None and not self.temp0 > 0:
            raise ValueError("temp0 must be positive")
        if not 0 < self.cooling <= 1:
            raise ValueError("cooling must lie in (0, 1]")
        if self.epoch_len < 1:
            raise ValueError("epoch_len must be >= 1")


class TraceLog:
    """Columnar per-iteration record of the search."""

    columns = ("iter", "heuristic", "delta_f", "elapsed_s", "accepted", "best_so_far",
               "temp", "block", "current", "wall_s")
    timing = ("wall_s",)

    def __init__(self):
        self.iter = array("q")
        self.heuristic = array("b")
        self.delta_f = array("d")
        self.elapsed_s = array("d")
        self.accepted = array("b")
        self.best_so_far = array("d")
        self.temp = array("d")
        self.block = array("q")
        self.current = array("d")
        self.wall_s = array("d")
        self.epochs = []   # per-epoch training stats

    def append(self, it, h, df, elapsed, accepted, best, temp, block, current, wall):
        self.iter.append(it)
        self.heuristic.append(h)
        self.delta_f.append(df)
        self.elapsed_s.append(elapsed)
        self.accepted.append(1 if accepted else 0)
        self.best_so_far.append(best)
        self.temp.append(temp)
        self.block.append(block)
        self.current.append(current)
        self.wall_s.append(wall)

    def __len__(self):
        return len(self.iter)

    def column(self, name):
        return np.asarray(getattr(self, name))

    def deterministic_view(self):
        return {c: self.column(c).tolist() for c in self.columns if c not in self.timing}

    def kind_counts(self):
        counts = np.bincount(self.column("heuristic"), minlength=len(HEURISTICS))
        return {k: int(c) for k, c in zip(HEURISTICS, counts)}

    def write_csv(self, path, include_timing=True):
        cols = [c for c in self.columns if include_timing or c not in self.timing]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            data = [getattr(self, c) for c in cols]
            for row in zip(*data):
                w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])

    def write_epochs_csv(self, path):
        keys = ["epoch", "iter", "temp", "guide_loss", "branch_objective"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for e in self.epochs:
                w.writerow([e.get(k, "") for k in keys])


@dataclass
class RunResult:
    best: Solution
    best_breakdown: ObjectiveBreakdown
    final: Solution
    trace: TraceLog
    temp0: float
    iterations: int
    wall_time: float
    stats: dict = field(default_factory=dict)


# --- initial solution ----------------------------------------------------

def unit_values(problem: MiningComplex, grade):
    """Expected value of one tonne at each mine destination, for a given grade.

    Splitters are read as uniform splits; stockpiled material is credited
    one period later.
    """
    fs = problem.flowsheet
    price = float(problem.price.mean())
    conv = problem.econ.conversion
    disc1 = 1.0 / (1.0 + problem.econ.discount_rate)

    def value(i, g):
        n = fs.nodes[i]
        if n.kind == "sink":
            return g * conv * price if n.sells else 0.0
        outs = fs.out[i]
        if not outs:
            return -n.processing_cost
        if n.kind == "processor":
            g = g * n.recovery
        v = sum(value(j, g) for j in outs) / len(outs)
        if n.kind == "stockpile":
            v *= disc1
        return v - n.processing_cost

    return np.array([value(d, grade) for d in problem.destinations])


def initial_solution(problem: MiningComplex) -> Solution:
    """Greedy feasible start.

    Destinations: per grade bin, the destination with the best unit value.
    Blocks: positive-value blocks (with their overlying cones) are kept when
    the cone pays for itself, then scheduled level by level into the earliest
    period that respects precedence and mining capacity.
    """
    T, K = problem.n_periods, problem.n_bins
    sol = problem.empty_solution()
    mids = (np.arange(K) + 0.5) * problem.bin_width
    table = np.array([unit_values(problem, g) for g in mids])       # (K, D)
    best_dest = np.argmax(table, axis=1)
    sol.destination[:] = best_dest[None, :]
    # unit values are affine in grade; price each block at its own grades
    base = unit_values(problem, 0.0)
    slope = unit_values(problem, 1.0) - base
    dest = best_dest[problem.bin_index]                              # (n, S)
    per_tonne = slope[dest] * problem.model.grade + base[dest]
    ton = problem.tonnage
    value = ton * per_tonne.mean(axis=1) - problem.econ.mining_cost * ton

    selected = np.zeros(problem.model.n_blocks, dtype=bool)
    for b in np.argsort(-value, kind="stable"):
        if value[b] <= 0:
            break
        if selected[b]:
            continue
        cone, stack = {int(b)}, [int(b)]
        while stack:
            u = stack.pop()
            for p in problem.pred_lists[u]:
                if not selected[p] and p not in cone:
                    cone.add(p)
                    stack.append(p)
        cone = sorted(cone)
        if value[cone].sum() > 0:
            selected[cone] = True

    cap = problem.flowsheet.nodes[problem.mine].capacity
    cap = math.inf if cap is None else cap
    used = np.zeros(T)
    z = problem.model.coords()[:, 2]
    order = sorted(np.flatnonzero(selected), key=lambda b: (z[b], -value[b], b))
    for b in order:
        preds = problem.pred_lists[b]
        if any(sol.period[p] == NOT_MINED for p in preds):
            continue
        t = max((int(sol.period[p]) for p in preds), default=0)
        while t < T and used[t] > 0 and used[t] + ton[b] > cap:
            t += 1
        if t < T:
            sol.period[b] = t
            used[t] += ton[b]
    problem.check(sol)
    return sol


# --- main loop -----------------------------------------------------------

def modeled_time(p: perturb.Perturbation, problem: MiningComplex):
    """Deterministic stand-in for heuristic run time (seconds)."""
    periods = problem.n_periods - max(p.period, 0) if not p.noop else 0
    return 2e-5 + 2e-6 * p.work * problem.n_supply + 5e-6 * periods


def _generate(problem, sol, h, sampler, rng, it, schedule):
    if h == 0:
        dist = sampler.distribution(sol, it)
        return perturb.perturb_extraction(problem, sol, dist, rng)
    if h == 1:
        return perturb.perturb_destination(problem, sol, rng)
    return perturb.perturb_stream(problem, sol, rng, schedule.step_sigma)


def calibrate_temperature(problem, sol, cur, sampler, rng, schedule):
    """Temperature at which the median deterioration is accepted with p = 0.5."""
    losses = []
    for it in range(schedule.warmup):
        h = int(rng.integers(len(HEURISTICS)))
        p = _generate(problem, sol, h, sampler, rng, it, schedule)
        perturb.apply(sol, p)
        new = problem.evaluate_delta(cur, p, sol)
        perturb.undo(sol, p)
        if new.total < cur.total:
            losses.append(cur.total - new.total)
    if losses:
        return float(np.median(losses)) / math.log(2.0)
    return max(abs(cur.total) * 1e-3, 1.0)


def run(problem: MiningComplex, initial: Solution, selector, sampler, schedule: AnnealSchedule,
        seed=0, clock="modeled", audit=False, progress_cb=None) -> RunResult:
    """Anneal from ``initial``; returns the best solution found.

    ``clock`` picks the time used in rewards: "wall" measures each heuristic,
    "modeled" uses a deterministic work estimate so seeded runs repeat
    exactly. ``audit`` re-validates feasibility and restore exactness on
    every iteration.
    """
    schedule.validate()
    rng = np.random.default_rng(seed)
    sol = initial.copy()
    cur = problem.evaluate(sol)
    temp = schedule.temp0
    if temp is None:
        temp = calibrate_temperature(problem, sol, cur, sampler, rng, schedule)
        cur = problem.evaluate(sol)
    temp0 = temp
    best_total = cur.total
    best_sol, best_b = sol.copy(), cur
    trace = TraceLog()
    start = time.perf_counter()
    it = 0
    while it < schedule.max_iters:
        wall = time.perf_counter() - start
        if wall >= schedule.max_wall_time:
            break
        progress = max(it / schedule.max_iters,
                       wall / schedule.max_wall_time if math.isfinite(schedule.max_wall_time) else 0.0)
        h, _ = selector.select(rng, progress)
        before = sol.digest() if audit else None
        t0 = time.perf_counter()
        p = _generate(problem, sol, h, sampler, rng, it, schedule)
        perturb.apply(sol, p)
        new = problem.evaluate_delta(cur, p, sol)
        df = new.total - cur.total
        accepted = df > 0 or (df == 0 or rng.random() < accept_probability(df, temp))
        if accepted:
            cur = new
        else:
            perturb.undo(sol, p)
            if audit and sol.digest() != before:
                raise RestoreError(f"iteration {it}: rejected move did not restore the solution")
        t1 = time.perf_counter()
        elapsed = (t1 - t0) if clock == "wall" else modeled_time(p, problem)
        elapsed = max(elapsed, 1e-9)
        if audit:
            problem.check(sol)
        if cur.total > best_total:
            best_total = cur.total
            best_sol, best_b = sol.copy(), cur
        trace.append(it, h, df, elapsed, accepted, best_total, temp, p.block, cur.total, t1 - start)
        selector.observe(h, df, elapsed, accepted, best_total)
        if h == 0 and not p.noop:
            sampler.record(p.block, reward(df, elapsed))
        it += 1
        if it % schedule.epoch_len == 0:
            temp *= schedule.cooling
            stats = {"epoch": it // schedule.epoch_len, "iter": it, "temp": temp,
                     "guide_loss": selector.end_epoch(rng), "branch_objective": sampler.end_epoch(rng)}
            trace.epochs.append(stats)
            cur = problem.evaluate(sol)   # resync incremental totals
            if progress_cb is not None:
                progress_cb(it, best_total)
    wall = time.perf_counter() - start
    problem.check(best_sol)
    return RunResult(best_sol, best_b, sol, trace, temp0, it, wall,
                     {"kind_counts": trace.kind_counts(),
                      "accept_rate": float(np.mean(trace.column("accepted"))) if len(trace) else 0.0})
