import math

import numpy as np
import pytest

from minecomplex.anneal import (AnnealSchedule, accept_probability, calibrate_temperature,
                                initial_solution, run)
from minecomplex.blockmodel import make_block_model
from minecomplex.branch import UniformSampler
from minecomplex.flowsheet import NOT_MINED, EconomicTerms, FlowNode, Flowsheet, MiningComplex
from minecomplex.guide import UniformSelector
from minecomplex.market import constant_paths

from oracle import tiny_problem


def simple_problem(dims, grade, mine_cap=None, T=3, tonnage=100.0):
    n = int(np.prod(dims))
    model = make_block_model(dims, np.full(n, tonnage), np.asarray(grade, dtype=float).reshape(n, -1),
                             0.5, "1-point")
    fs = Flowsheet([FlowNode("pit", "mine", capacity=mine_cap),
                    FlowNode("mill", "processor", recovery=0.9, processing_cost=1.0),
                    FlowNode("dump", "sink", sells=False), FlowNode("market", "sink")],
                   [("pit", "mill"), ("pit", "dump"), ("mill", "market")])
    econ = EconomicTerms(constant_paths(3.0, T), mining_cost=1.0, conversion=10.0,
                         penalty_up={"pit": 50.0})
    return MiningComplex(model, fs, econ, T, n_bins=2)


def baseline_run(problem, sol, seed=0, **kw):
    schedule = AnnealSchedule(**kw)
    return run(problem, sol, UniformSelector(3), UniformSampler(problem.model.n_blocks), schedule, seed=seed)


def test_accept_probability_examples():
    assert accept_probability(5.0, 0.3) == 1.0
    assert accept_probability(0.0, 2.0) == 1.0
    assert accept_probability(-2.0, 2.0) == pytest.approx(0.36787944117144233, rel=1e-15)
    with pytest.raises(ValueError):
        accept_probability(-1.0, 0.0)


def test_schedule_validation():
    for kw in (dict(temp0=0.0), dict(cooling=0.0), dict(cooling=1.5), dict(epoch_len=0)):
        with pytest.raises(ValueError):
            AnnealSchedule(**kw).validate()


def test_initial_solution_single_block():
    problem = simple_problem((1, 1, 1), [2.0])
    sol = initial_solution(problem)
    assert sol.period.tolist() == [0]


def test_initial_solution_all_waste():
    problem = simple_problem((2, 2, 2), np.zeros(8))
    sol = initial_solution(problem)
    assert np.all(sol.period == NOT_MINED)
    assert problem.evaluate(sol).total == 0.0


def test_initial_solution_capacity_column():
    problem = simple_problem((1, 1, 3), [2.0, 2.0, 2.0], mine_cap=100.0)
    assert initial_solution(problem).period.tolist() == [0, 1, 2]


def test_initial_solution_is_feasible_on_random_instances():
    for seed in range(5):
        problem, _ = tiny_problem(seed, dims=(4, 3, 3), T=4)
        problem.check(initial_solution(problem))


def test_run_is_deterministic_and_monotone():
    problem, _ = tiny_problem(1, dims=(4, 3, 3), T=4)
    start = initial_solution(problem)
    a = baseline_run(problem, start, seed=3, max_iters=1500)
    b = baseline_run(problem, start, seed=3, max_iters=1500)
    assert a.trace.deterministic_view() == b.trace.deterministic_view()
    assert a.best.digest() == b.best.digest()
    best = a.trace.column("best_so_far")
    assert np.all(np.diff(best) >= 0)
    assert a.best_breakdown.total == pytest.approx(problem.evaluate(a.best).total, rel=1e-9)
    assert a.best_breakdown.total >= problem.evaluate(start).total
    problem.check(a.best)


def test_improvements_always_accepted():
    problem, _ = tiny_problem(2, dims=(4, 3, 3), T=4)
    r = baseline_run(problem, initial_solution(problem), seed=1, max_iters=2000)
    df = r.trace.column("delta_f")
    acc = r.trace.column("accepted").astype(bool)
    assert np.all(acc[df > 0])
    assert np.all(acc[df == 0])


def test_zero_temperature_rejects_deteriorations():
    problem, _ = tiny_problem(3, dims=(4, 3, 3), T=4)
    r = baseline_run(problem, initial_solution(problem), seed=2, max_iters=10_000,
                     temp0=1e-300, cooling=1.0)
    df = r.trace.column("delta_f")
    acc = r.trace.column("accepted").astype(bool)
    assert np.sum(df < 0) > 1000
    assert not np.any(acc & (df < 0))


def test_audit_mode_and_wall_budget():
    problem, _ = tiny_problem(4, dims=(3, 3, 2), T=3)
    r = run(problem, initial_solution(problem), UniformSelector(3), UniformSampler(problem.model.n_blocks),
            AnnealSchedule(max_iters=500), seed=0, audit=True)
    assert r.iterations == 500
    r = baseline_run(problem, initial_solution(problem), max_iters=10 ** 9, max_wall_time=0.3)
    assert 0 < r.iterations < 10 ** 9 and r.wall_time < 5.0


def test_calibrated_temperature_accepts_median_loss_half_the_time():
    problem, _ = tiny_problem(5, dims=(4, 3, 3), T=4)
    sol = initial_solution(problem)
    cur = problem.evaluate(sol)
    temp = calibrate_temperature(problem, sol, cur, UniformSampler(problem.model.n_blocks),
                                 np.random.default_rng(0), AnnealSchedule())
    assert temp > 0
    assert sol.digest() == initial_solution(problem).digest()   # warmup leaves no trace


def test_cooling_is_geometric_per_epoch():
    problem, _ = tiny_problem(6, dims=(3, 3, 2), T=3)
    r = baseline_run(problem, initial_solution(problem), max_iters=350, temp0=10.0, cooling=0.5,
                     epoch_len=100)
    temp = r.trace.column("temp")
    assert temp[0] == 10.0 and temp[99] == 10.0 and temp[100] == 5.0 and temp[300] == 1.25
    assert len(r.trace.epochs) == 3


def test_trace_csv(tmp_path):
    problem, _ = tiny_problem(0, dims=(3, 3, 2), T=3)
    r = baseline_run(problem, initial_solution(problem), max_iters=120)
    r.trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[:7] == ["iter", "heuristic", "delta_f", "elapsed_s", "accepted",
                                       "best_so_far", "temp"]
    assert len(lines) == 121
    r.trace.write_epochs_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().startswith("epoch,")
    assert sum(r.trace.kind_counts().values()) == 120


def acceptance_buckets(trace, temp, edges):
    """(expected, observed, binomial SE) per delta_f bucket of deteriorations."""
    df = trace.column("delta_f")
    acc = trace.column("accepted").astype(float)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (df < 0) & (-df >= lo) & (-df < hi)
        if m.sum() < 30:
            continue
        p = np.exp(df[m] / temp)
        out.append((p.mean(), acc[m].mean(), math.sqrt(np.sum(p * (1 - p))) / m.sum()))
    return out


@pytest.mark.parametrize("scale", [0.5, 2.0])
def test_empirical_acceptance_matches_rule(scale):
    problem, _ = tiny_problem(7, dims=(4, 3, 3), T=4)
    sol = initial_solution(problem)
    cur = problem.evaluate(sol)
    t0 = calibrate_temperature(problem, sol, cur, UniformSampler(problem.model.n_blocks),
                               np.random.default_rng(1), AnnealSchedule())
    temp = scale * t0
    r = baseline_run(problem, sol, seed=9, max_iters=10_000, temp0=temp, cooling=1.0)
    buckets = acceptance_buckets(r.trace, temp, temp * np.array([0, 0.25, 0.5, 1, 2, 4]))
    assert len(buckets) >= 3
    for expected, observed, se in buckets:
        assert abs(observed - expected) <= 3 * se + 1e-12
