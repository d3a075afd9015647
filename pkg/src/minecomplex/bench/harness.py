"""Generate instances, run the solver, and compare run reports."""

import csv
import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from .. import anneal, branch, guide, serialize
from ..blockmodel import SupplyScenarioSpec, generate_block_model, load_block_model, save_block_model
from ..flowsheet import InfeasibleSolutionError, MiningComplex, Solution, npv_quantiles
from ..market import load_paths, save_paths, simulate_gbmj, simulate_mrj
from .config import ConfigError, ExperimentConfig

THRESHOLDS = (0.10, 0.05, 0.01)
QUANTILES = (0.1, 0.5, 0.9)
UNREACHED = "unreached"
INSTANCE_FILES = ("block_model.json", "prices.json")
POLICY_KINDS = {"baseline": "uniform", "nn-nb": "nn_nb", "cnn-nb": "cnn_nb", "gnn-nb": "gnn_nb"}


class HarnessError(RuntimeError):
    """Fault during a run (exit code 3)."""


def versions():
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"minecomplex": pkg, "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])), "platform": platform.machine()}


def _prepare_dir(out, force, names):
    out = Path(out)
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise ConfigError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- generate ------------------------------------------------------------

def build_instance(cfg: ExperimentConfig):
    inst = cfg.instance
    spec = SupplyScenarioSpec(inst.n_supply, inst.mean_grade, inst.variance, inst.correlation_range,
                              inst.ore_threshold, inst.supply_seed)
    model = generate_block_model(inst.dims, spec, tonnage=inst.tonnage, slope=inst.slope)
    params = cfg.build_price_params()
    sim = simulate_mrj if cfg.price_model.kind == "mrj" else simulate_gbmj
    prices = sim(params, inst.n_periods, inst.n_price, inst.price_seed)
    return model, prices


def generate(cfg: ExperimentConfig, out, force=False):
    """Write block model, price paths and a manifest; returns the manifest."""
    cfg.validate()
    out = _prepare_dir(out, force, INSTANCE_FILES + ("manifest.json", "config.json"))
    model, prices = build_instance(cfg)
    key = cfg.instance_key()
    hashes = {
        "block_model.json": save_block_model(model, out / "block_model.json", {"instance_key": key}),
        "prices.json": save_paths(prices, out / "prices.json"),
    }
    manifest = {"instance_key": key, "files": hashes, "versions": versions()}
    serialize.write_document(out / "manifest.json", "manifest", {"config": cfg.to_dict()}, manifest)
    cfg.save(out / "config.json")
    return manifest


def instance_hash(manifest):
    files = manifest["files"]
    return hashlib.sha256("".join(files[n] for n in INSTANCE_FILES).encode()).hexdigest()


def load_instance(cfg: ExperimentConfig, instance_dir):
    d = Path(instance_dir)
    try:
        _, manifest = serialize.read_document(d / "manifest.json", "manifest")
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read instance manifest in {d}: {e}") from e
    for name in INSTANCE_FILES:
        p = d / name
        if not p.exists():
            raise ConfigError(f"instance file {p} is missing")
        if serialize.file_hash(p) != manifest["files"][name]:
            raise ConfigError(f"hash mismatch for {p}; regenerate the instance")
    if json.dumps(manifest["instance_key"], sort_keys=True) != json.dumps(cfg.instance_key(), sort_keys=True):
        raise ConfigError("instance files were generated from a different instance config")
    return load_block_model(d / "block_model.json"), load_paths(d / "prices.json"), manifest


def build_problem(cfg: ExperimentConfig, model, prices) -> MiningComplex:
    try:
        return MiningComplex(model, cfg.build_flowsheet(), cfg.build_economics(prices),
                             cfg.instance.n_periods, cfg.instance.n_bins)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def make_components(cfg: ExperimentConfig, problem: MiningComplex, seed):
    """Heuristic selector and block sampler for the configured method."""
    lc = cfg.learning
    n_h = len(anneal.HEURISTICS)
    if cfg.selector_kind() == "guide":
        selector = guide.GuideSelector(n_h, lr=lc.guide_lr, gamma=lc.guide_gamma,
                                       sigma_start=lc.sigma_start, sigma_end=lc.sigma_end, seed=seed)
    else:
        selector = guide.UniformSelector(n_h)
    kind = POLICY_KINDS[cfg.policy]
    if kind == "uniform":
        sampler = branch.UniformSampler(problem.model.n_blocks)
    else:
        policy, feats = branch.make_policy(kind, problem, seed)
        sampler = branch.PolicySampler(policy, feats, lc.refresh, lc.branch_lr, lc.clip,
                                       reward_scale=guide.RunningScale(),
                                       entropy_coef=lc.entropy)
    return selector, sampler


# --- solve ---------------------------------------------------------------

def best_series(trace, initial):
    """Change points of the best-so-far objective: (iteration, value, wall seconds)."""
    best = trace.column("best_so_far")
    if not len(best):
        return [0], [initial], [0.0]
    wall = trace.column("wall_s")
    prev = np.concatenate([[initial], best[:-1]])
    idx = np.flatnonzero(best != prev)
    iters = [0] + (idx + 1).tolist()
    values = [initial] + best[idx].tolist()
    walls = [0.0] + wall[idx].tolist()
    return iters, values, walls


def suboptimality(values, reference):
    v = np.asarray(values, dtype=float)
    return ((reference - v) / max(abs(reference), 1e-300)).tolist()


def solve(cfg: ExperimentConfig, instance_dir, out, force=False, audit=False, figures=True,
          progress_cb=None):
    """Run the configured method on a generated instance and write its report."""
    cfg.validate()
    outputs = ("report.json", "trace.csv", "epochs.csv", "breakdown.csv", "solution.json",
               "config.json")
    out = _prepare_dir(out, force, outputs)
    model, prices, manifest = load_instance(cfg, instance_dir)
    problem = build_problem(cfg, model, prices)
    selector, sampler = make_components(cfg, problem, cfg.seed)
    s = cfg.schedule
    schedule = anneal.AnnealSchedule(s.temp0, s.cooling, s.epoch_len, s.max_iters,
                                     cfg.budget_seconds, s.warmup, s.step_sigma)
    try:
        start = anneal.initial_solution(problem)
        initial = problem.evaluate(start).total
        result = anneal.run(problem, start, selector, sampler, schedule, seed=cfg.seed,
                            clock=cfg.clock, audit=audit, progress_cb=progress_cb)
        problem.check(result.best)
    except (InfeasibleSolutionError, anneal.RestoreError) as e:
        raise HarnessError(str(e)) from e

    b = result.best_breakdown
    iters, values, walls = best_series(result.trace, initial)
    final = values[-1]
    q = npv_quantiles(b, QUANTILES)
    header = {"config": cfg.to_dict(), "instance_hash": instance_hash(manifest),
              "method": method_name(cfg), "seed": cfg.seed, "versions": versions()}
    body = {
        "initial_objective": initial,
        "final_objective": final,
        "series": {"iteration": iters, "best": values, "suboptimality": suboptimality(values, final)},
        "final_breakdown": {"total": b.total, "revenue_term": b.revenue_term,
                            "penalty_term": b.penalty_term, "npv_mean": float(np.mean(b.npv)),
                            "npv_std": float(np.std(b.npv))},
        "npv_quantiles": {"P10": q[0], "P50": q[1], "P90": q[2]},
        "stats": {"temp0": result.temp0, "kind_counts": result.stats["kind_counts"],
                  "accept_rate": result.stats["accept_rate"],
                  "mined_blocks": int(np.sum(result.best.period >= 0)),
                  "policy_kind": POLICY_KINDS[cfg.policy], "selector": cfg.selector_kind()},
        # wall-clock dependent; excluded from reproducibility comparisons
        "timing": {"iterations": result.iterations, "wall_time_s": result.wall_time,
                   "series_wall_s": walls},
    }
    serialize.write_document(out / "report.json", "run_report", header, body)
    serialize.write_document(out / "solution.json", "solution",
                             {"config": cfg.to_dict(), "instance_hash": header["instance_hash"]},
                             result.best.to_dict())
    cfg.save(out / "config.json")
    if cfg.write_trace:
        result.trace.write_csv(out / "trace.csv")
    result.trace.write_epochs_csv(out / "epochs.csv")
    problem.export_breakdown_csv(b, out / "breakdown.csv")
    if figures:
        from . import plotting
        plotting.solve_figures(header, body, b.npv, out)
    return header, body


def method_name(cfg: ExperimentConfig):
    name = cfg.policy
    if cfg.selector != "uniform":
        name += "+" + cfg.selector
    return name


def load_report(path):
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        return serialize.read_document(p, "run_report")
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read report {p}: {e}") from e


def reproducible_view(header, body):
    """Report content with wall-clock fields removed."""
    body = {k: v for k, v in body.items() if k != "timing"}
    return serialize.dumps({"header": header, "body": body})


def validate_solution_file(cfg: ExperimentConfig, instance_dir, path):
    model, prices, _ = load_instance(cfg, instance_dir)
    problem = build_problem(cfg, model, prices)
    _, body = serialize.read_document(path, "solution")
    problem.check(Solution.from_dict(body))
    return problem


# --- compare -------------------------------------------------------------

def first_reaching(iters, values, walls, reference, threshold):
    sub = np.asarray(suboptimality(values, reference))
    hit = np.flatnonzero(sub <= threshold + 1e-12)
    if not len(hit):
        return None, None
    k = int(hit[0])
    return iters[k], walls[k]


def compare(reports, out=None, force=False, figures=True):
    """Per-method iterations and wall time to each threshold, plus NPV quantiles.

    ``reports`` is a list of (header, body) pairs. Runs of the same method
    are summarized by medians; a method whose median run never reaches a
    threshold is marked unreached.
    """
    if not reports:
        raise ConfigError("compare needs at least one report")
    hashes = {h["instance_hash"] for h, _ in reports}
    if len(hashes) != 1:
        raise ConfigError("reports come from different instances; refusing to compare")
    reference = max(b["final_objective"] for _, b in reports)
    runs = []
    for h, b in reports:
        s = b["series"]
        walls = b["timing"]["series_wall_s"]
        row = {"method": h["method"], "seed": h["seed"], "final": b["final_objective"],
               "final_suboptimality": suboptimality([b["final_objective"]], reference)[0]}
        for thr in THRESHOLDS:
            it, wall = first_reaching(s["iteration"], s["best"], walls, reference, thr)
            row[f"iter@{thr:g}"] = it
            row[f"wall@{thr:g}"] = wall
        row.update(b["npv_quantiles"])
        runs.append(row)

    methods = list(dict.fromkeys(r["method"] for r in runs))
    table = []
    for m in methods:
        group = [r for r in runs if r["method"] == m]
        row = {"method": m, "runs": len(group),
               "final_median": float(np.median([r["final"] for r in group]))}
        for thr in THRESHOLDS:
            for key in (f"iter@{thr:g}", f"wall@{thr:g}"):
                row[key] = _median_or_unreached([r[key] for r in group])
        for p in ("P10", "P50", "P90"):
            row[p] = float(np.median([r[p] for r in group]))
        table.append(row)

    ref = next((r for r in table if r["method"] == "baseline"), table[0])
    for row in table:
        for thr in THRESHOLDS:
            key = f"iter@{thr:g}"
            a, b = ref[key], row[key]
            if a == UNREACHED or b == UNREACHED:
                row[f"ratio@{thr:g}"] = UNREACHED
            else:
                row[f"ratio@{thr:g}"] = (a / b) if b > 0 else (1.0 if a == b else math.inf)
        row["final_ratio"] = row["final_median"] / ref["final_median"] if ref["final_median"] else 1.0
    result = {"instance_hash": hashes.pop(), "reference_objective": reference,
              "reference_method": ref["method"], "methods": table, "runs": runs}
    if out is not None:
        out = _prepare_dir(out, force, ("comparison.csv", "runs.csv", "comparison.json"))
        _write_rows(out / "comparison.csv", table)
        _write_rows(out / "runs.csv", runs)
        serialize.write_document(out / "comparison.json", "comparison",
                                 {"configs": [h["config"] for h, _ in reports]},
                                 _jsonable(result))
        if figures:
            from . import plotting
            plotting.compare_figure(reports, reference, out)
    return result


def _median_or_unreached(values):
    if any(v is None for v in values):
        reached = [v for v in values if v is not None]
        # the median run is unreached once half or more of the runs are
        if len(reached) * 2 <= len(values):
            return UNREACHED
        values = reached + [math.inf] * (len(values) - len(reached))
    return float(np.median(values))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else format(v, ".10g") if isinstance(v, float) else v)
                        for k, v in r.items()})


def format_table(result):
    cols = ["method", "runs", "final_median"]
    for thr in THRESHOLDS:
        cols += [f"iter@{thr:g}", f"ratio@{thr:g}"]
    cols += ["P10", "P50", "P90"]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) < 1e5 else f"{v:.4e}"
        return str(v)

    rows = [[cell(r[c]) for c in cols] for r in result["methods"]]
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    lines = [f"reference objective {result['reference_objective']:.6e} "
             f"(best final over all runs); ratios relative to {result['reference_method']}",
             "  ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


# --- selfcheck -----------------------------------------------------------

def selfcheck(seed=0):
    """Quick internal consistency checks; returns a list of (name, ok, detail)."""
    from .. import neuro, perturb
    from ..blockmodel import make_block_model
    from ..flowsheet import EconomicTerms, FlowNode, Flowsheet
    from ..market import PricePathSet

    results = []
    rng = np.random.default_rng(seed)

    # delta evaluation against full recompute on a small random instance
    n = 8
    model = make_block_model((2, 2, 2), rng.uniform(500, 1500, n), rng.uniform(0, 2, (n, 2)), 0.5)
    fs = Flowsheet([FlowNode("pit", "mine", capacity=3000.0),
                    FlowNode("stock", "stockpile", capacity=800.0),
                    FlowNode("mill", "processor", capacity=1500.0, recovery=0.9, processing_cost=3.0),
                    FlowNode("dump", "sink", sells=False), FlowNode("market", "sink")],
                   [("pit", "dump"), ("pit", "stock"), ("pit", "mill"), ("stock", "mill"),
                    ("mill", "market")])
    prices = PricePathSet(rng.uniform(1, 4, (2, 3)), "selfcheck", seed, {})
    econ = EconomicTerms(prices, 0.1, 1.0, 3.0, {"pit": 2.0, "mill": 3.0, "stock": 1.0})
    problem = MiningComplex(model, fs, econ, 3, 3)
    sol = anneal.initial_solution(problem)
    worst = 0.0
    dist = perturb.SamplingDistribution.uniform(n)
    for k in range(300):
        cur = problem.evaluate(sol)
        h = k % 3
        if h == 0:
            p = perturb.perturb_extraction(problem, sol, dist, rng)
        elif h == 1:
            p = perturb.perturb_destination(problem, sol, rng)
        else:
            p = perturb.perturb_stream(problem, sol, rng, 0.3)
        perturb.apply(sol, p)
        fast = problem.evaluate_delta(cur, p, sol).total
        full = problem.evaluate(sol).total
        worst = max(worst, abs(fast - full) / max(abs(full), 1e-12))
        problem.check(sol)
    results.append(("delta evaluation", worst < 1e-9, f"max rel err {worst:.2e}"))

    # gradient check on a small graph network
    g = neuro.Graph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    net = neuro.Sequential([neuro.GraphConv(3, 4, rng), neuro.ReLU(), neuro.Dense(4, 1, rng),
                            neuro.Flatten(), neuro.SoftmaxHead(axis=0)])
    err = neuro.gradient_check(net, rng.normal(size=(5, 3)), g)
    results.append(("gradient check", err < 1e-4, f"max rel err {err:.2e}"))

    # sampling distributions sum to one
    w = rng.random(100)
    d = perturb.SamplingDistribution.from_weights(w)
    s = abs(float(d.probabilities.sum()) - 1.0)
    results.append(("sampling distribution", s < 1e-12, f"|sum - 1| = {s:.1e}"))
    return results
