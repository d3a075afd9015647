import csv
import json

import numpy as np
import pytest

from minecomplex import serialize
from minecomplex.bench import cli, harness
from minecomplex.bench.config import ConfigError, ExperimentConfig, preset
from minecomplex.flowsheet import Solution
from minecomplex.market import COPPER, GOLD


def small_config(policy="baseline", seed=0, iters=400):
    cfg = preset("copper")
    cfg.instance.dims = (4, 4, 3)
    cfg.instance.n_supply = 3
    cfg.instance.n_price = 5
    cfg.instance.n_periods = 4
    cfg.instance.tonnage = 60000.0
    cfg.schedule.max_iters = iters
    cfg.schedule.warmup = 50
    cfg.budget_seconds = 600.0
    cfg.policy = policy
    cfg.seed = seed
    return cfg


@pytest.fixture(scope="module")
def instance(tmp_path_factory):
    d = tmp_path_factory.mktemp("inst")
    cfg = small_config()
    manifest = harness.generate(cfg, d)
    return cfg, d, manifest


def test_config_round_trip(tmp_path):
    for name in ("copper", "gold"):
        cfg = preset(name)
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg
        assert back.dumps() == cfg.dumps()


def test_presets_use_table_parameters():
    c = preset("copper")
    assert c.price_model.kind == "mrj"
    assert c.build_price_params() == COPPER
    assert c.price_model.params["alpha"] == 0.5 and c.price_model.params["s_bar"] == 2.78
    g = preset("gold")
    assert g.price_model.kind == "gbmj"
    assert g.build_price_params() == GOLD
    assert g.price_model.params["s0"] == 1548.6
    with pytest.raises(ConfigError):
        preset("silver")


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg = preset("copper")
    cfg.policy = "magic"
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = preset("copper")
    cfg.price_model.params["alpha"] = -1.0
    with pytest.raises(ConfigError):
        cfg.validate()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_baseline_builds_no_networks(instance):
    cfg, d, _ = instance
    model, prices, _ = harness.load_instance(cfg, d)
    problem = harness.build_problem(cfg, model, prices)
    selector, sampler = harness.make_components(cfg, problem, 0)
    assert selector.name == "uniform" and sampler.name == "uniform"
    assert not hasattr(sampler, "policy") and not hasattr(selector, "agent")
    cfg2 = small_config("gnn-nb")
    selector, sampler = harness.make_components(cfg2, problem, 0)
    assert sampler.name == "gnn_nb" and selector.name == "uniform"
    cfg2.selector = "guide"
    selector, _ = harness.make_components(cfg2, problem, 0)
    assert hasattr(selector, "agent")
    assert harness.method_name(cfg2) == "gnn-nb+guide"


def test_generate_is_deterministic(instance, tmp_path):
    cfg, _, manifest = instance
    again = harness.generate(small_config(), tmp_path / "again")
    assert again["files"] == manifest["files"]
    assert harness.instance_hash(again) == harness.instance_hash(manifest)


def test_generate_refuses_overwrite(instance):
    cfg, d, _ = instance
    with pytest.raises(ConfigError):
        harness.generate(cfg, d)
    assert harness.generate(cfg, d, force=True)["files"]


def test_solve_rejects_tampered_instance(instance, tmp_path):
    cfg, d, _ = instance
    copy = tmp_path / "inst"
    harness.generate(cfg, copy)
    text = (copy / "prices.json").read_text()
    (copy / "prices.json").write_text(text.replace("2.", "3.", 1))
    with pytest.raises(ConfigError, match="hash mismatch"):
        harness.solve(cfg, copy, tmp_path / "run", figures=False)
    other = small_config()
    other.instance.price_seed = 99
    with pytest.raises(ConfigError, match="different instance"):
        harness.solve(other, d, tmp_path / "run2", figures=False)


@pytest.fixture(scope="module")
def solved(instance, tmp_path_factory):
    cfg, d, _ = instance
    out = tmp_path_factory.mktemp("runs")
    runs = {}
    for name, policy, seed in (("base0", "baseline", 0), ("base0b", "baseline", 0),
                               ("base1", "baseline", 1), ("gnn0", "gnn-nb", 0)):
        runs[name] = (out / name, harness.solve(small_config(policy, seed), d, out / name,
                                                figures=name == "base0"))
    return runs


def test_solve_writes_artifacts(solved):
    path, (header, body) = solved["base0"]
    for name in ("report.json", "trace.csv", "epochs.csv", "breakdown.csv", "solution.json",
                 "config.json", "progress.png", "npv.png"):
        assert (path / name).exists(), name
    assert header["config"]["policy"] == "baseline"
    assert set(header["versions"]) >= {"minecomplex", "numpy", "python"}
    assert body["timing"]["iterations"] == 400
    with open(path / "trace.csv") as fh:
        assert len(list(csv.reader(fh))) == 401


def test_report_series_nonincreasing_suboptimality(solved):
    for path, (header, body) in solved.values():
        s = body["series"]
        sub = np.array(s["suboptimality"])
        assert len(sub) >= 1 and s["iteration"][0] == 0
        assert np.all(np.diff(sub) <= 0)
        assert sub[-1] == 0.0
        assert np.all(np.diff(s["iteration"]) > 0)
        assert body["final_objective"] >= body["initial_objective"]
        q = body["npv_quantiles"]
        assert q["P10"] <= q["P50"] <= q["P90"]


def test_seeded_runs_are_byte_identical_without_timing(solved):
    a = harness.load_report(solved["base0"][0])
    b = harness.load_report(solved["base0b"][0])
    c = harness.load_report(solved["base1"][0])
    assert harness.reproducible_view(*a) == harness.reproducible_view(*b)
    assert harness.reproducible_view(*a) != harness.reproducible_view(*c)


def test_emitted_solution_passes_validators(instance, solved):
    cfg, d, _ = instance
    for path, (header, body) in solved.values():
        run_cfg = ExperimentConfig.from_dict(header["config"])
        problem = harness.validate_solution_file(run_cfg, d, path / "solution.json")
        _, sol = serialize.read_document(path / "solution.json", "solution")
        total = problem.evaluate(Solution.from_dict(sol)).total
        assert total == pytest.approx(body["final_objective"], rel=1e-9)


def test_compare_with_itself_gives_unit_ratios(solved):
    rep = harness.load_report(solved["base0"][0])
    result = harness.compare([rep], figures=False)
    row = result["methods"][0]
    for thr in harness.THRESHOLDS:
        assert row[f"ratio@{thr:g}"] == 1.0
    assert row["final_ratio"] == 1.0
    assert result["runs"][0]["final_suboptimality"] == 0.0


def test_compare_thresholds_and_unreached():
    def report(method, seed, iters, values):
        header = {"instance_hash": "h", "method": method, "seed": seed, "config": {}}
        body = {"final_objective": values[-1],
                "series": {"iteration": iters, "best": values},
                "timing": {"series_wall_s": [i / 100 for i in iters], "iterations": iters[-1]},
                "npv_quantiles": {"P10": 1.0, "P50": 2.0, "P90": 3.0}}
        return header, body

    reps = [report("baseline", 0, [0, 10, 50], [50.0, 85.0, 96.0]),
            report("gnn-nb", 0, [0, 5, 20], [50.0, 92.0, 100.0])]
    res = harness.compare(reps, figures=False)
    assert res["reference_objective"] == 100.0
    base, gnn = res["methods"]
    assert base["iter@0.1"] == 50.0 and base["iter@0.05"] == 50.0
    assert base["iter@0.01"] == harness.UNREACHED
    assert gnn["iter@0.1"] == 5.0 and gnn["iter@0.05"] == 20.0 and gnn["iter@0.01"] == 20.0
    assert gnn["ratio@0.1"] == 10.0 and gnn["ratio@0.05"] == 2.5
    assert gnn["ratio@0.01"] == harness.UNREACHED
    assert gnn["wall@0.05"] == 0.2
    with pytest.raises(ConfigError):
        harness.compare([reps[0], ({**reps[1][0], "instance_hash": "other"}, reps[1][1])])


def test_median_of_runs_with_unreached():
    assert harness._median_or_unreached([1.0, 3.0, 5.0]) == 3.0
    assert harness._median_or_unreached([1.0, None, None]) == harness.UNREACHED
    assert harness._median_or_unreached([1.0, 2.0, None]) == 2.0


def test_compare_writes_outputs(solved, tmp_path):
    reps = [harness.load_report(solved[k][0]) for k in ("base0", "base1", "gnn0")]
    res = harness.compare(reps, tmp_path / "cmp")
    for name in ("comparison.csv", "runs.csv", "comparison.json", "suboptimality.png"):
        assert (tmp_path / "cmp" / name).exists()
    assert [r["method"] for r in res["methods"]] == ["baseline", "gnn-nb"]
    text = harness.format_table(res)
    assert "baseline" in text and "gnn-nb" in text
    with pytest.raises(ConfigError):
        harness.compare(reps, tmp_path / "cmp")


def test_cli_exit_codes(tmp_path, capsys):
    cfg = small_config()
    cfg.save(tmp_path / "cfg.json")
    inst = str(tmp_path / "inst")
    assert cli.main(["generate", "--config", str(tmp_path / "cfg.json"), "--out", inst]) == 0
    assert cli.main(["generate", "--config", str(tmp_path / "cfg.json"), "--out", inst]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "cfg.json"), "--instance", inst,
                     "--out", str(tmp_path / "run"), "--max-iters", "100", "--no-figures"]) == 0
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json"), "--instance", inst]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"policy": "nope"}))
    assert cli.main(["solve", "--config", str(tmp_path / "bad.json"), "--instance", inst]) == 2
    assert cli.main(["compare", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "reference objective" in out
    with pytest.raises(SystemExit) as e:
        cli.main(["solve", "--policy", "bogus"])
    assert e.value.code == 2


def test_selfcheck_passes():
    results = harness.selfcheck()
    assert results and all(ok for _, ok, _ in results)
    assert cli.main(["selfcheck"]) == 0
