import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minecomplex.market import (COPPER, GOLD, GBMJ, MRJ, GbmjParams, MrjParams, PricePathSet,
                                constant_paths, draw_shocks, export_csv, gbmj_step, load_paths,
                                mrj_step, path_quantiles, save_paths, simulate_gbmj, simulate_mrj)


def test_copper_and_gold_presets():
    assert (COPPER.s0, COPPER.s_bar, COPPER.alpha, COPPER.sigma, COPPER.jump_freq, COPPER.jump_size) \
        == (2.78, 2.78, 0.5, 0.09, 1.0, 0.03)
    assert (GOLD.s0, GOLD.eta, GOLD.sigma, GOLD.jump_freq, GOLD.jump_size) \
        == (1548.6, 0.001, 0.05, 1.0, 0.005)


def test_mrj_fixed_point_and_half_reversion():
    assert mrj_step(2.78, COPPER) == pytest.approx(2.78, abs=1e-15)
    assert mrj_step(2.00, COPPER) == pytest.approx(2.39, abs=1e-12)


def test_gbmj_identity_and_drift():
    flat = GbmjParams(s0=10.0, eta=0.0, sigma=0.0, jump_freq=0.0, jump_size=0.0)
    assert gbmj_step(10.0, flat) == 10.0
    paths = simulate_gbmj(flat, 5, 3, seed=0).paths
    np.testing.assert_array_equal(paths, 10.0)
    det = replace(GOLD, sigma=0.0, jump_freq=0.0)
    s1 = simulate_gbmj(det, 1, 1, seed=0).paths[0, 0]
    assert s1 == pytest.approx(1548.6 * math.exp(0.001), rel=1e-14)
    assert s1 == pytest.approx(1550.149, abs=5e-4)


def test_table_rows_run_and_frozen_values():
    cu = simulate_mrj(COPPER, 3, 2, 11)
    au = simulate_gbmj(GOLD, 3, 2, 11)
    assert cu.model_tag == MRJ and au.model_tag == GBMJ
    np.testing.assert_allclose(cu.paths, [[2.7885550303667466, 3.125533291103787, 3.391044229594325],
                                          [3.236858886549632, 2.9616814252400774, 2.870850059568958]],
                               rtol=1e-12)
    np.testing.assert_allclose(au.paths, [[1550.8620464516878, 1659.5530387509207, 1772.7541714203355],
                                          [1637.875598393064, 1682.2404034695453, 1721.5267890513353]],
                               rtol=1e-12)


def test_scalar_reference_matches_vectorized():
    sim = simulate_mrj(COPPER, 6, 4, 3)
    w, p, j = draw_shocks(3, 4, 6, COPPER.sigma, COPPER.jump_freq)
    for k in range(4):
        s = COPPER.s0
        for t in range(6):
            s = max(s + 0.5 * (2.78 - s) + w[k, t] * s + 0.03 * p[k, t] * j[k, t] * s, 2.78e-6)
            assert sim.paths[k, t] == pytest.approx(s, rel=1e-13)


def test_determinism_and_path_streams():
    a = simulate_mrj(COPPER, 10, 20, 5)
    assert a == simulate_mrj(COPPER, 10, 20, 5)
    assert not np.array_equal(a.paths, simulate_mrj(COPPER, 10, 20, 6).paths)
    # each path has its own stream: asking for more paths leaves earlier ones unchanged
    np.testing.assert_array_equal(simulate_mrj(COPPER, 10, 5, 5).paths, a.paths[:5])


@pytest.mark.parametrize("bad", [dict(s0=0.0), dict(s_bar=-1.0), dict(alpha=1.5), dict(sigma=-0.1),
                                 dict(jump_freq=-1.0)])
def test_invalid_mrj_params(bad):
    with pytest.raises(ValueError):
        simulate_mrj(replace(COPPER, **bad), 5, 2, 0)


def test_invalid_counts():
    with pytest.raises(ValueError):
        simulate_gbmj(GOLD, 0, 2, 0)
    with pytest.raises(ValueError):
        simulate_gbmj(replace(GOLD, s0=-1.0), 3, 2, 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 0.8), st.floats(0.0, 5.0), st.floats(0.0, 0.5),
       st.integers(0, 2 ** 31))
def test_prices_strictly_positive(alpha, sigma, mu, beta, seed):
    mrj = MrjParams(2.78, 2.0, alpha, sigma, mu, beta)
    gbm = GbmjParams(100.0, 0.01, sigma, mu, beta)
    assert np.all(simulate_mrj(mrj, 12, 8, seed).paths > 0)
    assert np.all(simulate_gbmj(gbm, 12, 8, seed).paths > 0)


def test_mean_reversion_statistics():
    params = replace(COPPER, s0=2.0, jump_freq=0.0)
    paths = simulate_mrj(params, 15, 5000, 1).paths
    assert abs(paths[:, 9:].mean(axis=0) / 2.78 - 1).max() < 0.02


def test_gbm_moment_statistics():
    params = replace(GOLD, jump_freq=0.0)
    rel = simulate_gbmj(params, 15, 5000, 2).paths / params.s0
    t = np.arange(1, 16)
    se = rel.std(axis=0, ddof=1) / np.sqrt(rel.shape[0])
    assert np.all(np.abs(rel.mean(axis=0) - np.exp(params.eta * t)) <= 3 * se)


def test_jump_frequency():
    _, p, j = draw_shocks(9, 10_000, 10, 0.09, 1.0)
    assert p.size == 100_000
    assert abs(p.mean() - 1.0) < 0.05
    assert set(np.unique(j)) == {-1.0, 1.0}


def test_path_quantiles():
    assert path_quantiles(constant_paths(5.0, 3, 4), 1, [0.1, 0.5, 0.9]) == [5.0, 5.0, 5.0]
    five = PricePathSet(np.arange(1.0, 6.0)[:, None], "test", 0, {})
    assert path_quantiles(five, 0, [0.5]) == [3.0]
    q = path_quantiles(simulate_mrj(COPPER, 5, 1000, 0), 4, [0.1, 0.5, 0.9])
    assert q[0] <= q[1] <= q[2]
    with pytest.raises(IndexError):
        path_quantiles(five, 1, [0.5])
    with pytest.raises(ValueError):
        path_quantiles(five, 0, [1.0])


def test_round_trip_and_csv(tmp_path):
    a = simulate_gbmj(GOLD, 4, 3, 8)
    h = save_paths(a, tmp_path / "p.json")
    b = load_paths(tmp_path / "p.json")
    assert a == b
    assert save_paths(b, tmp_path / "q.json") == h
    export_csv(a, tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "path,period,price" and len(rows) == 13
    assert float(rows[1].split(",")[2]) == a.paths[0, 0]


def test_integral_floats_stay_floats(tmp_path):
    from minecomplex import serialize
    serialize.write_document(tmp_path / "d.json", "probe", {"a": 3.0, "b": 3, "c": -0.0}, [1e20, 2.5])
    header, body = serialize.read_document(tmp_path / "d.json", "probe")
    assert type(header["a"]) is float and type(header["b"]) is int
    assert body == [1e20, 2.5]
