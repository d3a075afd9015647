"""Commodity price scenarios.

Two reduced-form models, one step per scheduling period:

* mean-reverting with Poisson jumps (copper)::

      S_t = S_{t-1} + alpha (S_bar - S_{t-1}) + W S_{t-1} + beta P J S_{t-1}

* trending geometric Brownian motion with Poisson jumps (gold)::

      S_t = S_{t-1} exp(eta - sigma^2 / 2 + W + beta P J)

``W ~ N(0, sigma)``, ``P ~ Poisson(jump_freq)`` and ``J = +-1`` with equal
probability. Each path draws from its own stream seeded by ``(seed, path)``.
"""

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import serialize

MRJ = "mean_reverting_jump"
GBMJ = "gbm_jump"
FLOOR_FRACTION = 1e-6


@dataclass(frozen=True)
class MrjParams:
    s0: float
    s_bar: float
    alpha: float
    sigma: float
    jump_freq: float
    jump_size: float

    def validate(self):
        if not (self.s0 > 0 and self.s_bar > 0):
            raise ValueError("s0 and s_bar must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.sigma < 0 or self.jump_freq < 0:
            raise ValueError("sigma and jump_freq must be nonnegative")


@dataclass(frozen=True)
class GbmjParams:
    s0: float
    eta: float
    sigma: float
    jump_freq: float
    jump_size: float

    def validate(self):
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if self.sigma < 0 or self.jump_freq < 0:
            raise ValueError("sigma and jump_freq must be nonnegative")


# Table 1 calibrations
COPPER = MrjParams(s0=2.78, s_bar=2.78, alpha=0.5, sigma=0.09, jump_freq=1.0, jump_size=0.03)
GOLD = GbmjParams(s0=1548.6, eta=0.001, sigma=0.05, jump_freq=1.0, jump_size=0.005)


@dataclass(frozen=True, eq=False)
class PricePathSet:
    paths: np.ndarray      # (n_paths, n_periods)
    model_tag: str
    seed: int
    params: dict
    floor: float = 0.0

    @property
    def n_paths(self):
        return int(self.paths.shape[0])

    @property
    def n_periods(self):
        return int(self.paths.shape[1])

    def scaled(self, factor):
        return PricePathSet(self.paths * factor, self.model_tag, self.seed, self.params, self.floor)

    def __eq__(self, other):
        if not isinstance(other, PricePathSet):
            return NotImplemented
        return (self.model_tag == other.model_tag and self.seed == other.seed
                and np.array_equal(self.paths, other.paths))

    __hash__ = None


def draw_shocks(seed, n_paths, n_periods, sigma, jump_freq):
    """Per-path (W, P, J) draws from independent streams."""
    w = np.empty((n_paths, n_periods))
    p = np.empty((n_paths, n_periods))
    j = np.empty((n_paths, n_periods))
    for k in range(n_paths):
        rng = np.random.default_rng([seed, k])
        w[k] = rng.normal(0.0, sigma, n_periods) if sigma > 0 else 0.0
        p[k] = rng.poisson(jump_freq, n_periods)
        j[k] = rng.choice((-1.0, 1.0), n_periods)
    return w, p, j


def _check_counts(n_periods, n_paths):
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")


def mrj_step(prev, params: MrjParams, w=0.0, p=0.0, j=1.0):
    return prev + params.alpha * (params.s_bar - prev) + w * prev + params.jump_size * p * j * prev


def gbmj_step(prev, params: GbmjParams, w=0.0, p=0.0, j=1.0):
    return prev * np.exp(params.eta - 0.5 * params.sigma ** 2 + w + params.jump_size * p * j)


def simulate_mrj(params: MrjParams, n_periods, n_paths, seed) -> PricePathSet:
    params.validate()
    _check_counts(n_periods, n_paths)
    floor = FLOOR_FRACTION * params.s0
    w, p, j = draw_shocks(seed, n_paths, n_periods, params.sigma, params.jump_freq)
    out = np.empty((n_paths, n_periods))
    prev = np.full(n_paths, float(params.s0))
    for t in range(n_periods):
        prev = np.maximum(mrj_step(prev, params, w[:, t], p[:, t], j[:, t]), floor)
        out[:, t] = prev
    return PricePathSet(out, MRJ, int(seed), asdict(params), floor)


def simulate_gbmj(params: GbmjParams, n_periods, n_paths, seed) -> PricePathSet:
    params.validate()
    _check_counts(n_periods, n_paths)
    w, p, j = draw_shocks(seed, n_paths, n_periods, params.sigma, params.jump_freq)
    log_growth = params.eta - 0.5 * params.sigma ** 2 + w + params.jump_size * p * j
    out = params.s0 * np.exp(np.cumsum(log_growth, axis=1))
    return PricePathSet(out, GBMJ, int(seed), asdict(params), 0.0)


def constant_paths(price, n_periods, n_paths=1) -> PricePathSet:
    """Deterministic price set, handy for hand-checked instances."""
    return PricePathSet(np.full((n_paths, n_periods), float(price)), "constant", 0,
                        {"price": float(price)}, 0.0)


def path_quantiles(paths: PricePathSet, t, q) -> list:
    if paths.n_paths == 0:
        raise ValueError("empty path set")
    if not 0 <= t < paths.n_periods:
        raise IndexError(f"period {t} outside [0, {paths.n_periods})")
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile probabilities must lie in (0, 1)")
    return np.quantile(paths.paths[:, t], q, method="linear").tolist()


def save_paths(paths: PricePathSet, path) -> str:
    header = {"model_tag": paths.model_tag, "seed": paths.seed, "params": paths.params,
              "floor": paths.floor, "n_paths": paths.n_paths, "n_periods": paths.n_periods}
    return serialize.write_document(path, "price_paths", header, paths.paths)


def load_paths(path) -> PricePathSet:
    header, body = serialize.read_document(path, "price_paths")
    arr = np.array(body, dtype=float).reshape(header["n_paths"], header["n_periods"])
    return PricePathSet(arr, header["model_tag"], header["seed"], header["params"], header["floor"])


def export_csv(paths: PricePathSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "period", "price"])
        for k in range(paths.n_paths):
            for t in range(paths.n_periods):
                w.writerow([k, t, format(paths.paths[k, t], ".17g")])
