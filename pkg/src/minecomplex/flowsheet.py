"""Mining-complex material flow and the stochastic NPV objective.

Material leaves the mine through a destination policy, travels along the arcs
of a DAG (stockpiles, processors) and ends at sinks. Mass and metal are the
carried attributes; grade at any node is metal / mass. For every joint
scenario (supply realization, price path) the cash flow per period is
``conversion * metal_sold * price - costs``, discounted at ``(1 + r) ** -t``.
The objective is the scenario-mean NPV minus the scenario-mean penalty on
capacity deviations.

Routing depends only on the supply realization, so flows, costs and
deviations are computed once per supply scenario and combined with every
price path at the end.
"""

import csv
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blockmodel import BlockModel
from .market import PricePathSet

NOT_MINED = -1
NODE_KINDS = ("mine", "stockpile", "processor", "sink")


class InfeasibleSolutionError(ValueError):
    pass


class StaleBreakdownError(RuntimeError):
    pass


@dataclass
class FlowNode:
    name: str
    kind: str
    capacity: Optional[float] = None       # mine: mined t, processor: feed t, stockpile: inventory t
    lower_target: Optional[float] = None   # processors only
    recovery: float = 1.0
    processing_cost: float = 0.0
    sells: bool = True                     # sinks: market (True) or waste dump (False)

    def validate(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"node {self.name!r}: unknown kind {self.kind!r}")
        if self.capacity is not None and not self.capacity > 0:
            raise ValueError(f"node {self.name!r}: capacity must be positive")
        if not 0 <= self.recovery <= 1:
            raise ValueError(f"node {self.name!r}: recovery must lie in [0, 1]")


@dataclass
class Flowsheet:
    nodes: list
    arcs: list  # (from_name, to_name)

    def __post_init__(self):
        self.index = {n.name: i for i, n in enumerate(self.nodes)}
        if len(self.index) != len(self.nodes):
            raise ValueError("duplicate node names")
        for n in self.nodes:
            n.validate()
        self.out = [[] for _ in self.nodes]
        self.inc = [[] for _ in self.nodes]
        for a, b in self.arcs:
            if a not in self.index or b not in self.index:
                raise ValueError(f"arc ({a}, {b}) references an unknown node")
            self.out[self.index[a]].append(self.index[b])
            self.inc[self.index[b]].append(self.index[a])
        self.order = self._topological()
        for i, n in enumerate(self.nodes):
            if n.kind == "sink" and self.out[i]:
                raise ValueError(f"sink {n.name!r} has outgoing arcs")
            if n.kind == "mine" and self.inc[i]:
                raise ValueError(f"mine {n.name!r} has incoming arcs")
            if n.kind == "stockpile" and not self.out[i]:
                raise ValueError(f"stockpile {n.name!r} has no outlet")

    def _topological(self):
        indeg = [len(v) for v in self.inc]
        ready = [i for i, d in enumerate(indeg) if d == 0]
        order = []
        while ready:
            i = ready.pop(0)
            order.append(i)
            for j in self.out[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        if len(order) != len(self.nodes):
            raise ValueError("flowsheet arcs contain a cycle")
        return order

    @property
    def mines(self):
        return [i for i, n in enumerate(self.nodes) if n.kind == "mine"]

    def stream_width(self, i):
        """Length of node i's stream vector; 0 when it does not split."""
        n_out = len(self.out[i])
        if self.nodes[i].kind == "stockpile":
            return n_out + 1  # last entry: fraction kept in inventory
        if self.nodes[i].kind == "mine" or n_out < 2:
            return 0
        return n_out

    @property
    def splitters(self):
        return [i for i in range(len(self.nodes)) if self.stream_width(i)]

    def to_dict(self):
        return {
            "nodes": [{k: getattr(n, k) for k in ("name", "kind", "capacity", "lower_target",
                                                  "recovery", "processing_cost", "sells")}
                      for n in self.nodes],
            "arcs": [list(a) for a in self.arcs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([FlowNode(**n) for n in d["nodes"]], [tuple(a) for a in d["arcs"]])


@dataclass
class EconomicTerms:
    prices: PricePathSet
    discount_rate: float = 0.10
    mining_cost: float = 0.0
    conversion: float = 1.0          # sale units per (tonne * grade unit)
    penalty_up: dict = field(default_factory=dict)    # node name -> currency per tonne
    penalty_down: dict = field(default_factory=dict)
    discount_penalties: bool = True

    def validate(self):
        if self.discount_rate < 0:
            raise ValueError("discount_rate must be >= 0")
        for v in itertools.chain(self.penalty_up.values(), self.penalty_down.values()):
            if v < 0:
                raise ValueError("penalties must be >= 0")


@dataclass
class ScenarioSet:
    """Equiprobable joint scenarios: supply realization x price path.

    Joint index ``s = i * n_price + j`` for supply i and price path j.
    """
    model: BlockModel
    prices: PricePathSet

    @property
    def n_supply(self):
        return self.model.n_scenarios

    @property
    def n_price(self):
        return self.prices.n_paths

    @property
    def n_joint(self):
        return self.n_supply * self.n_price

    def split(self, s):
        return divmod(int(s), self.n_price)


class Solution:
    """Extraction periods, destination policy and stream variables.

    ``period[b]`` is in ``[0, T)`` or NOT_MINED. ``destination[t, k]`` indexes
    the mine's outgoing arcs for grade bin k. ``streams[node]`` is a (T, width)
    array of nonnegative fractions summing to 1 per period.
    """

    _ids = itertools.count(1)

    def __init__(self, period, destination, streams, n_periods):
        self.period = np.asarray(period, dtype=np.int64).copy()
        self.destination = np.asarray(destination, dtype=np.int64).copy()
        self.streams = {int(k): np.asarray(v, dtype=float).copy() for k, v in streams.items()}
        self.n_periods = int(n_periods)
        self.version = next(Solution._ids)

    @staticmethod
    def fresh_version():
        return next(Solution._ids)

    def copy(self):
        return Solution(self.period, self.destination, self.streams, self.n_periods)

    def to_bytes(self):
        parts = [self.period.tobytes(), self.destination.tobytes()]
        for k in sorted(self.streams):
            parts.append(np.int64(k).tobytes())
            parts.append(self.streams[k].tobytes())
        return b"".join(parts)

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_dict(self):
        return {"n_periods": self.n_periods, "period": self.period,
                "destination": self.destination,
                "streams": {str(k): v for k, v in sorted(self.streams.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["period"], d["destination"],
                   {int(k): v for k, v in d["streams"].items()}, d["n_periods"])


@dataclass
class ObjectiveBreakdown:
    total: float
    revenue_term: float
    penalty_term: float
    npv: np.ndarray            # (n_joint,) per joint scenario, s = i * n_price + j
    d_plus: np.ndarray         # (n_nodes, T, n_supply); identical for every price path
    d_minus: np.ndarray
    mass: np.ndarray           # (n_nodes, T, n_supply) inflow mass
    metal: np.ndarray          # (n_nodes, T, n_supply) inflow metal
    inventory: np.ndarray      # (n_nodes, T + 1, n_supply) opening stockpile mass
    inventory_metal: np.ndarray
    cost: np.ndarray           # (T, n_supply) undiscounted mining + processing
    sold_metal: np.ndarray     # (T, n_supply)
    penalty: np.ndarray        # (T, n_supply) discounted penalty cash
    bin_mass: np.ndarray       # (K, T, n_supply) mined mass per grade bin
    bin_metal: np.ndarray
    version: int = 0

    def to_dict(self):
        return {"total": self.total, "revenue_term": self.revenue_term,
                "penalty_term": self.penalty_term, "npv": self.npv,
                "d_plus": self.d_plus, "d_minus": self.d_minus}


class MiningComplex:
    """A fully specified problem instance plus derived lookup arrays."""

    def __init__(self, model: BlockModel, flowsheet: Flowsheet, econ: EconomicTerms,
                 n_periods: int, n_bins: int = 5, scenarios: Optional[ScenarioSet] = None):
        econ.validate()
        if n_periods < 1:
            raise ValueError("n_periods must be >= 1")
        if econ.prices.n_periods < n_periods:
            raise ValueError("price paths shorter than the schedule horizon")
        mines = flowsheet.mines
        if len(mines) != 1:
            raise ValueError("evaluation supports exactly one mine node")
        self.model = model
        self.flowsheet = flowsheet
        self.econ = econ
        self.scenarios = scenarios or ScenarioSet(model, econ.prices)
        self.n_periods = int(n_periods)
        self.n_bins = int(n_bins)
        self.mine = mines[0]
        self.destinations = list(flowsheet.out[self.mine])
        if not self.destinations:
            raise ValueError("mine has no destinations")
        self.n_nodes = len(flowsheet.nodes)

        gmax = float(model.grade.max()) if model.grade.size else 0.0
        self.bin_width = gmax / n_bins if gmax > 0 else 1.0
        self.bin_index = np.minimum((model.grade / self.bin_width).astype(np.int64), n_bins - 1)
        self.tonnage = model.tonnage
        self.metal = model.tonnage[:, None] * model.grade
        self.discount = (1.0 + econ.discount_rate) ** -np.arange(n_periods, dtype=float)
        self.price = np.ascontiguousarray(econ.prices.paths[:, :n_periods].T)  # (T, n_price)

        names = [n.name for n in flowsheet.nodes]
        self.c_up = np.array([econ.penalty_up.get(n, 0.0) for n in names])
        self.c_down = np.array([econ.penalty_down.get(n, 0.0) for n in names])
        for n in itertools.chain(econ.penalty_up, econ.penalty_down):
            if n not in flowsheet.index:
                raise ValueError(f"penalty given for unknown node {n!r}")

        arcs = [(int(p), b) for b in range(model.n_blocks) for p in model.predecessors[b]]
        arr = np.array(arcs, dtype=np.int64).reshape(-1, 2)
        self.arc_pred, self.arc_block = arr[:, 0], arr[:, 1]
        self.pred_lists = [p.tolist() for p in model.predecessors]
        self.succ_lists = [s.tolist() for s in model.successors]
        self.bin_edges = self.bin_width * np.arange(n_bins + 1)

    # -- solution helpers --------------------------------------------------

    @property
    def n_supply(self):
        return self.model.n_scenarios

    def empty_solution(self):
        T = self.n_periods
        streams = {i: np.full((T, w), 1.0 / w) for i in self.flowsheet.splitters
                   for w in [self.flowsheet.stream_width(i)]}
        return Solution(np.full(self.model.n_blocks, NOT_MINED),
                        np.zeros((T, self.n_bins), dtype=np.int64), streams, T)

    def rank(self, period):
        """Periods with NOT_MINED mapped to T, so precedence is rank order."""
        period = np.asarray(period)
        return np.where(period < 0, self.n_periods, period)

    def precedence_violations(self, sol: Solution):
        r = self.rank(sol.period)
        bad = r[self.arc_pred] > r[self.arc_block]
        return np.stack([self.arc_pred[bad], self.arc_block[bad]], axis=1)

    def check(self, sol: Solution):
        """Reserve, precedence, policy and stream validators."""
        T = self.n_periods
        p = sol.period
        if p.shape != (self.model.n_blocks,) or np.any((p < NOT_MINED) | (p >= T)):
            raise InfeasibleSolutionError("extraction periods outside [0, T) or NOT_MINED")
        v = self.precedence_violations(sol)
        if len(v):
            raise InfeasibleSolutionError(f"{len(v)} precedence violations, e.g. pred {v[0][0]} -> block {v[0][1]}")
        d = sol.destination
        if d.shape != (T, self.n_bins) or np.any((d < 0) | (d >= len(self.destinations))):
            raise InfeasibleSolutionError("destination policy out of range")
        for i in self.flowsheet.splitters:
            s = sol.streams.get(i)
            if s is None or s.shape != (T, self.flowsheet.stream_width(i)):
                raise InfeasibleSolutionError(f"missing stream variables for node {i}")
            if np.any(s < 0) or np.any(np.abs(s.sum(axis=1) - 1.0) > 1e-9):
                raise InfeasibleSolutionError(f"stream variables of node {i} leave the simplex")

    def is_feasible(self, sol):
        try:
            self.check(sol)
        except InfeasibleSolutionError:
            return False
        return True

    # -- evaluation ---------------------------------------------------------

    def bin_totals(self, sol: Solution):
        K, T, S = self.n_bins, self.n_periods, self.n_supply
        bm = np.zeros((K, T, S))
        bq = np.zeros((K, T, S))
        mined = np.flatnonzero(sol.period >= 0)
        if len(mined):
            t = np.repeat(sol.period[mined], S)
            s = np.tile(np.arange(S), len(mined))
            k = self.bin_index[mined].ravel()
            np.add.at(bm, (k, t, s), np.repeat(self.tonnage[mined], S))
            np.add.at(bq, (k, t, s), self.metal[mined].ravel())
        return bm, bq

    def evaluate(self, sol: Solution) -> ObjectiveBreakdown:
        self.check(sol)
        bm, bq = self.bin_totals(sol)
        return self._finish(sol, bm, bq, 0, None)

    def evaluate_delta(self, prev: ObjectiveBreakdown, change, sol: Solution) -> ObjectiveBreakdown:
        """Re-evaluate after ``change`` was applied to ``sol``.

        Only the grade-bin totals of moved blocks and the periods from the
        earliest touched one onward are recomputed.
        """
        if prev.version != change.base_version or sol.version != change.applied_version:
            raise StaleBreakdownError("breakdown does not match the perturbation's base state")
        T = self.n_periods
        if change.is_noop:
            out = _shallow(prev)
            out.version = sol.version
            return out
        bm, bq = prev.bin_mass, prev.bin_metal
        if change.kind == "extraction_shift":
            bm, bq = bm.copy(), bq.copy()
            ar = np.arange(self.n_supply)
            t0 = T
            for b, old, new in change.moves:
                k = self.bin_index[b]
                if old >= 0:
                    bm[k, old, ar] -= self.tonnage[b]
                    bq[k, old, ar] -= self.metal[b]
                    t0 = min(t0, old)
                if new >= 0:
                    bm[k, new, ar] += self.tonnage[b]
                    bq[k, new, ar] += self.metal[b]
                    t0 = min(t0, new)
        else:
            t0 = change.period
        if t0 >= T:
            out = _shallow(prev)
            out.version = sol.version
            return out
        return self._finish(sol, bm, bq, t0, prev)

    def _finish(self, sol, bm, bq, t0, prev):
        fs = self.flowsheet
        T, S, N = self.n_periods, self.n_supply, self.n_nodes
        if prev is None:
            mass = np.zeros((N, T, S))
            metal = np.zeros((N, T, S))
            inv = np.zeros((N, T + 1, S))
            inv_q = np.zeros((N, T + 1, S))
            dp = np.zeros((N, T, S))
            dm = np.zeros((N, T, S))
            cost = np.zeros((T, S))
            sold = np.zeros((T, S))
        else:
            mass, metal = prev.mass.copy(), prev.metal.copy()
            inv, inv_q = prev.inventory.copy(), prev.inventory_metal.copy()
            dp, dm = prev.d_plus.copy(), prev.d_minus.copy()
            cost, sold = prev.cost.copy(), prev.sold_metal.copy()
        w = slice(t0, T)
        mass[:, w] = 0.0
        metal[:, w] = 0.0
        dp[:, w] = 0.0
        dm[:, w] = 0.0
        sold[w] = 0.0

        # mine: route grade bins per destination policy
        onehot = sol.destination[w][:, :, None] == np.arange(len(self.destinations))
        routed_m = np.einsum("tkd,kts->dts", onehot, bm[:, w])
        routed_q = np.einsum("tkd,kts->dts", onehot, bq[:, w])
        mined = bm[:, w].sum(axis=0)
        m = self.mine
        mnode = fs.nodes[m]
        mass[m, w] = mined
        metal[m, w] = bq[:, w].sum(axis=0)
        cost[w] = self.econ.mining_cost * mined
        if mnode.capacity is not None:
            dp[m, w] = np.maximum(mined - mnode.capacity, 0.0)
        for d, node in enumerate(self.destinations):
            mass[node, w] += routed_m[d]
            metal[node, w] += routed_q[d]

        for i in fs.order:
            n = fs.nodes[i]
            if n.kind == "mine":
                continue
            in_m, in_q = mass[i, w], metal[i, w]
            if n.processing_cost:
                cost[w] += n.processing_cost * in_m
            outs = fs.out[i]
            if n.kind == "stockpile":
                f = sol.streams[i]
                out_m = np.empty((len(outs), T - t0, S))
                out_q = np.empty((len(outs), T - t0, S))
                for t in range(t0, T):
                    avail_m = inv[i, t] + mass[i, t]
                    avail_q = inv_q[i, t] + metal[i, t]
                    for a in range(len(outs)):
                        out_m[a, t - t0] = f[t, a] * avail_m
                        out_q[a, t - t0] = f[t, a] * avail_q
                    inv[i, t + 1] = f[t, -1] * avail_m
                    inv_q[i, t + 1] = f[t, -1] * avail_q
                if n.capacity is not None:
                    dp[i, w] = np.maximum(inv[i, t0 + 1:] - n.capacity, 0.0)
                for a, j in enumerate(outs):
                    mass[j, w] += out_m[a]
                    metal[j, w] += out_q[a]
            elif n.kind == "processor":
                if n.capacity is not None:
                    dp[i, w] = np.maximum(in_m - n.capacity, 0.0)
                if n.lower_target is not None:
                    dm[i, w] = np.maximum(n.lower_target - in_m, 0.0)
                rec_q = n.recovery * in_q
                if len(outs) == 1:
                    mass[outs[0], w] += in_m
                    metal[outs[0], w] += rec_q
                elif len(outs) > 1:
                    f = sol.streams[i][w]
                    for a, j in enumerate(outs):
                        mass[j, w] += f[:, a, None] * in_m
                        metal[j, w] += f[:, a, None] * rec_q
            elif n.sells:
                sold[w] += in_q

        disc = self.discount
        scale = disc if self.econ.discount_penalties else np.ones(T)
        penalty = scale[:, None] * np.einsum("n,nts->ts", self.c_up, dp) \
            + scale[:, None] * np.einsum("n,nts->ts", self.c_down, dm)
        revenue = (self.econ.conversion * disc[:, None] * sold).T @ self.price   # (S, n_price)
        npv = revenue - (disc[:, None] * cost).sum(axis=0)[:, None]
        npv = npv.ravel()
        revenue_term = float(npv.mean())
        penalty_term = float(penalty.sum(axis=0).mean())
        total = revenue_term - penalty_term
        if not np.isfinite(total):
            raise FloatingPointError("objective evaluated to a non-finite value")
        return ObjectiveBreakdown(total, revenue_term, penalty_term, npv, dp, dm, mass, metal,
                                  inv, inv_q, cost, sold, penalty, bm, bq, sol.version)

    # -- exports ------------------------------------------------------------

    def breakdown_rows(self, b: ObjectiveBreakdown):
        """Rows (scenario, period, node, mass, metal, revenue, penalty)."""
        fs = self.flowsheet
        names = [n.name for n in fs.nodes]
        sells = [n.kind == "sink" and n.sells for n in fs.nodes]
        scale = self.discount if self.econ.discount_penalties else np.ones(self.n_periods)
        for s in range(self.scenarios.n_joint):
            i, j = divmod(s, self.scenarios.n_price)
            for t in range(self.n_periods):
                for k, name in enumerate(names):
                    rev = (self.econ.conversion * self.discount[t] * b.metal[k, t, i]
                           * self.price[t, j]) if sells[k] else 0.0
                    pen = scale[t] * (self.c_up[k] * b.d_plus[k, t, i]
                                      + self.c_down[k] * b.d_minus[k, t, i])
                    yield (s, t, name, b.mass[k, t, i], b.metal[k, t, i], rev, pen)

    def export_breakdown_csv(self, b, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "period", "node", "mass", "metal", "revenue", "penalty"])
            for row in self.breakdown_rows(b):
                w.writerow([row[0], row[1], row[2]] + [format(float(x), ".17g") for x in row[3:]])


def _shallow(b: ObjectiveBreakdown) -> ObjectiveBreakdown:
    return ObjectiveBreakdown(**{k: getattr(b, k) for k in b.__dataclass_fields__})


def evaluate(model, fs, econ, sol, scenarios=None, n_bins=5) -> ObjectiveBreakdown:
    """One-shot evaluation; builds the derived problem on every call."""
    return MiningComplex(model, fs, econ, sol.n_periods, n_bins, scenarios).evaluate(sol)


def npv_quantiles(b: ObjectiveBreakdown, probs) -> list:
    if b.npv.size == 0:
        raise ValueError("breakdown has no scenario NPVs")
    return np.quantile(b.npv, np.asarray(probs, dtype=float), method="linear").tolist()
