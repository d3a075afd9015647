"""Experiment configuration: one JSON document, schema-versioned."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from ..flowsheet import EconomicTerms, FlowNode, Flowsheet
from ..market import COPPER, GOLD

SCHEMA_VERSION = 1
POLICIES = ("baseline", "nn-nb", "cnn-nb", "gnn-nb")
SELECTORS = ("uniform", "guide")


class ConfigError(ValueError):
    pass


@dataclass
class InstanceConfig:
    dims: tuple = (12, 12, 6)
    tonnage: float = 15000.0
    n_supply: int = 10
    n_price: int = 50
    n_periods: int = 8
    n_bins: int = 5
    mean_grade: float = 0.5
    variance: float = 0.09
    correlation_range: float = 3.0
    ore_threshold: float = 0.3
    slope: str = "5-point"
    supply_seed: int = 1
    price_seed: int = 2


@dataclass
class PriceModelConfig:
    kind: str = "mrj"        # "mrj" (mean reverting) or "gbmj" (trending GBM)
    params: dict = field(default_factory=lambda: asdict(COPPER))


@dataclass
class EconomicsConfig:
    discount_rate: float = 0.10
    mining_cost: float = 2.0
    conversion: float = 22.0462          # lb of metal per tonne at 1 % grade
    penalty_up: dict = field(default_factory=lambda: {"mine": 20.0, "mill": 30.0, "leach": 20.0,
                                                      "stockpile": 5.0})
    penalty_down: dict = field(default_factory=dict)
    discount_penalties: bool = True


@dataclass
class ScheduleConfig:
    temp0: Optional[float] = None
    cooling: float = 0.999
    epoch_len: int = 100
    max_iters: int = 10 ** 9
    warmup: int = 200
    step_sigma: float = 0.1


@dataclass
class LearningConfig:
    refresh: int = 100        # iterations between block-distribution refreshes
    branch_lr: float = 1e-2
    clip: float = 0.2
    entropy: float = 0.2      # constant entropy bonus in the branching objective
    guide_lr: float = 1e-3
    guide_gamma: float = 0.5
    sigma_start: float = 0.2
    sigma_end: float = 0.02


def default_flowsheet():
    nodes = [
        FlowNode("mine", "mine", capacity=1.2e6),
        FlowNode("stockpile", "stockpile", capacity=2.0e6, processing_cost=0.5),
        FlowNode("mill", "processor", capacity=6.0e5, recovery=0.9, processing_cost=9.0),
        FlowNode("leach", "processor", capacity=4.0e5, recovery=0.6, processing_cost=4.0),
        FlowNode("waste", "sink", sells=False),
        FlowNode("market", "sink"),
    ]
    arcs = [("mine", "waste"), ("mine", "stockpile"), ("mine", "mill"), ("mine", "leach"),
            ("stockpile", "mill"), ("stockpile", "leach"), ("mill", "market"), ("leach", "market")]
    return Flowsheet(nodes, arcs).to_dict()


@dataclass
class ExperimentConfig:
    name: str = "copper-desk"
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    flowsheet: dict = field(default_factory=default_flowsheet)
    economics: EconomicsConfig = field(default_factory=EconomicsConfig)
    price_model: PriceModelConfig = field(default_factory=PriceModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    policy: str = "baseline"
    selector: str = "uniform"  # heuristic selection; "guide" uses the learned agent
    seed: int = 0
    budget_seconds: float = 60.0
    clock: str = "modeled"
    write_trace: bool = True
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        inst = self.instance
        if len(inst.dims) != 3 or min(inst.dims) < 1:
            raise ConfigError(f"instance.dims must be three positive integers, got {inst.dims}")
        for name in ("n_supply", "n_price", "n_periods", "n_bins"):
            if getattr(inst, name) < 1:
                raise ConfigError(f"instance.{name} must be >= 1")
        if inst.tonnage <= 0 or inst.variance < 0 or inst.correlation_range <= 0:
            raise ConfigError("instance tonnage, variance or correlation_range out of range")
        if self.price_model.kind not in ("mrj", "gbmj"):
            raise ConfigError(f"unknown price model {self.price_model.kind!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}")
        if self.clock not in ("modeled", "wall"):
            raise ConfigError("clock must be 'modeled' or 'wall'")
        if not self.budget_seconds > 0:
            raise ConfigError("budget_seconds must be positive")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        try:
            self.build_flowsheet()
            self.build_price_params().validate()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return self

    # -- builders -----------------------------------------------------------

    def build_flowsheet(self) -> Flowsheet:
        fs = Flowsheet.from_dict(self.flowsheet)
        for n in fs.nodes:
            n.validate()
        return fs

    def build_price_params(self):
        from ..market import GbmjParams, MrjParams
        cls = MrjParams if self.price_model.kind == "mrj" else GbmjParams
        return cls(**self.price_model.params)

    def build_economics(self, prices) -> EconomicTerms:
        e = self.economics
        return EconomicTerms(prices, e.discount_rate, e.mining_cost, e.conversion,
                             dict(e.penalty_up), dict(e.penalty_down), e.discount_penalties)

    def selector_kind(self):
        return self.selector

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        d = asdict(self)
        d["instance"]["dims"] = list(self.instance.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        parts = {"instance": InstanceConfig, "economics": EconomicsConfig,
                 "price_model": PriceModelConfig, "schedule": ScheduleConfig,
                 "learning": LearningConfig}
        try:
            for key, sub in parts.items():
                if key in d:
                    d[key] = sub(**d[key])
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        cfg.instance.dims = tuple(int(v) for v in cfg.instance.dims)
        return cfg

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc).validate()

    def instance_key(self):
        """The part of the config that determines the generated files."""
        d = self.to_dict()
        return {"instance": d["instance"], "price_model": d["price_model"]}


def preset(name) -> ExperimentConfig:
    """Desk-scale presets: copper (mean-reverting prices) and gold (trending GBM)."""
    if name == "copper":
        return ExperimentConfig()
    if name == "gold":
        cfg = ExperimentConfig(name="gold-desk")
        cfg.instance.mean_grade = 1.5        # g/t
        cfg.instance.variance = 0.8
        cfg.instance.ore_threshold = 0.8
        cfg.price_model = PriceModelConfig("gbmj", asdict(GOLD))
        cfg.economics.conversion = 1.0 / 31.1034768   # troy oz per gram
        cfg.economics.mining_cost = 2.5
        fs = cfg.flowsheet
        for n in fs["nodes"]:
            if n["name"] == "mill":
                n["processing_cost"] = 14.0
            elif n["name"] == "leach":
                n["processing_cost"] = 6.0
        return cfg
    raise ConfigError(f"unknown preset {name!r}; choose copper or gold")
