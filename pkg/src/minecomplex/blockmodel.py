"""Block models: a 3D grid of ore-body blocks with per-scenario grades.

Blocks are indexed ``index = x + nx*y + nx*ny*z`` with ``z = 0`` at the
surface. Precedence arcs point from a block to the overlying blocks that must
be extracted no later than it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import serialize

SLOPE_PATTERNS = ("5-point", "1-point")


@dataclass(frozen=True)
class BlockId:
    index: int
    coords: tuple

    @classmethod
    def from_index(cls, index, dims):
        nx, ny, nz = dims
        if not 0 <= index < nx * ny * nz:
            raise IndexError(f"block index {index} outside grid {dims}")
        return cls(int(index), (index % nx, (index // nx) % ny, index // (nx * ny)))

    @classmethod
    def from_coords(cls, x, y, z, dims):
        nx, ny, nz = dims
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise IndexError(f"block ({x},{y},{z}) outside grid {dims}")
        return cls(int(x + nx * y + nx * ny * z), (int(x), int(y), int(z)))


@dataclass(frozen=True)
class SupplyScenarioSpec:
    n_scenarios: int = 10
    mean_grade: float = 0.5
    variance: float = 0.09
    correlation_range: float = 3.0
    ore_threshold: float = 0.3
    seed: int = 0

    def validate(self):
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        if not self.correlation_range > 0:
            raise ValueError("correlation_range must be > 0")
        if self.mean_grade < 0:
            raise ValueError("mean_grade must be >= 0")


@dataclass(frozen=True, eq=False)
class BlockModel:
    dims: tuple
    tonnage: np.ndarray           # (n_blocks,)
    grade: np.ndarray             # (n_blocks, n_scenarios)
    ore: np.ndarray               # (n_blocks, n_scenarios) bool material type
    predecessors: tuple           # tuple of int arrays
    successors: tuple
    slope: str = "5-point"
    spec: Optional[SupplyScenarioSpec] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_blocks(self):
        return int(self.tonnage.shape[0])

    @property
    def n_scenarios(self):
        return int(self.grade.shape[1])

    def coords(self):
        """(n_blocks, 3) integer coordinates."""
        nx, ny, _ = self.dims
        idx = np.arange(self.n_blocks)
        return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1)

    def block(self, index) -> BlockId:
        return BlockId.from_index(index, self.dims)

    def __eq__(self, other):
        if not isinstance(other, BlockModel):
            return NotImplemented
        return (tuple(self.dims) == tuple(other.dims) and self.slope == other.slope
                and np.array_equal(self.tonnage, other.tonnage)
                and np.array_equal(self.grade, other.grade)
                and np.array_equal(self.ore, other.ore))

    __hash__ = None


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError("dims must be (nx, ny, nz)")
    if min(dims) < 1:
        raise ValueError(f"zero-volume grid {dims}")
    return dims


def precedence_arcs(dims, slope="5-point"):
    """Immediate predecessor and successor lists for a grid."""
    if slope not in SLOPE_PATTERNS:
        raise ValueError(f"unknown slope pattern {slope!r}")
    nx, ny, nz = _check_dims(dims)
    offsets = [(0, 0)]
    if slope == "5-point":
        offsets += [(-1, 0), (1, 0), (0, -1), (0, 1)]
    n = nx * ny * nz
    preds = [[] for _ in range(n)]
    succs = [[] for _ in range(n)]
    for z in range(1, nz):
        for y in range(ny):
            for x in range(nx):
                b = x + nx * y + nx * ny * z
                for dx, dy in offsets:
                    px, py = x + dx, y + dy
                    if 0 <= px < nx and 0 <= py < ny:
                        p = px + nx * py + nx * ny * (z - 1)
                        preds[b].append(p)
                        succs[p].append(b)
    as_arrays = lambda lists: tuple(np.array(sorted(v), dtype=np.int64) for v in lists)
    return as_arrays(preds), as_arrays(succs)


def _exp_kernel(correlation_range):
    radius = int(np.ceil(3.0 * correlation_range))
    d = np.arange(-radius, radius + 1, dtype=float)
    return np.exp(-np.abs(d) / correlation_range)


def correlated_field(shape, correlation_range, rng, size=1):
    """Unit-variance Gaussian fields by separable moving-average smoothing.

    White noise is padded by the kernel radius on every axis and smoothed with
    an exponential kernel ``exp(-|d| / range)`` along x, y and z, so each
    output cell sees a full kernel and the variance normalization is exact.
    """
    w = _exp_kernel(correlation_range)
    r = (len(w) - 1) // 2
    padded = tuple(s + 2 * r for s in shape)
    noise = rng.standard_normal((size,) + padded)
    out = noise
    for axis in (1, 2, 3):
        win = np.lib.stride_tricks.sliding_window_view(out, len(w), axis=axis)
        out = win @ w
    return out / np.sqrt(np.sum(w * w)) ** 3


def generate_block_model(dims, spec: SupplyScenarioSpec, tonnage=10000.0,
                         slope="5-point") -> BlockModel:
    """Synthetic block model with spatially correlated grade scenarios."""
    dims = _check_dims(dims)
    spec.validate()
    nx, ny, nz = dims
    rng = np.random.default_rng(spec.seed)
    f = correlated_field((nx, ny, nz), spec.correlation_range, rng, size=spec.n_scenarios)
    # field axes are (scenario, x, y, z); flatten to index = x + nx*y + nx*ny*z
    f = f.transpose(0, 3, 2, 1).reshape(spec.n_scenarios, -1).T
    grade = np.maximum(spec.mean_grade + np.sqrt(spec.variance) * f, 0.0)
    if spec.variance == 0:
        grade = np.full_like(grade, spec.mean_grade)
    return make_block_model(dims, np.full(nx * ny * nz, float(tonnage)), grade,
                            spec.ore_threshold, slope=slope, spec=spec)


def make_block_model(dims, tonnage, grade, ore_threshold, slope="5-point", spec=None):
    """Assemble a BlockModel from explicit arrays (used by loaders and tests)."""
    dims = _check_dims(dims)
    n = dims[0] * dims[1] * dims[2]
    tonnage = np.array(tonnage, dtype=float).reshape(n)
    grade = np.array(grade, dtype=float).reshape(n, -1)
    if np.any(tonnage <= 0):
        raise ValueError("tonnage must be positive")
    if np.any(grade < 0) or not np.all(np.isfinite(grade)):
        raise ValueError("grades must be finite and nonnegative")
    ore = grade >= ore_threshold
    for a in (tonnage, grade, ore):
        a.setflags(write=False)
    preds, succs = precedence_arcs(dims, slope)
    return BlockModel(dims, tonnage, grade, ore, preds, succs, slope, spec,
                      {"ore_threshold": float(ore_threshold)})


def predecessors(model: BlockModel, b) -> list:
    index = b.index if isinstance(b, BlockId) else int(b)
    if not 0 <= index < model.n_blocks:
        raise IndexError(f"block {index} not in model")
    return [BlockId.from_index(int(p), model.dims) for p in model.predecessors[index]]


def topological_order(model: BlockModel) -> np.ndarray:
    """Kahn's algorithm over precedence arcs; raises if a cycle exists."""
    n = model.n_blocks
    indeg = np.array([len(p) for p in model.predecessors])
    stack = list(np.flatnonzero(indeg == 0)[::-1])
    order = []
    while stack:
        b = stack.pop()
        order.append(b)
        for s in model.successors[b]:
            indeg[s] -= 1
            if indeg[s] == 0:
                stack.append(s)
    if len(order) != n:
        raise ValueError("precedence graph has a cycle")
    return np.array(order, dtype=np.int64)


@dataclass
class BlockGraph:
    """Undirected 6-neighbourhood adjacency plus per-node features."""
    n_nodes: int
    edges: np.ndarray       # (n_edges, 2), i < j
    neighbors: np.ndarray   # (n_nodes, 6) padded with -1
    degree: np.ndarray
    features: np.ndarray    # (n_nodes, n_features)
    feature_names: tuple


def grid_edges(dims):
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz).reshape(nz, ny, nx)
    pairs = [
        np.stack([idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel()], axis=1),
        np.stack([idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel()], axis=1),
        np.stack([idx[:-1, :, :].ravel(), idx[1:, :, :].ravel()], axis=1),
    ]
    return np.concatenate(pairs, axis=0).astype(np.int64)


def neighbor_table(n_nodes, edges, width=6):
    table = np.full((n_nodes, width), -1, dtype=np.int64)
    deg = np.zeros(n_nodes, dtype=np.int64)
    for i, j in edges:
        table[i, deg[i]] = j
        deg[i] += 1
        table[j, deg[j]] = i
        deg[j] += 1
    return table, deg


def normalized_coords(model: BlockModel):
    c = model.coords().astype(float)
    span = np.maximum(np.array(model.dims, dtype=float) - 1.0, 1.0)
    return c / span


def block_graph(model: BlockModel, solution=None, n_periods=None) -> BlockGraph:
    edges = grid_edges(model.dims)
    table, deg = neighbor_table(model.n_blocks, edges)
    cols = [model.tonnage, model.grade.mean(axis=1), model.grade.std(axis=1)]
    names = ["tonnage", "grade_mean", "grade_std", "x", "y", "z"]
    feats = np.column_stack(cols + [normalized_coords(model)])
    if solution is not None:
        period = np.asarray(solution.period, dtype=float)
        horizon = float(n_periods or solution.n_periods)
        current = np.where(period < 0, -1.0, period / max(horizon - 1.0, 1.0))
        feats = np.column_stack([feats, current])
        names.append("period")
    return BlockGraph(model.n_blocks, edges, table, deg, feats, tuple(names))


# --- instance files ------------------------------------------------------

def save_block_model(model: BlockModel, path, extra_header=None) -> str:
    spec = model.spec
    header = {
        "dims": list(model.dims),
        "n_scenarios": model.n_scenarios,
        "seed": spec.seed if spec else None,
        "slope": model.slope,
        "ore_threshold": model.meta.get("ore_threshold"),
        "spec": None if spec is None else {
            "n_scenarios": spec.n_scenarios, "mean_grade": spec.mean_grade,
            "variance": spec.variance, "correlation_range": spec.correlation_range,
            "ore_threshold": spec.ore_threshold, "seed": spec.seed,
        },
    }
    if extra_header:
        header.update(extra_header)
    coords = model.coords()
    body = [
        {"index": b, "x": int(coords[b, 0]), "y": int(coords[b, 1]), "z": int(coords[b, 2]),
         "tonnage": model.tonnage[b], "grade": model.grade[b], "ore": model.ore[b].tolist()}
        for b in range(model.n_blocks)
    ]
    return serialize.write_document(path, "block_model", header, body)


def load_block_model(path) -> BlockModel:
    header, body = serialize.read_document(path, "block_model")
    spec = SupplyScenarioSpec(**header["spec"]) if header.get("spec") else None
    body = sorted(body, key=lambda r: r["index"])
    tonnage = np.array([r["tonnage"] for r in body], dtype=float)
    grade = np.array([r["grade"] for r in body], dtype=float)
    return make_block_model(header["dims"], tonnage, grade, header["ore_threshold"],
                            slope=header["slope"], spec=spec)
