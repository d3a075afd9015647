"""Small numpy neural-network substrate with hand-written gradients.

Layers expose ``forward(x, graph=None)`` and ``backward(grad)``; backward
returns the gradient with respect to the layer input and overwrites
``layer.grads`` (same order as ``layer.params``). Nothing here accumulates
across calls, so callers that sum gradients over several forward passes do
it themselves.

Graph layers aggregate neighbours through a padded neighbour table
``(n_nodes, max_degree)`` with -1 for empty slots. Neighbour messages and the
node-level softmax are summed in value-sorted order, which makes the result
independent of node labelling bit for bit.
"""

import base64
import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class MissingForwardError(RuntimeError):
    pass


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = []
        self.grads = []
        self._cache = None

    def config(self):
        return {}

    def _cached(self):
        if self._cache is None:
            raise MissingForwardError(f"{self.kind}: backward called before forward")
        return self._cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in, fan_out, rng=None, identity=False):
        super().__init__()
        self.fan_in, self.fan_out = int(fan_in), int(fan_out)
        if identity:
            if fan_in != fan_out:
                raise ShapeError("identity initialization needs a square layer")
            w = np.eye(fan_in)
        else:
            w = _uniform(rng or np.random.default_rng(0), fan_in, (fan_in, fan_out))
        self.W = w
        self.b = np.zeros(fan_out)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def config(self):
        return {"fan_in": self.fan_in, "fan_out": self.fan_out}

    def forward(self, x, graph=None):
        if x.shape[-1] != self.fan_in:
            raise ShapeError(f"dense expects last dim {self.fan_in}, got {x.shape}")
        self._cache = x
        return x @ self.W + self.b

    def backward(self, g):
        x = self._cached()
        x2 = x.reshape(-1, self.fan_in)
        g2 = g.reshape(-1, self.fan_out)
        self.grads[0][...] = x2.T @ g2
        self.grads[1][...] = g2.sum(axis=0)
        return g @ self.W.T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, graph=None):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, g):
        return np.where(self._cached(), g, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, graph=None):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = y
        return y

    def backward(self, g):
        y = self._cached()
        return g * y * (1.0 - y)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, graph=None):
        self._cache = x.shape
        return x.reshape(-1)

    def backward(self, g):
        return g.reshape(self._cached())


# optimal compare-exchange networks for short axes (neighbour slots on a grid)
SORTING_NETWORKS = {
    2: [(0, 1)],
    3: [(0, 1), (1, 2), (0, 1)],
    4: [(0, 1), (2, 3), (0, 2), (1, 3), (1, 2)],
    5: [(0, 3), (1, 4), (0, 2), (1, 3), (0, 1), (2, 4), (1, 2), (3, 4), (2, 3)],
    6: [(0, 5), (1, 3), (2, 4), (1, 2), (3, 4), (0, 3), (2, 5), (0, 1), (2, 3), (4, 5), (1, 2), (3, 4)],
}


def ordered_sum(x, axis):
    """Sum along ``axis`` in ascending value order (labelling independent)."""
    n = x.shape[axis]
    if n in SORTING_NETWORKS:
        c = list(np.moveaxis(x, axis, 0))
        for i, j in SORTING_NETWORKS[n]:
            lo = np.minimum(c[i], c[j])
            c[j] = np.maximum(c[i], c[j])
            c[i] = lo
    else:
        c = np.moveaxis(np.sort(x, axis=axis), axis, 0)
    acc = np.array(c[0], dtype=float, copy=True)
    for k in range(1, n):
        acc += c[k]
    return acc


class SoftmaxHead(Layer):
    """Softmax along ``axis``; axis 0 turns per-node logits into a distribution."""
    kind = "softmax"

    def __init__(self, axis=0):
        super().__init__()
        self.axis = axis

    def config(self):
        return {"axis": self.axis}

    def forward(self, x, graph=None):
        z = x - np.max(x, axis=self.axis, keepdims=True)
        e = np.exp(z)
        total = np.expand_dims(ordered_sum(e, self.axis), self.axis)
        y = e / total
        self._cache = y
        return y

    def backward(self, g):
        y = self._cached()
        return y * (g - np.sum(g * y, axis=self.axis, keepdims=True))


class Conv3d(Layer):
    """'Same'-padded 3D convolution over a (channels, X, Y, Z) grid."""
    kind = "conv3d"

    def __init__(self, in_ch, out_ch, kernel=3, rng=None):
        super().__init__()
        if kernel % 2 != 1:
            raise ShapeError("kernel size must be odd")
        self.in_ch, self.out_ch, self.kernel = int(in_ch), int(out_ch), int(kernel)
        fan_in = in_ch * kernel ** 3
        self.W = _uniform(rng or np.random.default_rng(0), fan_in, (out_ch, in_ch, kernel, kernel, kernel))
        self.b = np.zeros(out_ch)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def config(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel}

    def forward(self, x, graph=None):
        if x.ndim != 4 or x.shape[0] != self.in_ch:
            raise ShapeError(f"conv3d expects ({self.in_ch}, X, Y, Z), got {x.shape}")
        k, p = self.kernel, self.kernel // 2
        _, nx, ny, nz = x.shape
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
        cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(nx * ny * nz, -1)
        self._cache = (cols, x.shape)
        out = cols @ self.W.reshape(self.out_ch, -1).T + self.b
        return out.reshape(nx, ny, nz, self.out_ch).transpose(3, 0, 1, 2)

    def backward(self, g):
        cols, shape = self._cached()
        c, nx, ny, nz = shape
        k, p = self.kernel, self.kernel // 2
        gm = g.transpose(1, 2, 3, 0).reshape(-1, self.out_ch)
        self.grads[0][...] = (gm.T @ cols).reshape(self.W.shape)
        self.grads[1][...] = gm.sum(axis=0)
        dcols = (gm @ self.W.reshape(self.out_ch, -1)).reshape(nx, ny, nz, c, k, k, k)
        dxp = np.zeros((c, nx + 2 * p, ny + 2 * p, nz + 2 * p))
        for a in range(k):
            for b in range(k):
                for d in range(k):
                    dxp[:, a:a + nx, b:b + ny, d:d + nz] += dcols[:, :, :, :, a, b, d].transpose(3, 0, 1, 2)
        return dxp[:, p:p + nx, p:p + ny, p:p + nz]


class Graph:
    """Neighbour table and degrees for graph layers."""

    def __init__(self, neighbors, degree=None, symmetric=False):
        self.neighbors = np.asarray(neighbors, dtype=np.int64)
        n = self.neighbors.shape[0]
        self.degree = (np.asarray(degree) if degree is not None
                       else (self.neighbors >= 0).sum(axis=1))
        self.padded = np.where(self.neighbors >= 0, self.neighbors, n)
        self.slots = np.ascontiguousarray(self.padded.T)   # (max_degree, n_nodes)
        self.inv_degree = 1.0 / np.maximum(self.degree, 1)
        self.symmetric = symmetric   # u in N(v) iff v in N(u)

    @property
    def n_nodes(self):
        return self.neighbors.shape[0]

    @classmethod
    def from_edges(cls, n_nodes, edges):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        deg = np.zeros(n_nodes, dtype=np.int64)
        np.add.at(deg, edges[:, 0], 1)
        np.add.at(deg, edges[:, 1], 1)
        width = max(int(deg.max()) if n_nodes else 0, 1)
        table = np.full((n_nodes, width), -1, dtype=np.int64)
        fill = np.zeros(n_nodes, dtype=np.int64)
        for i, j in edges:
            table[i, fill[i]] = j
            fill[i] += 1
            table[j, fill[j]] = i
            fill[j] += 1
        return cls(table, deg, symmetric=True)

    def permuted(self, perm):
        """Graph under relabelling: new node q is old node perm[q]."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        old = self.neighbors[perm]
        return Graph(np.where(old >= 0, inv[np.maximum(old, 0)], -1), self.degree[perm],
                     self.symmetric)

    def mean_neighbors(self, h):
        hp = np.vstack([h, np.zeros((1, h.shape[1]))])
        return ordered_sum(hp[self.slots], axis=0) * self.inv_degree[:, None]

    def scatter_neighbors(self, g):
        """Transpose of the neighbour sum: out[u] = sum over v with u in N(v) of g[v]."""
        gp = np.vstack([g, np.zeros((1, g.shape[1]))])
        if self.symmetric:
            return gp[self.slots].sum(axis=0)
        out = np.zeros_like(gp)
        np.add.at(out, self.padded, np.broadcast_to(g[:, None, :], self.padded.shape + (g.shape[1],)))
        return out[:-1]


class GraphConv(Layer):
    """h'(v) = W_self h(v) + W_nbr mean_{u ~ v} h(u) + b; empty neighbourhoods give 0."""
    kind = "graphconv"

    def __init__(self, fan_in, fan_out, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fan_in, self.fan_out = int(fan_in), int(fan_out)
        self.W_self = _uniform(rng, 2 * fan_in, (fan_in, fan_out))
        self.W_nbr = _uniform(rng, 2 * fan_in, (fan_in, fan_out))
        self.b = np.zeros(fan_out)
        self.params = [self.W_self, self.W_nbr, self.b]
        self.grads = [np.zeros_like(p) for p in self.params]

    def config(self):
        return {"fan_in": self.fan_in, "fan_out": self.fan_out}

    def forward(self, h, graph=None):
        if graph is None:
            raise ShapeError("graphconv needs a graph")
        if h.ndim != 2 or h.shape[1] != self.fan_in or h.shape[0] != graph.n_nodes:
            raise ShapeError(f"graphconv expects ({graph.n_nodes}, {self.fan_in}), got {h.shape}")
        agg = graph.mean_neighbors(h)
        self._cache = (h, agg, graph)
        return h @ self.W_self + agg @ self.W_nbr + self.b

    def backward(self, g):
        h, agg, graph = self._cached()
        self.grads[0][...] = h.T @ g
        self.grads[1][...] = agg.T @ g
        self.grads[2][...] = g.sum(axis=0)
        dagg = (g @ self.W_nbr.T) * graph.inv_degree[:, None]
        return g @ self.W_self.T + graph.scatter_neighbors(dagg)


LAYERS = {cls.kind: cls for cls in (Dense, ReLU, Sigmoid, Flatten, SoftmaxHead, Conv3d, GraphConv)}


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, graph=None):
        for layer in self.layers:
            x = layer.forward(x, graph)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def copy_from(self, other):
        for p, q in zip(self.params, other.params):
            p[...] = q

    def spec(self):
        return [{"kind": l.kind, **l.config()} for l in self.layers]


def mlp(sizes, rng, final_activation=None):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    if final_activation is not None:
        layers.append(final_activation)
    return Sequential(layers)


def mse(pred, target, weights=None):
    """Mean (optionally weighted) squared error and its gradient."""
    diff = pred - target
    w = np.ones_like(diff) if weights is None else np.broadcast_to(weights, diff.shape)
    n = diff.size
    return float(np.sum(w * diff * diff) / n), 2.0 * w * diff / n


class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity = None

    def step(self, params, grads):
        _check_finite(grads)
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads):
        _check_finite(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimize_step(params, grads, optimizer):
    optimizer.step(params, grads)


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")


def gradient_check(net: Sequential, x, graph=None, h=1e-5, seed=0, floor=1e-4):
    """Worst norm-relative error between backprop and central differences.

    The loss is a random projection of the output. ``floor`` bounds the
    denominator so exactly-zero gradients do not amplify difference noise.
    """
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=net.forward(x, graph).shape)

    def loss():
        return float(np.sum(proj * net.forward(x, graph)))

    net.forward(x, graph)
    dx = net.backward(proj)
    pairs = [(p, g.copy()) for p, g in zip(net.params, net.grads)] + [(x, dx)]
    worst = 0.0
    for p, analytic in pairs:
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = loss()
            p[i] = old - h
            num[i] = (up - loss()) / (2 * h)
            p[i] = old
        den = max(np.linalg.norm(analytic) + np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(analytic - num) / den))
    return worst


# --- checkpoints ---------------------------------------------------------

def save_network(net: Sequential, path, extra=None):
    header = {"format": "minecomplex-net", "version": CHECKPOINT_VERSION,
              "layers": net.spec(), "extra": extra or {}}
    weights = []
    for p in net.params:
        data = np.ascontiguousarray(p, dtype="<f8").tobytes()
        weights.append({"shape": list(p.shape), "data": base64.b64encode(data).decode("ascii")})
    Path(path).write_text(json.dumps({"header": header, "weights": weights}))


def load_network(path) -> Sequential:
    doc = json.loads(Path(path).read_text())
    header = doc["header"]
    if header.get("format") != "minecomplex-net" or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported network checkpoint")
    layers = []
    for spec in header["layers"]:
        spec = dict(spec)
        cls = LAYERS[spec.pop("kind")]
        layers.append(cls(**spec))
    net = Sequential(layers)
    if len(net.params) != len(doc["weights"]):
        raise ValueError("checkpoint weight count does not match its architecture")
    for p, w in zip(net.params, doc["weights"]):
        arr = np.frombuffer(base64.b64decode(w["data"]), dtype="<f8").reshape(w["shape"])
        if arr.shape != p.shape:
            raise ShapeError("checkpoint tensor shape mismatch")
        p[...] = arr
    return net
