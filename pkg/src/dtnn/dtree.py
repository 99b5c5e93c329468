"""Dendrite-tree neuron topologies and evaluation.

A tree neuron replaces the flat weighted sum of a traditional neuron with
a bounded fan-in tree of inner nodes. Consecutive inputs are grouped into
blocks of at most `fan_in`; each block feeds one first-layer node, and the
reduction repeats until a single root remains. Type-I trees pin all inner
weights to 1 with identity inner activations (exactly a traditional neuron
up to float associativity); Type-II trees make every weight, bias, and
inner activation trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "ConfigError",
    "DtreeTopology",
    "DtreeNeuron",
    "build_topology",
    "count_weights_formula",
    "count_weights_constructive",
    "convert_traditional",
    "eval_neuron",
    "leaf_path_products",
]


class ConfigError(ValueError):
    """Invalid tree or network configuration."""


def _sign(x):
    # strict: exactly 0 maps to -1, matching the strict ">" binarization rule
    return np.where(x > 0.0, 1.0, -1.0)


ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sign": _sign,
}


@dataclass(frozen=True)
class DtreeTopology:
    """Layered tree over `n_inputs` signals with per-node fan-in <= fan_in.

    `layer_sizes[l]` is the node count of inner layer l (layer 0 is fed by
    the inputs, the last layer is the single root). Node i of a layer takes
    the consecutive block [i*fan_in, min((i+1)*fan_in, prev)) of the
    previous row's signals, so only the last node of a row can be ragged.
    """

    n_inputs: int
    fan_in: int
    layer_sizes: tuple

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    @property
    def num_nodes(self) -> int:
        return sum(self.layer_sizes)

    def prev_count(self, level: int) -> int:
        return self.n_inputs if level == 0 else self.layer_sizes[level - 1]

    def node_span(self, level: int, i: int) -> tuple:
        """Half-open child index range of node i at `level` into the previous row."""
        prev = self.prev_count(level)
        return i * self.fan_in, min((i + 1) * self.fan_in, prev)

    def edges(self):
        """Per-node ordered input references: edges()[level][i] lists child indices."""
        return [
            [list(range(*self.node_span(l, i))) for i in range(size)]
            for l, size in enumerate(self.layer_sizes)
        ]

    def validate(self):
        if self.fan_in < 2:
            raise ConfigError(f"fan_in must be >= 2, got {self.fan_in}")
        if self.n_inputs < 1:
            raise ConfigError(f"n_inputs must be >= 1, got {self.n_inputs}")
        if self.layer_sizes[-1] != 1:
            raise ConfigError("final layer must hold exactly the root node")
        prev = self.n_inputs
        for l, size in enumerate(self.layer_sizes):
            if size != -(-prev // self.fan_in):
                raise ConfigError(f"layer {l} has {size} nodes, expected ceil({prev}/{self.fan_in})")
            prev = size
        return self


def build_topology(n_inputs: int, fan_in: int) -> DtreeTopology:
    """Group consecutive signals into blocks of `fan_in` until one node remains."""
    if fan_in < 2:
        raise ConfigError(f"fan_in must be >= 2, got {fan_in}")
    if n_inputs < 1:
        raise ConfigError(f"n_inputs must be >= 1, got {n_inputs}")
    sizes = []
    count = n_inputs
    while True:
        count = -(-count // fan_in)  # ceil division
        sizes.append(count)
        if count == 1:
            break
    return DtreeTopology(n_inputs=n_inputs, fan_in=fan_in, layer_sizes=tuple(sizes))


def count_weights_formula(n: int, m: int) -> int:
    """Closed-form weight count N = n + n*(1 - (1/m)**log_m(n)) / (m - 1).

    Evaluated with a real-valued logarithm and rounded to the nearest
    integer. For n an exact power of m this counts one more weight than
    the built tree has edges (it counts inner nodes, not inner edges);
    for ragged n it can undercount. `count_weights_constructive` is the
    ground truth for the actual artifact.
    """
    if n < 1 or m < 2:
        raise ConfigError(f"need n >= 1 and m >= 2, got n={n} m={m}")
    exponent = math.log(n) / math.log(m)
    series = n * (1.0 - (1.0 / m) ** exponent) / (m - 1)
    return int(np.rint(n + series))


def count_weights_constructive(t: DtreeTopology) -> int:
    """Number of weighted edges of the built tree: leaf edges + inner edges."""
    return t.n_inputs + t.num_nodes - 1


@dataclass
class DtreeNeuron:
    """A tree neuron: topology plus per-edge weights, per-node biases, and activations.

    leaf_weights has one entry per input. inner_weights[l-1] holds the edge
    weights feeding layer l (one per node of layer l-1); biases[l] and
    activations[l] belong to the nodes of layer l.
    """

    topology: DtreeTopology
    leaf_weights: np.ndarray
    inner_weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    kind: str = "type2"

    def validate(self):
        t = self.topology
        t.validate()
        if self.leaf_weights.shape != (t.n_inputs,):
            raise ConfigError("leaf_weights length must equal n_inputs")
        if len(self.inner_weights) != t.depth - 1:
            raise ConfigError("need one inner weight row per non-first layer")
        if len(self.biases) != t.depth or len(self.activations) != t.depth:
            raise ConfigError("need one bias row and activation per layer")
        for l in range(1, t.depth):
            if self.inner_weights[l - 1].shape != (t.layer_sizes[l - 1],):
                raise ConfigError(f"inner weight row {l} has wrong length")
        for l in range(t.depth):
            if self.biases[l].shape != (t.layer_sizes[l],):
                raise ConfigError(f"bias row {l} has wrong length")
            if self.activations[l] not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {self.activations[l]!r}")
        if self.kind == "type1":
            for w in self.inner_weights:
                if not np.all(w == 1.0):
                    raise ConfigError("Type-I requires all inner weights == 1")
            for b in self.biases[:-1]:
                if not np.all(b == 0.0):
                    raise ConfigError("Type-I requires zero biases below the root")
            for a in self.activations[:-1]:
                if a != "identity":
                    raise ConfigError("Type-I requires identity activations below the root")
        return self


def reduce_level(values: np.ndarray, edge_weights: np.ndarray, biases: np.ndarray,
                 fan_in: int) -> np.ndarray:
    """One tree layer: weighted block sums of `values` along the last axis.

    values: (..., prev); edge_weights: (prev,) or broadcastable to values;
    biases: (nodes,) or (..., nodes). Accumulation order is fixed (bias
    first, then children in index order) so the table compiler, which
    replays the same arithmetic per enumerated input, lands on identical
    float64 bit patterns.
    """
    prev = values.shape[-1]
    nodes = -(-prev // fan_in)
    pad = nodes * fan_in - prev
    prod = values * edge_weights
    if pad:
        width = [(0, 0)] * (prod.ndim - 1) + [(0, pad)]
        prod = np.pad(prod, width)  # zero products: exact no-ops in the sums
    prod = prod.reshape(prod.shape[:-1] + (nodes, fan_in))
    acc = np.zeros(prod.shape[:-1], dtype=np.float64)
    acc += biases
    for j in range(fan_in):
        acc += prod[..., j]
    return acc


def eval_neuron(neuron: DtreeNeuron, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the tree bottom-up; accepts (n,) or (batch, n) inputs."""
    t = neuron.topology
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != t.n_inputs:
        raise ConfigError(f"expected {t.n_inputs} inputs, got {x.shape[-1]}")
    vals = x
    for l in range(t.depth):
        w = neuron.leaf_weights if l == 0 else neuron.inner_weights[l - 1]
        vals = reduce_level(vals, np.asarray(w, dtype=np.float64),
                            np.asarray(neuron.biases[l], dtype=np.float64), t.fan_in)
        vals = ACTIVATIONS[neuron.activations[l]](vals)
    out = vals[..., 0]
    return float(out[0]) if single else out


def convert_traditional(weights, bias: float, activation: str, fan_in: int) -> DtreeNeuron:
    """Build the Type-I tree computing f(sum(w*x) + b) for any fan_in >= 2.

    Leaf weights carry the original weights, every inner weight is 1,
    every bias below the root is 0 with identity activation, and the root
    gets the original bias and activation. Each input's path product to
    the root therefore equals its original weight.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigError("weights must be a nonempty vector")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    t = build_topology(w.size, fan_in)
    neuron = DtreeNeuron(
        topology=t,
        leaf_weights=w.copy(),
        inner_weights=[np.ones(t.layer_sizes[l - 1]) for l in range(1, t.depth)],
        biases=[np.zeros(s) for s in t.layer_sizes],
        activations=["identity"] * (t.depth - 1) + [activation],
        kind="type1",
    )
    neuron.biases[-1][0] = float(bias)
    return neuron.validate()


def leaf_path_products(neuron: DtreeNeuron) -> np.ndarray:
    """Product of edge weights along each leaf-to-root path.

    For a Type-I tree this equals leaf_weights elementwise, which is the
    constructive argument for equivalence with the traditional neuron.
    """
    t = neuron.topology
    factor = np.ones(1)
    for l in range(t.depth - 1, 0, -1):
        w = np.asarray(neuron.inner_weights[l - 1], dtype=np.float64)
        expanded = np.repeat(factor, t.fan_in)[: w.size]
        factor = expanded * w
    return np.repeat(factor, t.fan_in)[: t.n_inputs] * np.asarray(neuron.leaf_weights)
