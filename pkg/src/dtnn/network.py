"""Networks of tree neurons: layers, reference forward pass, and builders.

The reference forward pass is the oracle the compiled lookup-table runtime
is checked against, so it works in the *code domain*: every tree node's
output is quantized to its level's QuantSpec and handed to the next level
as an integer code. All float arithmetic runs in float64 with a fixed
accumulation order (see dtree.reduce_level); the table compiler replays
the identical arithmetic when enumerating node inputs, which is what makes
netlist execution bit-exact rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dtree import (ACTIVATIONS, ConfigError, DtreeTopology, build_topology,
                    reduce_level)
from .quant import BinarizeSpec, QuantSpec, binarize, dequantize, quantize

__all__ = [
    "ShapeError",
    "TreeBundle",
    "TreeDenseLayer",
    "TreeConvLayer",
    "FpConvLayer",
    "MaxPoolLayer",
    "FlattenLayer",
    "DtreeNetwork",
    "EnsembleClassifier",
    "ENSEMBLE_THRESHOLDS",
    "build_model",
    "op_census",
    "calibrate",
]

ENSEMBLE_THRESHOLDS = (0.2, 0.4, 0.5, 0.6, 0.8)

# Images per evaluation slice. Fixed (not caller-chosen) so the reference
# forward and the netlist runtime always see identical array shapes.
EVAL_CHUNK = 512


class ShapeError(ValueError):
    """Input tensor does not match the network's expected shape."""


# ---------------------------------------------------------------------------
# layers


@dataclass
class TreeBundle:
    """Weights of one layer's trees: all units share a topology.

    leaf: (units, n); inner[l-1]: (units, size of level l-1); biases[l]:
    (units, size of level l). level_quant[l] is the shared QuantSpec of
    every node output at level l (the last entry is the layer's output
    activation spec).
    """

    topology: DtreeTopology
    leaf: np.ndarray
    inner: list
    biases: list
    inner_act: str
    root_act: str
    level_quant: list
    kind: str = "type1"

    @property
    def units(self) -> int:
        return self.leaf.shape[0]

    def level_act(self, level: int) -> str:
        return self.root_act if level == self.topology.depth - 1 else self.inner_act

    def node_count(self) -> int:
        return self.topology.num_nodes


@dataclass
class TreeDenseLayer:
    in_features: int
    units: int
    bundle: TreeBundle
    kind: str = "dense"


@dataclass
class TreeConvLayer:
    kind: str  # conv2d | depthwise_conv2d | pointwise_conv2d
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    bundle: TreeBundle

    def receptive_field(self) -> int:
        if self.kind == "depthwise_conv2d":
            return self.kernel * self.kernel
        if self.kind == "pointwise_conv2d":
            return self.in_channels
        return self.in_channels * self.kernel * self.kernel


@dataclass
class FpConvLayer:
    """Full-precision first layer (input pre-processing method 1).

    Runs as ordinary float arithmetic and quantizes its activations; the
    compiler carries it into the netlist as an explicitly flagged non-LUT
    preamble stage.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    weights: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    act: str
    out_quant: QuantSpec
    kind: str = "fp_conv2d"


@dataclass
class MaxPoolLayer:
    kernel: int
    stride: int
    kind: str = "maxpool2d"


@dataclass
class FlattenLayer:
    kind: str = "flatten"


@dataclass
class DtreeNetwork:
    name: str
    input_shape: tuple  # (features,) or (C, H, W)
    input_mode: str  # "fp_first" | "binarized"
    layers: list
    act_bits: int
    binarize_spec: BinarizeSpec | None = None
    metadata: dict = field(default_factory=dict)

    def forward(self, x, quantized: bool = True):
        """Class scores (dequantized root outputs of the final layer)."""
        return forward(self, x, quantized=quantized)

    def predict(self, x, quantized: bool = True):
        return predict(self, x, quantized=quantized)


# ---------------------------------------------------------------------------
# geometry helpers (shared with the compiler/runtime so wiring and windows
# can never drift apart)


def conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def window_indices(c: int, h: int, w: int, k: int, stride: int, pad: int,
                   channels=None) -> tuple:
    """Gather indices turning a padded (C,Hp,Wp) map into (positions, rf).

    The receptive-field axis is ordered channel-major then row-major within
    the kernel, matching torch.nn.functional.unfold. `channels` restricts
    the window to a channel subset (depthwise uses a single channel).
    """
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    if channels is None:
        channels = range(c)
    chan = np.asarray(list(channels), dtype=np.int64)
    ki, kj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    base = (chan[:, None, None] * hp * wp + ki[None] * wp + kj[None]).reshape(-1)
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    offs = (oi * stride * wp + oj * stride).reshape(-1)
    return offs[:, None] + base[None, :], (oh, ow)


def gather_windows(x: np.ndarray, k: int, stride: int, pad: int, channels=None):
    """(B, C, H, W) -> (B, positions, rf) plus the output spatial shape."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    idx, out_hw = window_indices(c, h, w, k, stride, pad, channels)
    return x.reshape(b, -1)[:, idx], out_hw


def maxpool_codes(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Blockwise max over (B, C, H, W); valid for codes or real values
    because the quantizer is monotone."""
    if stride != k:
        raise ConfigError("only non-overlapping pooling is supported")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pool kernel {k} does not divide {h}x{w}")
    return x.reshape(b, c, h // k, k, w // k, k).max(axis=(3, 5))


# ---------------------------------------------------------------------------
# reference evaluation (code domain)


def eval_fp_conv(layer: FpConvLayer, x: np.ndarray, quantized: bool = True):
    """Float preamble: windows x weights with sequential accumulation.

    Accumulates term by term (not BLAS) so results do not depend on batch
    blocking; the netlist runtime executes this identical function.
    """
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"expected (B,{layer.in_channels},H,W) input, got {x.shape}")
    win, (oh, ow) = gather_windows(x.astype(np.float64, copy=False),
                                   layer.kernel, layer.stride, layer.padding)
    b, p, n = win.shape
    wflat = layer.weights.reshape(layer.out_channels, -1).astype(np.float64, copy=False)
    acc = np.zeros((b, p, layer.out_channels))
    acc += layer.bias.astype(np.float64, copy=False)
    for j in range(n):
        acc += win[:, :, j, None] * wflat[None, None, :, j]
    vals = ACTIVATIONS[layer.act](acc)
    vals = np.moveaxis(vals, -1, 1).reshape(b, layer.out_channels, oh, ow)
    if not quantized:
        return vals, None
    codes = quantize(vals, layer.out_quant).astype(np.uint8)
    return dequantize(codes, layer.out_quant), codes


def eval_tree_levels(bundle: TreeBundle, unit_inputs, batch_shape: tuple,
                     quantized: bool = True, collectors=None):
    """Evaluate all levels of a layer's trees.

    unit_inputs(u) yields float64 input values of shape batch_shape+(n,)
    for unit u. Returns (values, codes) of shape batch_shape+(units,) for
    the roots. `collectors`, when given, is a list of per-level lists the
    raw post-activation values are appended to (used by calibration).
    """
    t = bundle.topology
    units = bundle.units
    out_vals = None
    out_codes = None
    state = [None] * units  # per-unit current-level values (float64)
    for u in range(units):
        state[u] = unit_inputs(u)
    for l in range(t.depth):
        spec = bundle.level_quant[l]
        act = ACTIVATIONS[bundle.level_act(l)]
        w_row = bundle.leaf if l == 0 else bundle.inner[l - 1]
        is_root = l == t.depth - 1
        if is_root:
            out_vals = np.empty(batch_shape + (units,))
            if quantized:
                out_codes = np.empty(batch_shape + (units,), dtype=np.uint8)
        for u in range(units):
            acc = reduce_level(state[u], w_row[u].astype(np.float64, copy=False),
                               bundle.biases[l][u].astype(np.float64, copy=False), t.fan_in)
            vals = act(acc)
            if collectors is not None:
                collectors[l].append(_subsample(vals))
            if quantized:
                codes = quantize(vals, spec)
                vals = dequantize(codes, spec)
                if is_root:
                    out_codes[..., u] = codes[..., 0].astype(np.uint8)
            if is_root:
                out_vals[..., u] = vals[..., 0]
            else:
                state[u] = vals
    return out_vals, out_codes


def _subsample(vals: np.ndarray, cap: int = 100_000) -> np.ndarray:
    flat = vals.reshape(-1)
    if flat.size <= cap:
        return flat.copy()
    return flat[:: flat.size // cap + 1].copy()


def _tree_dense_eval(layer: TreeDenseLayer, values: np.ndarray, quantized: bool,
                     collectors=None):
    if values.shape[-1] != layer.in_features:
        raise ShapeError(f"expected {layer.in_features} features, got {values.shape[-1]}")
    b = values.shape[0]
    vals, codes = eval_tree_levels(layer.bundle, lambda u: values, (b,),
                                   quantized=quantized, collectors=collectors)
    return vals, codes


def _tree_conv_eval(layer: TreeConvLayer, values: np.ndarray, quantized: bool,
                    collectors=None):
    if values.ndim != 4 or values.shape[1] != layer.in_channels:
        raise ShapeError(f"expected (B,{layer.in_channels},H,W), got {values.shape}")
    b = values.shape[0]
    if layer.kind == "depthwise_conv2d":
        if layer.out_channels != layer.in_channels:
            raise ConfigError("depthwise needs out_channels == in_channels")
        wins = []
        for ch in range(layer.in_channels):
            w, out_hw = gather_windows(values, layer.kernel, layer.stride,
                                       layer.padding, channels=[ch])
            wins.append(w)
        unit_inputs = lambda u: wins[u]
    else:
        win, out_hw = gather_windows(values, layer.kernel, layer.stride, layer.padding)
        unit_inputs = lambda u: win
    p = out_hw[0] * out_hw[1]
    vals, codes = eval_tree_levels(layer.bundle, unit_inputs, (b, p),
                                   quantized=quantized, collectors=collectors)
    vals = np.moveaxis(vals, -1, 1).reshape(b, layer.out_channels, *out_hw)
    if codes is not None:
        codes = np.moveaxis(codes, -1, 1).reshape(b, layer.out_channels, *out_hw)
    return vals, codes


def _forward_chunk(net: DtreeNetwork, x: np.ndarray, quantized: bool,
                   collectors=None):
    """One evaluation slice; returns (values, codes) after the last layer."""
    vals = x.astype(np.float64, copy=False)
    codes = None
    if net.input_mode == "binarized":
        bits = binarize(vals, net.binarize_spec)
        codes = bits
        vals = bits.astype(np.float64)  # input wires decode as {0.0, 1.0}
    for li, layer in enumerate(net.layers):
        coll = collectors[li] if collectors is not None else None
        if isinstance(layer, FpConvLayer):
            vals, codes = eval_fp_conv(layer, vals, quantized=quantized)
            if coll is not None:
                coll[0].append(_subsample(vals))
        elif isinstance(layer, TreeDenseLayer):
            if vals.ndim != 2:
                raise ShapeError(f"dense layer {li} expects flat input, got {vals.shape}")
            vals, codes = _tree_dense_eval(layer, vals, quantized, coll)
        elif isinstance(layer, TreeConvLayer):
            vals, codes = _tree_conv_eval(layer, vals, quantized, coll)
        elif isinstance(layer, MaxPoolLayer):
            vals = maxpool_codes(vals, layer.kernel, layer.stride)
            if codes is not None:
                codes = maxpool_codes(codes, layer.kernel, layer.stride)
        elif isinstance(layer, FlattenLayer):
            vals = vals.reshape(vals.shape[0], -1)
            if codes is not None:
                codes = codes.reshape(codes.shape[0], -1)
        else:
            raise ConfigError(f"unknown layer type {type(layer).__name__}")
    return vals, codes


def _check_input(net: DtreeNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    expect = tuple(net.input_shape)
    if x.shape == expect:
        x = x[None]
    if x.shape[1:] != expect:
        raise ShapeError(f"expected input shape {expect}, got {x.shape[1:]}")
    return x


def forward(net: DtreeNetwork, x, quantized: bool = True) -> np.ndarray:
    """Reference forward pass; returns real-valued class scores."""
    x = _check_input(net, x)
    outs = []
    for s in range(0, x.shape[0], EVAL_CHUNK):
        vals, _ = _forward_chunk(net, x[s:s + EVAL_CHUNK], quantized)
        outs.append(vals)
    return np.concatenate(outs, axis=0)


def forward_codes(net: DtreeNetwork, x) -> np.ndarray:
    """Quantized forward pass returning the final layer's integer codes."""
    x = _check_input(net, x)
    outs = []
    for s in range(0, x.shape[0], EVAL_CHUNK):
        _, codes = _forward_chunk(net, x[s:s + EVAL_CHUNK], quantized=True)
        outs.append(codes)
    return np.concatenate(outs, axis=0)


def predict(net: DtreeNetwork, x, quantized: bool = True) -> np.ndarray:
    """argmax class prediction; ties resolve to the lowest class index."""
    if quantized:
        return np.argmax(forward_codes(net, x), axis=1)
    return np.argmax(forward(net, x, quantized=False), axis=1)


# ---------------------------------------------------------------------------
# ensemble of binarization thresholds


@dataclass
class EnsembleClassifier:
    """Five networks fed the same image binarized at five thresholds, joined
    by one learned single-node tree per class whose sign is the class bit.

    The combiner's pre-sign sum is kept as an 8-bit code so the compiled
    netlist can reproduce the tie-break rule (highest pre-sign sum) exactly.
    """

    members: list
    thresholds: tuple
    combiner_weights: np.ndarray  # (classes, members)
    combiner_biases: np.ndarray  # (classes,)
    combiner_spec: QuantSpec
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.combiner_weights.shape[0]

    def member_codes(self, x) -> np.ndarray:
        """(B, members, classes) sign bits of every member network."""
        return np.stack([forward_codes(m, x) for m in self.members], axis=1)

    def combiner_codes(self, x) -> np.ndarray:
        mem = self.member_codes(x)  # (B, M, C) codes in {0,1}
        one_bit = QuantSpec(bits=1, lo=-1.0, hi=1.0)
        vals = dequantize(mem.astype(np.int64), one_bit)  # {-1,+1}
        b = mem.shape[0]
        acc = np.zeros((b, self.n_classes))
        acc += self.combiner_biases.astype(np.float64, copy=False)
        for m in range(len(self.members)):
            acc += vals[:, m, :] * self.combiner_weights[:, m].astype(np.float64, copy=False)
        return quantize(acc, self.combiner_spec)

    def class_bits(self, x) -> np.ndarray:
        codes = self.combiner_codes(x)
        return (dequantize(codes, self.combiner_spec) > 0.0).astype(np.uint8)

    def predict(self, x) -> np.ndarray:
        """Class of the single set bit; ties and all-zero rows fall back to
        the highest quantized pre-sign sum (argmax of the combiner codes,
        which subsumes both rules since codes order exactly as sums)."""
        return np.argmax(self.combiner_codes(x), axis=1)


# ---------------------------------------------------------------------------
# builders


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    # weights live on the float32 grid (training runs in float32 and the
    # model file stores float32), held in float64 buffers for evaluation
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


def make_tree_bundle(n: int, units: int, fan_in: int, kind: str, inner_act: str,
                     root_act: str, level_quant, rng=None) -> TreeBundle:
    """Fresh bundle; Type-II inner weights start at 1 + noise so training
    begins near the Type-I equivalence point."""
    t = build_topology(n, fan_in)
    rng = rng or np.random.default_rng(0)
    leaf = _he_uniform(rng, (units, n), n)
    inner, biases = [], []
    for l in range(t.depth):
        if l > 0:
            prev = t.layer_sizes[l - 1]
            if kind == "type1":
                inner.append(np.ones((units, prev)))
            else:
                noisy = 1.0 + 0.1 * rng.standard_normal((units, prev))
                inner.append(noisy.astype(np.float32).astype(np.float64))
        biases.append(np.zeros((units, t.layer_sizes[l])))
    if isinstance(level_quant, QuantSpec):
        level_quant = [level_quant] * t.depth
    return TreeBundle(topology=t, leaf=leaf, inner=inner, biases=biases,
                      inner_act=inner_act, root_act=root_act,
                      level_quant=list(level_quant), kind=kind)


def _sign_mlp(name: str, dims: list, fan_in: int, seed: int) -> DtreeNetwork:
    rng = np.random.default_rng(seed)
    one_bit = QuantSpec(bits=1, lo=-1.0, hi=1.0)
    layers = []
    for i in range(len(dims) - 1):
        bundle = make_tree_bundle(dims[i], dims[i + 1], fan_in, "type2",
                                  "sign", "sign", one_bit, rng)
        layers.append(TreeDenseLayer(in_features=dims[i], units=dims[i + 1], bundle=bundle))
    return DtreeNetwork(name=name, input_shape=(dims[0],), input_mode="binarized",
                        layers=layers, act_bits=1,
                        binarize_spec=BinarizeSpec(0.5))


def _lenet5(fan_in: int, act_bits: int, seed: int) -> DtreeNetwork:
    """32x32-padded stack: conv 6@5x5 / pool / conv 16@5x5 / pool / 120 / 84 / 10,
    ReLU activations, max pooling, float-precision first layer."""
    rng = np.random.default_rng(seed)

    def spec(lo, hi):
        return QuantSpec(bits=act_bits, lo=lo, hi=hi)

    def levels(n, root_lo, root_hi):
        depth = build_topology(n, fan_in).depth
        return [spec(-4.0, 4.0)] * (depth - 1) + [spec(root_lo, root_hi)]

    conv1 = FpConvLayer(in_channels=1, out_channels=6, kernel=5, stride=1, padding=2,
                        weights=_he_uniform(rng, (6, 1, 5, 5), 25), bias=np.zeros(6),
                        act="relu", out_quant=spec(0.0, 4.0))
    conv2 = TreeConvLayer(kind="conv2d", in_channels=6, out_channels=16, kernel=5,
                          stride=1, padding=0,
                          bundle=make_tree_bundle(150, 16, fan_in, "type1", "identity",
                                                  "relu", levels(150, 0.0, 4.0), rng))
    fc1 = TreeDenseLayer(in_features=400, units=120,
                         bundle=make_tree_bundle(400, 120, fan_in, "type1", "identity",
                                                 "relu", levels(400, 0.0, 4.0), rng))
    fc2 = TreeDenseLayer(in_features=120, units=84,
                         bundle=make_tree_bundle(120, 84, fan_in, "type1", "identity",
                                                 "relu", levels(120, 0.0, 4.0), rng))
    fc3 = TreeDenseLayer(in_features=84, units=10,
                         bundle=make_tree_bundle(84, 10, fan_in, "type1", "identity",
                                                 "identity", levels(84, -8.0, 8.0), rng))
    return DtreeNetwork(
        name="lenet5", input_shape=(1, 28, 28), input_mode="fp_first",
        layers=[conv1, MaxPoolLayer(2, 2), conv2, MaxPoolLayer(2, 2),
                FlattenLayer(), fc1, fc2, fc3],
        act_bits=act_bits)


def build_model(name: str, fan_in: int = 6, act_bits: int = 1, seed: int = 0) -> DtreeNetwork:
    """Named architectures. mlp1/mlp2 are the binarized-input classifiers
    (28x28x1-10 and 28x28x1-216-10, sign outputs, Type-II trees); lenet5
    keeps its first layer in float and quantizes everything after."""
    if name == "mlp1":
        if act_bits != 1:
            raise ConfigError("mlp1 is a binarized model; act_bits must be 1")
        return _sign_mlp("mlp1", [784, 10], fan_in, seed)
    if name == "mlp2":
        if act_bits != 1:
            raise ConfigError("mlp2 is a binarized model; act_bits must be 1")
        return _sign_mlp("mlp2", [784, 216, 10], fan_in, seed)
    if name == "lenet5":
        return _lenet5(fan_in, act_bits, seed)
    raise ConfigError(f"unknown model {name!r}; expected mlp1, mlp2, or lenet5")


def build_ensemble(structure: str, fan_in: int = 6, seed: int = 0,
                   thresholds=ENSEMBLE_THRESHOLDS) -> EnsembleClassifier:
    rng = np.random.default_rng(seed)
    members = []
    for i, thr in enumerate(thresholds):
        net = build_model(structure, fan_in=fan_in, act_bits=1,
                          seed=int(rng.integers(2 ** 31)))
        net.binarize_spec = BinarizeSpec(thr)
        net.name = f"{structure}-member{i}"
        members.append(net)
    return EnsembleClassifier(
        members=members, thresholds=tuple(thresholds),
        combiner_weights=_he_uniform(rng, (10, len(thresholds)), len(thresholds)),
        combiner_biases=np.zeros(10),
        combiner_spec=QuantSpec(bits=8, lo=-8.0, hi=8.0),
        metadata={"structure": structure})


# ---------------------------------------------------------------------------
# operation census


def _conv_positions(layer, h, w):
    oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
    return oh, ow, oh * ow


def op_census(net: DtreeNetwork) -> dict:
    """Count reference-execution MACs/weight reads and compiled-execution
    tree nodes/table lookups for one input image."""
    shape = tuple(net.input_shape)
    rows = []
    for layer in net.layers:
        row = {"kind": layer.kind, "macs": 0, "weight_reads": 0, "tree_nodes": 0,
               "table_lookups": 0, "preamble": False, "memory_class": None,
               "tree_depth": 0, "positions": 1, "receptive_field": 0}
        if isinstance(layer, FpConvLayer):
            _, h, w = shape
            oh, ow, p = _conv_positions(layer, h, w)
            rf = layer.in_channels * layer.kernel * layer.kernel
            row.update(macs=p * layer.out_channels * rf, preamble=True,
                       memory_class="conv", positions=p, receptive_field=rf)
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, TreeConvLayer):
            _, h, w = shape
            oh, ow, p = _conv_positions(layer, h, w)
            rf = layer.receptive_field()
            nodes = layer.bundle.node_count()
            row.update(macs=p * layer.out_channels * rf,
                       tree_nodes=layer.out_channels * nodes,
                       table_lookups=p * layer.out_channels * nodes,
                       memory_class="conv", positions=p, receptive_field=rf,
                       tree_depth=layer.bundle.topology.depth)
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, TreeDenseLayer):
            nodes = layer.bundle.node_count()
            row.update(macs=layer.units * layer.in_features,
                       tree_nodes=layer.units * nodes,
                       table_lookups=layer.units * nodes,
                       memory_class="dense", receptive_field=layer.in_features,
                       tree_depth=layer.bundle.topology.depth)
            shape = (layer.units,)
        elif isinstance(layer, MaxPoolLayer):
            c, h, w = shape
            shape = (c, h // layer.kernel, w // layer.kernel)
        elif isinstance(layer, FlattenLayer):
            shape = (int(np.prod(shape)),)
        row["weight_reads"] = row["macs"]
        rows.append(row)
    totals = {k: sum(r[k] for r in rows)
              for k in ("macs", "weight_reads", "tree_nodes", "table_lookups")}
    totals["preamble_macs"] = sum(r["macs"] for r in rows if r["preamble"])
    totals["layers"] = rows
    return totals


def ensemble_census(ens: EnsembleClassifier) -> dict:
    member_rows = [op_census(m) for m in ens.members]
    combiner = {"kind": "combiner", "macs": ens.combiner_weights.size,
                "weight_reads": ens.combiner_weights.size,
                "tree_nodes": ens.n_classes, "table_lookups": ens.n_classes,
                "preamble": False, "memory_class": "dense", "tree_depth": 1,
                "positions": 1, "receptive_field": len(ens.members)}
    rows = [r for m in member_rows for r in m["layers"]] + [combiner]
    totals = {k: sum(r[k] for r in rows)
              for k in ("macs", "weight_reads", "tree_nodes", "table_lookups")}
    totals["preamble_macs"] = 0
    totals["layers"] = rows
    return totals


# ---------------------------------------------------------------------------
# range calibration


def calibrate(net: DtreeNetwork, images: np.ndarray, low_pct: float = 0.1,
              high_pct: float = 99.9) -> DtreeNetwork:
    """Set every quantizer range from activation percentiles.

    Runs one unquantized pass over a calibration batch, collects each
    level's post-activation values (subsampled), and sets [lo, hi] to the
    given percentiles (lo clamps up to 0 for nonnegative levels). Ranges
    are per layer level, never per channel or unit.
    """
    x = _check_input(net, images)
    collectors = []
    for layer in net.layers:
        if isinstance(layer, FpConvLayer):
            collectors.append([[]])
        elif isinstance(layer, (TreeDenseLayer, TreeConvLayer)):
            collectors.append([[] for _ in range(layer.bundle.topology.depth)])
        else:
            collectors.append(None)
    for s in range(0, x.shape[0], EVAL_CHUNK):
        _forward_chunk(net, x[s:s + EVAL_CHUNK], quantized=False,
                       collectors=collectors)

    def spec_from(samples, bits):
        vals = np.concatenate(samples)
        lo = float(np.percentile(vals, low_pct))
        hi = float(np.percentile(vals, high_pct))
        if lo > 0.0:
            lo = 0.0
        if hi <= lo:
            hi = lo + 1e-6
        return QuantSpec(bits=bits, lo=lo, hi=hi)

    for layer, coll in zip(net.layers, collectors):
        if isinstance(layer, FpConvLayer):
            layer.out_quant = spec_from(coll[0], layer.out_quant.bits)
        elif isinstance(layer, (TreeDenseLayer, TreeConvLayer)):
            bundle = layer.bundle
            bundle.level_quant = [spec_from(coll[l], bundle.level_quant[l].bits)
                                  for l in range(bundle.topology.depth)]
    return net
