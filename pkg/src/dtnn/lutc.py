"""Compile trained networks into lookup-table netlists and run them.

Every tree node becomes one table: its input is the concatenation of the
children's codes (child 0 in the least-significant bits), its entries are
produced by exhaustively enumerating all child-code combinations and
replaying the node's float64 arithmetic (dequantize, weighted sum, bias,
activation, requantize). Because the reference forward pass uses the same
arithmetic on the same code grid, executing the netlist is bit-exact
against it, not approximately equal.

A float-precision first layer (input method 1) is carried as an explicitly
flagged preamble stage: its weights ride inside the netlist and run in
float at execution time. Pooling stages move codes around (max of codes
equals max of values under the monotone quantizer) and perform no data
arithmetic, as the LUT execution contract requires.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import __version__
from .dtree import ACTIVATIONS, ConfigError
from .network import (DtreeNetwork, EnsembleClassifier, FlattenLayer, FpConvLayer,
                      MaxPoolLayer, TreeConvLayer, TreeDenseLayer, conv_out_hw,
                      eval_fp_conv, gather_windows, maxpool_codes, window_indices)
from .quant import BinarizeSpec, QuantSpec, binarize, dequantize, quantize
from .modelio import decode_array, encode_array, model_hash

__all__ = [
    "CompileError",
    "NetlistFormatError",
    "LutNetlist",
    "compile_network",
    "execute",
    "predict",
    "execute_literal",
    "estimate_six_luts",
    "dynamic_six_luts",
    "dynamic_lookups",
    "total_table_bits",
    "export_netlist",
    "import_netlist",
    "export_debug_json",
]

MAGIC = b"DTNNLUT1"
FORMAT_VERSION = 1
DEFAULT_LIMIT_BITS = 20


class CompileError(ValueError):
    """A tree node cannot be lowered to a table under the size limit."""


class NetlistFormatError(IOError):
    """Corrupt, truncated, or wrong-version netlist file."""


# ---------------------------------------------------------------------------
# netlist structure


@dataclass
class LutLevel:
    """Tables of one tree level across all units of a layer.

    Nodes with the full fan-in share a rectangular entry array
    (units, n_full, 2**in_bits_full); a ragged final node, when the level
    has one, gets its own (units, 2**in_bits_ragged) array.
    """

    in_bits_full: int
    k_full: int
    full: np.ndarray | None  # uint8 (units, n_full, 2**in_bits_full)
    in_bits_ragged: int
    k_ragged: int
    ragged: np.ndarray | None  # uint8 (units, 2**in_bits_ragged)
    out_bits: int
    size: int  # node count of this level

    def node_tables(self, unit: int):
        for i in range(self.size):
            if self.full is not None and i < self.full.shape[1]:
                yield i, self.k_full, self.in_bits_full, self.full[unit, i]
            else:
                yield i, self.k_ragged, self.in_bits_ragged, self.ragged[unit]


@dataclass
class FpStage:
    layer: FpConvLayer
    in_shape: tuple
    out_shape: tuple
    kind: str = "fp_preamble"


@dataclass
class PoolStage:
    kernel: int
    stride: int
    in_shape: tuple
    out_shape: tuple
    kind: str = "maxpool2d"


@dataclass
class FlattenStage:
    in_shape: tuple
    out_shape: tuple
    kind: str = "flatten"


@dataclass
class LutLayerStage:
    kind: str  # dense | conv2d | depthwise_conv2d | pointwise_conv2d
    units: int
    fan_in: int
    level_sizes: tuple
    n_inputs: int
    in_bits: int  # bits of the level-0 child wires
    levels: list  # list[LutLevel]
    in_shape: tuple
    out_shape: tuple
    conv_geometry: dict | None = None  # kernel/stride/padding/out_hw for conv kinds

    def positions(self) -> int:
        if self.conv_geometry is None:
            return 1
        oh, ow = self.conv_geometry["out_hw"]
        return oh * ow


@dataclass
class CombinerStage:
    n_classes: int
    n_members: int
    tables: np.ndarray  # uint8 (classes, 2**members)
    out_bits: int
    kind: str = "combiner"


@dataclass
class LutNetlist:
    kind: str  # "network" | "ensemble"
    input_mode: str  # "fp" | "binarized"
    input_shape: tuple
    thresholds: tuple | None  # one per member for ensembles, or a 1-tuple
    member_stages: list  # list of stage lists; a plain network has one stream
    combiner: CombinerStage | None
    output_spec: QuantSpec
    model_hash: str
    compile_options: dict
    tool_version: str = __version__

    def all_stages(self):
        for m, stages in enumerate(self.member_stages):
            for s in stages:
                yield m, s

    def predict(self, x) -> np.ndarray:
        return predict(self, x)


# ---------------------------------------------------------------------------
# compilation


def _enum_child_values(k: int, child_bits: int, child_spec: QuantSpec) -> np.ndarray:
    """(k, 2**(k*child_bits)) dequantized values of every child-code combo;
    child j occupies bits [j*child_bits, (j+1)*child_bits)."""
    n = 1 << (k * child_bits)
    idx = np.arange(n, dtype=np.int64)
    mask = (1 << child_bits) - 1
    vals = np.empty((k, n))
    for j in range(k):
        vals[j] = dequantize((idx >> (j * child_bits)) & mask, child_spec)
    return vals


def _node_entries(weights: np.ndarray, bias: float, act: str, out_spec: QuantSpec,
                  enum_vals: np.ndarray) -> np.ndarray:
    """Entries of one node's table. Replays the reference accumulation
    order exactly: zero, add bias, then add each weighted child in order."""
    acc = np.zeros(enum_vals.shape[1])
    acc += bias
    for j in range(weights.shape[0]):
        acc += weights[j] * enum_vals[j]
    return quantize(ACTIVATIONS[act](acc), out_spec).astype(np.uint8)


def _check_limit(k: int, child_bits: int, limit_bits: int, node_name: str, fan_in: int):
    in_bits = k * child_bits
    if in_bits > limit_bits:
        raise CompileError(
            f"node {node_name} needs a {in_bits}-bit table ({k} children x "
            f"{child_bits} bits) which exceeds the {limit_bits}-bit limit; "
            f"reduce fan_in (currently {fan_in}) or act_bits (currently {child_bits})")


def _compile_bundle(bundle, layer_name: str, in_bits: int, in_spec: QuantSpec,
                    limit_bits: int) -> list:
    t = bundle.topology
    units = bundle.units
    levels = []
    child_spec = in_spec
    child_bits = in_bits
    for l in range(t.depth):
        prev = t.prev_count(l)
        size = t.layer_sizes[l]
        k_ragged = prev - (size - 1) * t.fan_in
        n_full = size if k_ragged == t.fan_in else size - 1
        out_spec = bundle.level_quant[l]
        act = bundle.level_act(l)
        _check_limit(min(t.fan_in, prev), child_bits, limit_bits,
                     f"{layer_name}/level{l}/node0", t.fan_in)
        w_row = bundle.leaf if l == 0 else bundle.inner[l - 1]
        full = None
        if n_full:
            kf = t.fan_in
            enum_full = _enum_child_values(kf, child_bits, child_spec)
            full = np.empty((units, n_full, enum_full.shape[1]), dtype=np.uint8)
            for u in range(units):
                wu = w_row[u].astype(np.float64, copy=False)
                bu = bundle.biases[l][u].astype(np.float64, copy=False)
                for i in range(n_full):
                    full[u, i] = _node_entries(wu[i * kf:(i + 1) * kf], bu[i], act,
                                               out_spec, enum_full)
        ragged = None
        if k_ragged != t.fan_in:
            _check_limit(k_ragged, child_bits, limit_bits,
                         f"{layer_name}/level{l}/node{size - 1}", t.fan_in)
            enum_r = _enum_child_values(k_ragged, child_bits, child_spec)
            ragged = np.empty((units, enum_r.shape[1]), dtype=np.uint8)
            s = (size - 1) * t.fan_in
            for u in range(units):
                wu = w_row[u].astype(np.float64, copy=False)
                bu = bundle.biases[l][u].astype(np.float64, copy=False)
                ragged[u] = _node_entries(wu[s:s + k_ragged], bu[size - 1], act,
                                          out_spec, enum_r)
        levels.append(LutLevel(
            in_bits_full=t.fan_in * child_bits, k_full=t.fan_in, full=full,
            in_bits_ragged=k_ragged * child_bits, k_ragged=k_ragged, ragged=ragged,
            out_bits=out_spec.bits, size=size))
        child_spec = out_spec
        child_bits = out_spec.bits
    return levels


def _compile_stream(net: DtreeNetwork, limit_bits: int, member: int | None) -> tuple:
    """Lower one network's layer list; returns (stages, output QuantSpec)."""
    stages = []
    prefix = f"member{member}/" if member is not None else ""
    if net.input_mode == "binarized":
        shape = tuple(net.input_shape)
        spec = QuantSpec(bits=1, lo=0.0, hi=1.0)  # bit wires decode as {0, 1}
    else:
        shape = tuple(net.input_shape)
        spec = None
    for li, layer in enumerate(net.layers):
        name = f"{prefix}layer{li}[{layer.kind}]"
        if isinstance(layer, FpConvLayer):
            _, h, w = shape
            out_hw = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
            out_shape = (layer.out_channels, *out_hw)
            stages.append(FpStage(layer=layer, in_shape=shape, out_shape=out_shape))
            shape, spec = out_shape, layer.out_quant
        elif isinstance(layer, TreeDenseLayer):
            levels = _compile_bundle(layer.bundle, name, spec.bits, spec, limit_bits)
            stages.append(LutLayerStage(
                kind="dense", units=layer.units, fan_in=layer.bundle.topology.fan_in,
                level_sizes=layer.bundle.topology.layer_sizes,
                n_inputs=layer.in_features, in_bits=spec.bits, levels=levels,
                in_shape=shape, out_shape=(layer.units,)))
            shape, spec = (layer.units,), layer.bundle.level_quant[-1]
        elif isinstance(layer, TreeConvLayer):
            if layer.padding:
                raise CompileError(
                    f"node {name}: padded tree convolutions are not lowerable "
                    f"(padding cells are not wires); use padding=0")
            _, h, w = shape
            out_hw = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
            levels = _compile_bundle(layer.bundle, name, spec.bits, spec, limit_bits)
            stages.append(LutLayerStage(
                kind=layer.kind, units=layer.out_channels,
                fan_in=layer.bundle.topology.fan_in,
                level_sizes=layer.bundle.topology.layer_sizes,
                n_inputs=layer.receptive_field(), in_bits=spec.bits, levels=levels,
                in_shape=shape, out_shape=(layer.out_channels, *out_hw),
                conv_geometry={"kernel": layer.kernel, "stride": layer.stride,
                               "padding": layer.padding, "out_hw": out_hw}))
            shape, spec = (layer.out_channels, *out_hw), layer.bundle.level_quant[-1]
        elif isinstance(layer, MaxPoolLayer):
            c, h, w = shape
            out_shape = (c, h // layer.kernel, w // layer.kernel)
            stages.append(PoolStage(kernel=layer.kernel, stride=layer.stride,
                                    in_shape=shape, out_shape=out_shape))
            shape = out_shape
        elif isinstance(layer, FlattenLayer):
            out_shape = (int(np.prod(shape)),)
            stages.append(FlattenStage(in_shape=shape, out_shape=out_shape))
            shape = out_shape
        else:
            raise ConfigError(f"cannot compile layer type {type(layer).__name__}")
    if spec is None:
        raise CompileError("network has no quantized signal to compile")
    return stages, spec


def compile_network(model, limit_bits: int = DEFAULT_LIMIT_BITS) -> LutNetlist:
    """Lower a DtreeNetwork or EnsembleClassifier to a LUT netlist."""
    if isinstance(model, EnsembleClassifier):
        member_stages = []
        out_spec = None
        for m, net in enumerate(model.members):
            stages, out_spec = _compile_stream(net, limit_bits, m)
            member_stages.append(stages)
        enum_vals = _enum_child_values(len(model.members), 1, QuantSpec(1, -1.0, 1.0))
        tables = np.empty((model.n_classes, enum_vals.shape[1]), dtype=np.uint8)
        for c in range(model.n_classes):
            tables[c] = _node_entries(
                model.combiner_weights[c].astype(np.float64, copy=False),
                float(model.combiner_biases[c]), "identity", model.combiner_spec,
                enum_vals)
        return LutNetlist(
            kind="ensemble", input_mode="binarized",
            input_shape=tuple(model.members[0].input_shape),
            thresholds=tuple(model.thresholds), member_stages=member_stages,
            combiner=CombinerStage(n_classes=model.n_classes,
                                   n_members=len(model.members), tables=tables,
                                   out_bits=model.combiner_spec.bits),
            output_spec=model.combiner_spec, model_hash=model_hash(model),
            compile_options={"limit_bits": limit_bits})
    net = model
    stages, out_spec = _compile_stream(net, limit_bits, None)
    thresholds = None
    if net.input_mode == "binarized":
        thresholds = (net.binarize_spec.threshold,)
    return LutNetlist(
        kind="network", input_mode="fp" if net.input_mode == "fp_first" else "binarized",
        input_shape=tuple(net.input_shape), thresholds=thresholds,
        member_stages=[stages], combiner=None, output_spec=out_spec,
        model_hash=model_hash(net), compile_options={"limit_bits": limit_bits})


# ---------------------------------------------------------------------------
# execution (array path: indexing only, no arithmetic on data values)


def _combine_codes(blocks: np.ndarray, child_bits: int) -> np.ndarray:
    """Concatenate child codes little-endian: blocks (..., k) -> (...,) index."""
    idx = np.zeros(blocks.shape[:-1], dtype=np.int64)
    for j in range(blocks.shape[-1]):
        idx |= blocks[..., j].astype(np.int64) << (j * child_bits)
    return idx


def _exec_levels(stage: LutLayerStage, unit_codes) -> np.ndarray:
    """unit_codes(u): (batch..., n_inputs) uint8 codes. Returns root codes
    of shape (batch..., units)."""
    out = None
    for u in range(stage.units):
        cur = unit_codes(u)
        child_bits = stage.in_bits
        for lvl in stage.levels:
            nxt = np.empty(cur.shape[:-1] + (lvl.size,), dtype=np.uint8)
            if lvl.full is not None:
                nf = lvl.full.shape[1]
                blocks = cur[..., : nf * lvl.k_full].reshape(
                    cur.shape[:-1] + (nf, lvl.k_full))
                idx = _combine_codes(blocks, child_bits)
                nxt[..., :nf] = lvl.full[u][np.arange(nf), idx]
            if lvl.ragged is not None:
                idx = _combine_codes(cur[..., (lvl.size - 1) * lvl.k_full:], child_bits)
                nxt[..., -1] = lvl.ragged[u][idx]
            cur = nxt
            child_bits = lvl.out_bits
        if out is None:
            out = np.empty(cur.shape[:-1] + (stage.units,), dtype=np.uint8)
        out[..., u] = cur[..., 0]
    return out


def _exec_stream(stages: list, x: np.ndarray, input_mode: str,
                 threshold: float | None) -> np.ndarray:
    if input_mode == "binarized":
        codes = binarize(x, BinarizeSpec(threshold))
    else:
        codes = None
        floats = x
    for stage in stages:
        if isinstance(stage, FpStage):
            _, codes = eval_fp_conv(stage.layer, floats, quantized=True)
        elif isinstance(stage, PoolStage):
            codes = maxpool_codes(codes, stage.kernel, stage.stride)
        elif isinstance(stage, FlattenStage):
            codes = codes.reshape(codes.shape[0], -1)
        elif isinstance(stage, LutLayerStage):
            if stage.kind == "dense":
                root = _exec_levels(stage, lambda u: codes)
                codes = root
            else:
                geo = stage.conv_geometry
                if stage.kind == "depthwise_conv2d":
                    wins = [gather_windows(codes, geo["kernel"], geo["stride"],
                                           geo["padding"], channels=[ch])[0]
                            for ch in range(codes.shape[1])]
                    root = _exec_levels(stage, lambda u: wins[u])
                else:
                    win, _ = gather_windows(codes, geo["kernel"], geo["stride"],
                                            geo["padding"])
                    root = _exec_levels(stage, lambda u: win)
                oh, ow = geo["out_hw"]
                codes = np.moveaxis(root, -1, 1).reshape(root.shape[0], stage.units, oh, ow)
        else:
            raise NetlistFormatError(f"unknown stage kind {stage!r}")
    return codes


def execute(netlist: LutNetlist, x) -> np.ndarray:
    """Run the netlist; returns output codes (batch, n_outputs)."""
    x = np.asarray(x, dtype=np.float64)
    expect = tuple(netlist.input_shape)
    if x.shape == expect:
        x = x[None]
    if x.shape[1:] != expect:
        raise ConfigError(f"expected input shape {expect}, got {x.shape[1:]}")
    from .network import EVAL_CHUNK
    outs = []
    for s in range(0, x.shape[0], EVAL_CHUNK):
        chunk = x[s:s + EVAL_CHUNK]
        if netlist.kind == "ensemble":
            members = [_exec_stream(stages, chunk, "binarized", netlist.thresholds[m])
                       for m, stages in enumerate(netlist.member_stages)]
            bits = np.stack(members, axis=1)  # (B, M, C)
            comb = netlist.combiner
            idx = _combine_codes(np.moveaxis(bits, 1, 2), 1)  # (B, C)
            out = np.empty_like(idx, dtype=np.uint8)
            for c in range(comb.n_classes):
                out[:, c] = comb.tables[c][idx[:, c]]
            outs.append(out)
        else:
            thr = netlist.thresholds[0] if netlist.thresholds else None
            outs.append(_exec_stream(netlist.member_stages[0], chunk,
                                     netlist.input_mode, thr))
    return np.concatenate(outs, axis=0)


def predict(netlist: LutNetlist, x) -> np.ndarray:
    """argmax over output codes; ties resolve to the lowest class index,
    the same rule the reference forward uses."""
    return np.argmax(execute(netlist, x), axis=1)


# ---------------------------------------------------------------------------
# resource accounting


def iter_tables(netlist: LutNetlist):
    """Yield (name, in_bits, out_bits, entries, instances) per unique table."""
    for m, stage in netlist.all_stages():
        if not isinstance(stage, LutLayerStage):
            continue
        pos = stage.positions()
        prefix = f"member{m}/" if netlist.kind == "ensemble" else ""
        for l, lvl in enumerate(stage.levels):
            for u in range(stage.units):
                for i, k, in_bits, entries in lvl.node_tables(u):
                    yield (f"{prefix}{stage.kind}/unit{u}/level{l}/node{i}",
                           in_bits, lvl.out_bits, entries, pos)
    if netlist.combiner is not None:
        comb = netlist.combiner
        for c in range(comb.n_classes):
            yield (f"combiner/class{c}", comb.n_members, comb.out_bits,
                   comb.tables[c], 1)


def _six_luts_per_table(in_bits: int, out_bits: int) -> int:
    """Shannon-decomposition bound: per output bit, one 6-LUT when the
    table fits, otherwise 2**(k-6) leaves plus a 2**(k-6)-1 mux tree."""
    per_bit = 1 if in_bits <= 6 else (1 << (in_bits - 5)) - 1
    return out_bits * per_bit


def estimate_six_luts(netlist: LutNetlist) -> int:
    """6-LUT count of the netlist's unique tables (a resource estimate)."""
    return sum(_six_luts_per_table(ib, ob) for _, ib, ob, _, _ in iter_tables(netlist))


def dynamic_six_luts(netlist: LutNetlist) -> int:
    """6-LUT evaluations per inference (tables weighted by positions)."""
    return sum(_six_luts_per_table(ib, ob) * inst
               for _, ib, ob, _, inst in iter_tables(netlist))


def dynamic_lookups(netlist: LutNetlist) -> int:
    """Table lookups per inference (one per node instance)."""
    return sum(inst for *_, inst in iter_tables(netlist))


def total_table_bits(netlist: LutNetlist) -> int:
    return sum(ob * (1 << ib) for _, ib, ob, _, _ in iter_tables(netlist))


def resource_summary(netlist: LutNetlist) -> dict:
    return {
        "total_table_bits": total_table_bits(netlist),
        "six_lut_estimate": estimate_six_luts(netlist),
        "dynamic_six_luts_per_inference": dynamic_six_luts(netlist),
        "table_lookups_per_inference": dynamic_lookups(netlist),
        "unique_tables": sum(1 for _ in iter_tables(netlist)),
    }


# ---------------------------------------------------------------------------
# wiring enumeration (shared by export, import validation, the debug JSON,
# and the literal interpreter)


def _iter_wiring(netlist: LutNetlist):
    """Yield (instance_name, child_wire_ids, out_wire_id, payload) for every
    wire-producing instance, in topological order. Payload is the table for
    LUT instances, ("pool",) for pools, ("fp", stage) for preamble outputs,
    ("input",) for primary inputs.

    Wire ids are dense and ascending, so 'every child id < own id' is the
    topological-order audit.
    """
    next_wire = 0

    def take():
        nonlocal next_wire
        wid = next_wire
        next_wire += 1
        return wid

    member_out_wires = []
    for m, stages in enumerate(netlist.member_stages):
        tag = f"member{m}/" if netlist.kind == "ensemble" else ""
        if netlist.input_mode == "binarized":
            n = int(np.prod(netlist.input_shape))
            wires = np.empty(n, dtype=np.int64)
            for i in range(n):
                wires[i] = take()
                yield f"{tag}input/{i}", (), int(wires[i]), ("input", m, i)
        else:
            wires = None  # float inputs are not wires; the preamble makes the first
        for si, stage in enumerate(stages):
            name = f"{tag}stage{si}[{stage.kind}]"
            if isinstance(stage, FpStage):
                n = int(np.prod(stage.out_shape))
                wires = np.empty(n, dtype=np.int64)
                for i in range(n):
                    wires[i] = take()
                    yield f"{name}/out{i}", (), int(wires[i]), ("fp", stage, i)
            elif isinstance(stage, PoolStage):
                c, h, w = stage.in_shape
                grid = wires.reshape(c, h, w)
                k = stage.kernel
                oc, oh, ow = stage.out_shape
                out = np.empty((c, oh, ow), dtype=np.int64)
                for ch in range(c):
                    for y in range(oh):
                        for xx in range(ow):
                            kids = tuple(int(grid[ch, y * k + dy, xx * k + dx])
                                         for dy in range(k) for dx in range(k))
                            out[ch, y, xx] = take()
                            yield (f"{name}/c{ch}y{y}x{xx}", kids,
                                   int(out[ch, y, xx]), ("pool",))
                wires = out.reshape(-1)
            elif isinstance(stage, FlattenStage):
                continue  # pure renaming; flat order is already wire order
            elif isinstance(stage, LutLayerStage):
                if stage.kind == "dense":
                    unit_windows = [wires] * stage.units
                elif stage.kind == "depthwise_conv2d":
                    c, h, w = stage.in_shape
                    geo = stage.conv_geometry
                    unit_windows = []
                    for ch in range(c):
                        idx, _ = window_indices(c, h, w, geo["kernel"], geo["stride"],
                                                geo["padding"], channels=[ch])
                        unit_windows.append(wires[idx])  # (P, rf)
                else:
                    c, h, w = stage.in_shape
                    geo = stage.conv_geometry
                    idx, _ = window_indices(c, h, w, geo["kernel"], geo["stride"],
                                            geo["padding"])
                    unit_windows = [wires[idx]] * stage.units  # (P, rf)
                pos = stage.positions()
                # per-unit-and-position signal rows, advanced level by level
                rows = {}
                for u in range(stage.units):
                    win = unit_windows[u]
                    rows[u] = win.reshape(pos, -1) if win.ndim > 1 else win[None, :]
                root = np.empty((stage.units, pos), dtype=np.int64)
                for l, lvl in enumerate(stage.levels):
                    for u in range(stage.units):
                        prev_rows = rows[u]
                        new_rows = np.empty((prev_rows.shape[0], lvl.size), dtype=np.int64)
                        for i, k, in_bits, entries in lvl.node_tables(u):
                            s = i * lvl.k_full
                            for p in range(prev_rows.shape[0]):
                                kids = tuple(int(x) for x in prev_rows[p, s:s + k])
                                wid = take()
                                new_rows[p, i] = wid
                                yield (f"{name}/u{u}l{l}n{i}p{p}", kids, wid,
                                       ("lut", entries, in_bits, lvl.out_bits))
                        rows[u] = new_rows
                    if l == len(stage.levels) - 1:
                        for u in range(stage.units):
                            root[u] = rows[u][:, 0]
                if stage.conv_geometry is None:
                    wires = root[:, 0]
                else:
                    wires = root.reshape(-1)  # (units, positions) C-order == (c, y, x)
            else:
                raise NetlistFormatError(f"unknown stage {stage!r}")
        member_out_wires.append(wires)
    if netlist.combiner is not None:
        comb = netlist.combiner
        for c in range(comb.n_classes):
            kids = tuple(int(member_out_wires[m][c]) for m in range(comb.n_members))
            wid = take()
            yield (f"combiner/class{c}", kids, wid,
                   ("lut", comb.tables[c], comb.n_members, comb.out_bits))


def verify_wiring(netlist: LutNetlist) -> int:
    """Audit topological order: every instance's children must already be
    defined. Returns the number of wires."""
    count = 0
    for name, kids, out, _ in _iter_wiring(netlist):
        for kid in kids:
            if kid >= out or kid < 0:
                raise NetlistFormatError(f"dangling wire {kid} feeding {name}")
        if out != count:
            raise NetlistFormatError(f"non-contiguous wire id at {name}")
        count += 1
    return count


def execute_literal(netlist: LutNetlist, x) -> np.ndarray:
    """Wire-by-wire interpreter, used to cross-check the array executor on
    small netlists. The final stage must produce the output wires last
    (dense layer roots, or the combiner), which holds for every netlist
    this compiler emits."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(netlist.input_shape):
        x = x[None]
    outputs = []
    for b in range(x.shape[0]):
        values = []
        bin_cache = {}
        fp_cache = {}
        for name, kids, out, payload in _iter_wiring(netlist):
            tag = payload[0]
            assert out == len(values), "wire ids must be dense and ascending"
            if tag == "input":
                _, m, i = payload
                if m not in bin_cache:
                    bin_cache[m] = binarize(x[b].reshape(-1),
                                            BinarizeSpec(netlist.thresholds[m]))
                values.append(int(bin_cache[m][i]))
            elif tag == "fp":
                _, stage, i = payload
                if id(stage) not in fp_cache:
                    _, codes = eval_fp_conv(stage.layer, x[b:b + 1], quantized=True)
                    fp_cache[id(stage)] = codes.reshape(-1)
                values.append(int(fp_cache[id(stage)][i]))
            elif tag == "pool":
                values.append(max(values[k] for k in kids))
            else:
                _, entries, in_bits, out_bits = payload
                child_bits = in_bits // max(len(kids), 1)
                idx = 0
                for j, kid in enumerate(kids):
                    idx |= values[kid] << (j * child_bits)
                values.append(int(entries[idx]))
        if netlist.combiner is not None:
            n_out = netlist.combiner.n_classes
        else:
            n_out = int(np.prod(netlist.member_stages[0][-1].out_shape))
        outputs.append(values[-n_out:])
    return np.asarray(outputs, dtype=np.uint8)


# ---------------------------------------------------------------------------
# serialization


def _pack_entries(tables_2d: np.ndarray, out_bits: int) -> np.ndarray:
    """(N, L) uint8 codes -> (N, ceil(L*out_bits/8)) bytes, LSB-first."""
    n, length = tables_2d.shape
    bits = ((tables_2d[..., None] >> np.arange(out_bits, dtype=np.uint8)) & 1)
    return np.packbits(bits.reshape(n, length * out_bits).astype(np.uint8),
                       axis=1, bitorder="little")


def _unpack_entries(buf: np.ndarray, n: int, length: int, out_bits: int) -> np.ndarray:
    bits = np.unpackbits(buf.reshape(n, -1), axis=1, bitorder="little",
                         count=length * out_bits)
    bits = bits.reshape(n, length, out_bits)
    weights = (1 << np.arange(out_bits, dtype=np.uint8))
    return (bits * weights).sum(axis=2).astype(np.uint8)


def _spec_json(spec: QuantSpec) -> dict:
    return spec.to_json()


def _stage_header(stage, blob_cursor: list, blobs: list) -> dict:
    if isinstance(stage, FpStage):
        lyr = stage.layer
        return {"kind": "fp_preamble", "in_shape": stage.in_shape,
                "out_shape": stage.out_shape,
                "conv": {"in_channels": lyr.in_channels, "out_channels": lyr.out_channels,
                         "kernel": lyr.kernel, "stride": lyr.stride,
                         "padding": lyr.padding, "act": lyr.act},
                "weights": encode_array(lyr.weights.astype(np.float32)),
                "bias": encode_array(lyr.bias.astype(np.float32)),
                "out_quant": _spec_json(lyr.out_quant)}
    if isinstance(stage, PoolStage):
        return {"kind": "maxpool2d", "kernel": stage.kernel, "stride": stage.stride,
                "in_shape": stage.in_shape, "out_shape": stage.out_shape}
    if isinstance(stage, FlattenStage):
        return {"kind": "flatten", "in_shape": stage.in_shape,
                "out_shape": stage.out_shape}
    if isinstance(stage, LutLayerStage):
        levels = []
        for lvl in stage.levels:
            rec = {"size": lvl.size, "out_bits": lvl.out_bits,
                   "k_full": lvl.k_full, "in_bits_full": lvl.in_bits_full,
                   "k_ragged": lvl.k_ragged, "in_bits_ragged": lvl.in_bits_ragged,
                   "full": None, "ragged": None}
            if lvl.full is not None:
                u, nf, ln = lvl.full.shape
                packed = _pack_entries(lvl.full.reshape(u * nf, ln), lvl.out_bits)
                rec["full"] = {"offset": blob_cursor[0], "tables": u * nf,
                               "bytes_per_table": packed.shape[1]}
                blobs.append(packed.tobytes())
                blob_cursor[0] += len(blobs[-1])
            if lvl.ragged is not None:
                u, ln = lvl.ragged.shape
                packed = _pack_entries(lvl.ragged, lvl.out_bits)
                rec["ragged"] = {"offset": blob_cursor[0], "tables": u,
                                 "bytes_per_table": packed.shape[1]}
                blobs.append(packed.tobytes())
                blob_cursor[0] += len(blobs[-1])
            levels.append(rec)
        return {"kind": stage.kind, "units": stage.units, "fan_in": stage.fan_in,
                "level_sizes": stage.level_sizes, "n_inputs": stage.n_inputs,
                "in_bits": stage.in_bits, "in_shape": stage.in_shape,
                "out_shape": stage.out_shape, "conv_geometry": stage.conv_geometry,
                "levels": levels}
    raise NetlistFormatError(f"cannot serialize stage {stage!r}")


def export_netlist(netlist: LutNetlist, path: str) -> None:
    """Binary container: magic, version, header JSON, wiring section,
    packed table blobs, trailing CRC32 of everything before it."""
    blobs = []
    cursor = [0]
    header = {
        "kind": netlist.kind,
        "input_mode": netlist.input_mode,
        "input_shape": netlist.input_shape,
        "thresholds": netlist.thresholds,
        "output_spec": _spec_json(netlist.output_spec),
        "model_hash": netlist.model_hash,
        "compile_options": netlist.compile_options,
        "tool_version": netlist.tool_version,
        "members": [[_stage_header(s, cursor, blobs) for s in stages]
                    for stages in netlist.member_stages],
        "combiner": None,
        "resource": resource_summary(netlist),
    }
    if netlist.combiner is not None:
        comb = netlist.combiner
        packed = _pack_entries(comb.tables, comb.out_bits)
        header["combiner"] = {"n_classes": comb.n_classes, "n_members": comb.n_members,
                              "out_bits": comb.out_bits,
                              "tables": {"offset": cursor[0],
                                         "tables": comb.n_classes,
                                         "bytes_per_table": packed.shape[1]}}
        blobs.append(packed.tobytes())
        cursor[0] += len(blobs[-1])

    wiring = bytearray()
    for _, kids, _, _ in _iter_wiring(netlist):
        wiring += struct.pack("<I", len(kids))
        wiring += struct.pack(f"<{len(kids)}I", *kids) if kids else b""

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    crc = 0
    with open(path, "wb") as fh:
        def put(b: bytes):
            nonlocal crc
            crc = zlib.crc32(b, crc)
            fh.write(b)

        put(MAGIC)
        put(struct.pack("<I", FORMAT_VERSION))
        put(struct.pack("<Q", len(header_bytes)))
        put(header_bytes)
        put(struct.pack("<Q", len(wiring)))
        put(bytes(wiring))
        blob_bytes = b"".join(blobs)
        put(struct.pack("<Q", len(blob_bytes)))
        put(blob_bytes)
        fh.write(struct.pack("<I", crc))


def _parse_spec(d: dict) -> QuantSpec:
    return QuantSpec.from_json(d)


def _stage_from_header(rec: dict, blob: bytes):
    kind = rec["kind"]
    if kind == "fp_preamble":
        conv = rec["conv"]
        layer = FpConvLayer(
            in_channels=conv["in_channels"], out_channels=conv["out_channels"],
            kernel=conv["kernel"], stride=conv["stride"], padding=conv["padding"],
            weights=decode_array(rec["weights"]).astype(np.float64),
            bias=decode_array(rec["bias"]).astype(np.float64),
            act=conv["act"], out_quant=_parse_spec(rec["out_quant"]))
        return FpStage(layer=layer, in_shape=tuple(rec["in_shape"]),
                       out_shape=tuple(rec["out_shape"]))
    if kind == "maxpool2d":
        return PoolStage(kernel=rec["kernel"], stride=rec["stride"],
                         in_shape=tuple(rec["in_shape"]),
                         out_shape=tuple(rec["out_shape"]))
    if kind == "flatten":
        return FlattenStage(in_shape=tuple(rec["in_shape"]),
                            out_shape=tuple(rec["out_shape"]))
    levels = []
    units = rec["units"]
    for lr in rec["levels"]:
        full = ragged = None
        if lr["full"] is not None:
            meta = lr["full"]
            raw = np.frombuffer(blob, dtype=np.uint8,
                                count=meta["tables"] * meta["bytes_per_table"],
                                offset=meta["offset"])
            arr = _unpack_entries(raw, meta["tables"], 1 << lr["in_bits_full"],
                                  lr["out_bits"])
            full = arr.reshape(units, meta["tables"] // units, -1)
        if lr["ragged"] is not None:
            meta = lr["ragged"]
            raw = np.frombuffer(blob, dtype=np.uint8,
                                count=meta["tables"] * meta["bytes_per_table"],
                                offset=meta["offset"])
            ragged = _unpack_entries(raw, meta["tables"], 1 << lr["in_bits_ragged"],
                                     lr["out_bits"])
        levels.append(LutLevel(
            in_bits_full=lr["in_bits_full"], k_full=lr["k_full"], full=full,
            in_bits_ragged=lr["in_bits_ragged"], k_ragged=lr["k_ragged"],
            ragged=ragged, out_bits=lr["out_bits"], size=lr["size"]))
    geo = rec["conv_geometry"]
    if geo is not None:
        geo = dict(geo)
        geo["out_hw"] = tuple(geo["out_hw"])
    return LutLayerStage(
        kind=kind, units=units, fan_in=rec["fan_in"],
        level_sizes=tuple(rec["level_sizes"]), n_inputs=rec["n_inputs"],
        in_bits=rec["in_bits"], levels=levels, in_shape=tuple(rec["in_shape"]),
        out_shape=tuple(rec["out_shape"]), conv_geometry=geo)


def import_netlist(path: str) -> LutNetlist:
    """Load and fully validate a netlist file (CRC, version, wiring audit)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 8 + 4:
        raise NetlistFormatError(f"file too short to be a netlist: {path}")
    body, crc_stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise NetlistFormatError(f"checksum failure reading {path}")
    if body[:8] != MAGIC:
        raise NetlistFormatError(f"bad magic in {path}")
    off = 8
    version = struct.unpack_from("<I", body, off)[0]
    off += 4
    if version != FORMAT_VERSION:
        raise NetlistFormatError(
            f"netlist version {version} not supported (expected {FORMAT_VERSION})")
    hlen = struct.unpack_from("<Q", body, off)[0]
    off += 8
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    wlen = struct.unpack_from("<Q", body, off)[0]
    off += 8
    wiring_bytes = body[off:off + wlen]
    off += wlen
    blen = struct.unpack_from("<Q", body, off)[0]
    off += 8
    blob = body[off:off + blen]

    members = [[_stage_from_header(rec, blob) for rec in stages]
               for stages in header["members"]]
    combiner = None
    if header["combiner"] is not None:
        cr = header["combiner"]
        meta = cr["tables"]
        raw = np.frombuffer(blob, dtype=np.uint8,
                            count=meta["tables"] * meta["bytes_per_table"],
                            offset=meta["offset"])
        tables = _unpack_entries(raw, cr["n_classes"], 1 << cr["n_members"],
                                 cr["out_bits"])
        combiner = CombinerStage(n_classes=cr["n_classes"], n_members=cr["n_members"],
                                 tables=tables, out_bits=cr["out_bits"])
    netlist = LutNetlist(
        kind=header["kind"], input_mode=header["input_mode"],
        input_shape=tuple(header["input_shape"]),
        thresholds=tuple(header["thresholds"]) if header["thresholds"] else None,
        member_stages=members, combiner=combiner,
        output_spec=_parse_spec(header["output_spec"]),
        model_hash=header["model_hash"], compile_options=header["compile_options"],
        tool_version=header["tool_version"])

    # audit the stored wiring against the regenerated one
    off = 0
    for name, kids, out, _ in _iter_wiring(netlist):
        if off + 4 > len(wiring_bytes):
            raise NetlistFormatError(f"wiring section truncated at {name}")
        k = struct.unpack_from("<I", wiring_bytes, off)[0]
        off += 4
        stored = struct.unpack_from(f"<{k}I", wiring_bytes, off)
        off += 4 * k
        if stored != kids:
            raise NetlistFormatError(f"dangling or mismatched wiring at {name}")
        for kid in kids:
            if kid >= out:
                raise NetlistFormatError(f"dangling wire {kid} feeding {name}")
    if off != len(wiring_bytes):
        raise NetlistFormatError("trailing bytes in wiring section")
    return netlist


def export_debug_json(netlist: LutNetlist, path: str, max_in_bits: int = 16) -> None:
    """Lossless human-readable dump (tables as integer lists); refuses tables
    wider than max_in_bits inputs."""
    tables = []
    for name, kids, out, payload in _iter_wiring(netlist):
        if payload[0] == "lut":
            _, entries, in_bits, out_bits = payload
            if in_bits > max_in_bits:
                raise NetlistFormatError(
                    f"table {name} has {in_bits} input bits; debug JSON is lossless "
                    f"only up to {max_in_bits}")
            tables.append({"name": name, "wire": out, "children": list(kids),
                           "in_bits": in_bits, "out_bits": out_bits,
                           "entries": [int(e) for e in entries]})
        elif payload[0] == "pool":
            tables.append({"name": name, "wire": out, "children": list(kids),
                           "op": "max"})
        elif payload[0] in ("input", "fp"):
            tables.append({"name": name, "wire": out, "op": payload[0]})
    doc = {"kind": netlist.kind, "input_shape": netlist.input_shape,
           "thresholds": netlist.thresholds, "model_hash": netlist.model_hash,
           "output_spec": _spec_json(netlist.output_spec),
           "resource": resource_summary(netlist), "wires": tables}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
