"""Model file format: one self-describing JSON document per model.

Weight arrays travel as base64 little-endian float32 so stored weights are
bit-identical across save/load (no text-float round trip); quantizer
ranges stay full float64 (JSON numbers round-trip exactly via repr).
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

from .dtree import ConfigError
from .network import (DtreeNetwork, EnsembleClassifier, FlattenLayer, FpConvLayer,
                      MaxPoolLayer, TreeBundle, TreeConvLayer, TreeDenseLayer)
from .dtree import DtreeTopology
from .quant import BinarizeSpec, QuantSpec

__all__ = ["save_model", "load_model", "model_to_json", "model_from_json",
           "model_hash", "encode_array", "decode_array"]

FORMAT = "dtnn-model"
ENSEMBLE_FORMAT = "dtnn-ensemble"
VERSION = 1


def encode_array(a: np.ndarray, dtype: str = "<f4") -> dict:
    a = np.ascontiguousarray(a.astype(dtype))
    return {"dtype": dtype, "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).copy()


def _f64(d: dict) -> np.ndarray:
    return decode_array(d).astype(np.float64)


def _bundle_json(b: TreeBundle) -> dict:
    return {
        "n_inputs": b.topology.n_inputs,
        "fan_in": b.topology.fan_in,
        "tree_kind": b.kind,
        "inner_act": b.inner_act,
        "root_act": b.root_act,
        "leaf": encode_array(b.leaf),
        "inner": [encode_array(w) for w in b.inner],
        "biases": [encode_array(bb) for bb in b.biases],
        "level_quant": [q.to_json() for q in b.level_quant],
    }


def _bundle_from(d: dict) -> TreeBundle:
    from .dtree import build_topology
    t = build_topology(int(d["n_inputs"]), int(d["fan_in"]))
    return TreeBundle(
        topology=t,
        leaf=_f64(d["leaf"]),
        inner=[_f64(w) for w in d["inner"]],
        biases=[_f64(b) for b in d["biases"]],
        inner_act=d["inner_act"], root_act=d["root_act"],
        level_quant=[QuantSpec.from_json(q) for q in d["level_quant"]],
        kind=d["tree_kind"])


def _layer_json(layer) -> dict:
    if isinstance(layer, FpConvLayer):
        return {"kind": "fp_conv2d", "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding, "act": layer.act,
                "weights": encode_array(layer.weights), "bias": encode_array(layer.bias),
                "out_quant": layer.out_quant.to_json()}
    if isinstance(layer, TreeDenseLayer):
        return {"kind": "dense", "in_features": layer.in_features,
                "units": layer.units, "bundle": _bundle_json(layer.bundle)}
    if isinstance(layer, TreeConvLayer):
        return {"kind": layer.kind, "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding,
                "bundle": _bundle_json(layer.bundle)}
    if isinstance(layer, MaxPoolLayer):
        return {"kind": "maxpool2d", "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, FlattenLayer):
        return {"kind": "flatten"}
    raise ConfigError(f"cannot serialize layer {type(layer).__name__}")


def _layer_from(d: dict):
    kind = d["kind"]
    if kind == "fp_conv2d":
        return FpConvLayer(
            in_channels=d["in_channels"], out_channels=d["out_channels"],
            kernel=d["kernel"], stride=d["stride"], padding=d["padding"],
            weights=_f64(d["weights"]), bias=_f64(d["bias"]), act=d["act"],
            out_quant=QuantSpec.from_json(d["out_quant"]))
    if kind == "dense":
        return TreeDenseLayer(in_features=d["in_features"], units=d["units"],
                              bundle=_bundle_from(d["bundle"]))
    if kind in ("conv2d", "depthwise_conv2d", "pointwise_conv2d"):
        return TreeConvLayer(kind=kind, in_channels=d["in_channels"],
                             out_channels=d["out_channels"], kernel=d["kernel"],
                             stride=d["stride"], padding=d["padding"],
                             bundle=_bundle_from(d["bundle"]))
    if kind == "maxpool2d":
        return MaxPoolLayer(kernel=d["kernel"], stride=d["stride"])
    if kind == "flatten":
        return FlattenLayer()
    raise ConfigError(f"unknown layer kind {kind!r} in model file")


def model_to_json(model) -> dict:
    if isinstance(model, EnsembleClassifier):
        doc = {
            "format": ENSEMBLE_FORMAT, "version": VERSION,
            "thresholds": list(model.thresholds),
            "members": [model_to_json(m) for m in model.members],
            "combiner": {"weights": encode_array(model.combiner_weights),
                         "biases": encode_array(model.combiner_biases),
                         "spec": model.combiner_spec.to_json()},
            "metadata": model.metadata,
        }
    elif isinstance(model, DtreeNetwork):
        doc = {
            "format": FORMAT, "version": VERSION,
            "name": model.name,
            "input_shape": list(model.input_shape),
            "input_mode": model.input_mode,
            "act_bits": model.act_bits,
            "binarize": model.binarize_spec.to_json() if model.binarize_spec else None,
            "layers": [_layer_json(l) for l in model.layers],
            "metadata": model.metadata,
        }
    else:
        raise ConfigError(f"cannot serialize {type(model).__name__}")
    doc["hash"] = _hash_doc(doc)
    return doc


def model_from_json(doc: dict):
    fmt = doc.get("format")
    if fmt == ENSEMBLE_FORMAT:
        members = [model_from_json(m) for m in doc["members"]]
        comb = doc["combiner"]
        return EnsembleClassifier(
            members=members, thresholds=tuple(doc["thresholds"]),
            combiner_weights=_f64(comb["weights"]),
            combiner_biases=_f64(comb["biases"]),
            combiner_spec=QuantSpec.from_json(comb["spec"]),
            metadata=doc.get("metadata", {}))
    if fmt == FORMAT:
        return DtreeNetwork(
            name=doc["name"], input_shape=tuple(doc["input_shape"]),
            input_mode=doc["input_mode"],
            layers=[_layer_from(l) for l in doc["layers"]],
            act_bits=doc["act_bits"],
            binarize_spec=BinarizeSpec.from_json(doc["binarize"]) if doc["binarize"] else None,
            metadata=doc.get("metadata", {}))
    raise ConfigError(f"not a model document (format={fmt!r})")


def _hash_doc(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "hash"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def model_hash(model) -> str:
    return model_to_json(model)["hash"]


def save_model(model, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh)


def load_model(path: str):
    with open(path) as fh:
        return model_from_json(json.load(fh))
