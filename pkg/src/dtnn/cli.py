"""Operator surface: train, compile, infer, estimate.

Every command writes its products under --out and appends a manifest line
(JSON, one object per run) recording the command, configuration, seeds,
input/output hashes, tool version, and wall time. Exit codes: 0 success,
2 input error, 3 compile error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .cost import ConsistencyError, compare_to_paper, estimate, load_constants
from .dtree import ConfigError
from .lutc import (CompileError, NetlistFormatError, compile_network, execute,
                   export_debug_json, export_netlist, import_netlist, predict,
                   resource_summary)
from .mnist import MnistError, default_data_dir, load_mnist, read_idx_images
from .modelio import load_model, model_hash, save_model
from .network import (DtreeNetwork, EnsembleClassifier, ShapeError, ensemble_census,
                      forward_codes, op_census)
from .quant import QuantError
from .report import plot_history, write_cost_report, write_history
from .training import (LENET_FINETUNE_CONFIG, LENET_PRETRAIN_CONFIG, MLP1_CONFIG,
                       MLP2_CONFIG, TrainConfig, TrainingError, train_ensemble,
                       train_lenet5)

EXIT_INPUT = 2
EXIT_COMPILE = 3
EXIT_INTERNAL = 4

INPUT_ERRORS = (MnistError, ShapeError, ConfigError, QuantError, TrainingError,
                NetlistFormatError, ConsistencyError, FileNotFoundError,
                IsADirectoryError, ValueError)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _manifest(out_dir: str, command: str, config: dict, inputs: list, outputs: list,
              wall: float) -> None:
    entry = {
        "command": command,
        "config": config,
        "tool_version": __version__,
        "inputs": {p: _sha256(p) for p in inputs if os.path.exists(p)},
        "outputs": {p: _sha256(p) for p in outputs if os.path.exists(p)},
        "wall_seconds": round(wall, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "manifest.jsonl"), "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _resolve_data(args) -> str:
    data = getattr(args, "data", None) or default_data_dir()
    if not data:
        raise MnistError("no dataset directory: pass --data or set DTNN_DATA_DIR")
    return data


def _load_train_config(args, base: TrainConfig) -> TrainConfig:
    """Precedence: CLI flags over config file over built-in defaults."""
    values = dict(base.__dict__)
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)} in {args.config}")
        values.update(file_cfg)
    for key in ("lr", "batch_size", "epochs", "iterations", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    t0 = time.time()
    data_dir = _resolve_data(args)
    dataset = load_mnist(data_dir)
    os.makedirs(args.out, exist_ok=True)
    if args.model in ("mlp1", "mlp2"):
        base = MLP1_CONFIG if args.model == "mlp1" else MLP2_CONFIG
        cfg = _load_train_config(args, base)
        model, history = train_ensemble(cfg, args.model, dataset, fan_in=args.fan_in)
    elif args.model == "lenet5":
        cfg = _load_train_config(args, LENET_PRETRAIN_CONFIG)
        model, history = train_lenet5(
            dataset, act_bits=args.act_bits, fan_in=args.fan_in,
            pretrain=cfg, seed=cfg.seed)
    else:
        raise ConfigError(f"unknown model {args.model!r}")
    model_path = os.path.join(args.out, "model.json")
    hist_path = os.path.join(args.out, "history.csv")
    save_model(model, model_path)
    write_history(history, hist_path)
    plot_history(history, os.path.join(args.out, "history.png"),
                 title=f"{args.model} (seed {cfg.seed})")
    _manifest(args.out, "train", {"model": args.model, "act_bits": args.act_bits,
                                  "fan_in": args.fan_in, **cfg.__dict__},
              [], [model_path, hist_path, os.path.join(args.out, "history.png")],
              time.time() - t0)
    if history:
        print(f"final test accuracy {history[-1][3]:.4f}")
    print(f"wrote {model_path}")
    return 0


def cmd_compile(args) -> int:
    t0 = time.time()
    model = load_model(args.model)
    netlist = compile_network(model, limit_bits=args.limit_bits)
    os.makedirs(args.out, exist_ok=True)
    nl_path = os.path.join(args.out, "netlist.dtnnlut")
    export_netlist(netlist, nl_path)
    outputs = [nl_path]
    if args.debug_json:
        dbg = os.path.join(args.out, "netlist.debug.json")
        export_debug_json(netlist, dbg)
        outputs.append(dbg)
    summary = resource_summary(netlist)
    print(json.dumps(summary, indent=1))
    _manifest(args.out, "compile", {"model": args.model, "limit_bits": args.limit_bits},
              [args.model], outputs, time.time() - t0)
    return 0


def cmd_infer(args) -> int:
    t0 = time.time()
    netlist = import_netlist(args.netlist)
    labels = None
    if args.images:
        images = read_idx_images(args.images).astype(np.float64) / 255.0
    else:
        dataset = load_mnist(_resolve_data(args))
        images = np.asarray(dataset.test_images, dtype=np.float64)
        labels = np.asarray(dataset.test_labels)
    if netlist.input_mode == "fp":
        images = images.reshape(images.shape[0], *netlist.input_shape)
    else:
        images = images.reshape(images.shape[0], -1)
    os.makedirs(args.out, exist_ok=True)
    preds = []
    for s in range(0, images.shape[0], args.batch):
        preds.append(predict(netlist, images[s:s + args.batch]))
    preds = np.concatenate(preds)
    pred_path = os.path.join(args.out, "predictions.csv")
    with open(pred_path, "w") as fh:
        fh.write("index,prediction\n")
        for i, p in enumerate(preds):
            fh.write(f"{i},{int(p)}\n")
    if labels is not None:
        acc = float((preds == labels).mean())
        print(f"accuracy {acc:.4f} on {len(preds)} images")
    _manifest(args.out, "infer", {"netlist": args.netlist, "batch": args.batch},
              [args.netlist], [pred_path], time.time() - t0)
    print(f"wrote {pred_path}")
    return 0


def cmd_estimate(args) -> int:
    t0 = time.time()
    model = load_model(args.model)
    census = (ensemble_census(model) if isinstance(model, EnsembleClassifier)
              else op_census(model))
    census["model_hash"] = model_hash(model)
    netlist = None
    if args.netlist:
        netlist = import_netlist(args.netlist)
    constants = load_constants(args.constants)
    report = estimate(census, netlist, constants, weight_memory=args.memory)
    os.makedirs(args.out, exist_ok=True)
    paths = write_cost_report(report, os.path.join(args.out, "cost_report"))
    print(report.format_table())
    if args.paper_row:
        cmp = compare_to_paper(report, args.paper_row, constants)
        cmp_path = os.path.join(args.out, "paper_comparison.json")
        with open(cmp_path, "w") as fh:
            json.dump(cmp, fh, indent=1)
        paths.append(cmp_path)
        print(json.dumps(cmp["deviations"], indent=1))
    _manifest(args.out, "estimate",
              {"model": args.model, "netlist": args.netlist, "memory": args.memory},
              [p for p in (args.model, args.netlist) if p], paths, time.time() - t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dtnn",
        description="Train tree networks, compile them to lookup-table netlists, "
                    "run bit-exact inference, and estimate energy/delay/area.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write model.json + history")
    t.add_argument("--model", required=True, choices=["mlp1", "mlp2", "lenet5"])
    t.add_argument("--data", help="MNIST directory (default: $DTNN_DATA_DIR or ./data/mnist)")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--seed", type=int)
    t.add_argument("--act-bits", type=int, default=4, dest="act_bits",
                   help="activation bits for lenet5 (mlp models are 1-bit)")
    t.add_argument("--fan-in", type=int, default=None, dest="fan_in")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compile", help="lower a trained model to a LUT netlist")
    c.add_argument("model")
    c.add_argument("--limit-bits", type=int, default=20, dest="limit_bits")
    c.add_argument("--out", default="runs/compile")
    c.add_argument("--debug-json", action="store_true", dest="debug_json")
    c.set_defaults(fn=cmd_compile)

    i = sub.add_parser("infer", help="run a compiled netlist over images")
    i.add_argument("netlist")
    i.add_argument("--images", help="raw IDX image file (otherwise the MNIST test set)")
    i.add_argument("--data", help="MNIST directory for test images + labels")
    i.add_argument("--batch", type=int, default=1024)
    i.add_argument("--out", default="runs/infer")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("estimate", help="energy/delay/area of FP vs LUT execution")
    e.add_argument("--model", required=True)
    e.add_argument("--netlist", help="compiled netlist (omit for the FP side only)")
    e.add_argument("--memory", default="auto", choices=["sram", "dram", "auto"],
                   help="weight-read billing for the FP reference")
    e.add_argument("--constants", help="alternate cost-constants JSON")
    e.add_argument("--paper-row", dest="paper_row",
                   help="published reference row to compare against (e.g. lenet5_4bit)")
    e.add_argument("--out", default="runs/estimate")
    e.set_defaults(fn=cmd_estimate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "fan_in", 0) is None:
        args.fan_in = 6 if args.model in ("mlp1", "mlp2") else 2
    try:
        return args.fn(args)
    except CompileError as e:
        print(f"compile error: {e}", file=sys.stderr)
        return EXIT_COMPILE
    except INPUT_ERRORS as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001 - the contract maps these to exit 4
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
