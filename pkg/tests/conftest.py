"""Shared fixtures: the artifact store that trains shipped models once and
caches them (with recorded wall time) for the acceptance gates."""

import json
import os
import time

import numpy as np
import pytest

import dtnn.training as training
from dtnn.mnist import load_mnist
from dtnn.modelio import load_model, save_model

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.environ.get("DTNN_DATA_DIR", os.path.join(REPO, "data", "mnist"))
ARTIFACTS = os.environ.get("DTNN_ARTIFACTS", os.path.join(REPO, "artifacts"))

ENSEMBLE_SEEDS = (1, 2, 3)
LENET_BITS = (4, 5, 6)
LENET_FAN_IN = 2


def _plain(obj):
    """JSON-normalized view (tuples become lists) for config comparisons."""
    import json as _json
    return _json.loads(_json.dumps(obj))


class ArtifactStore:
    """Lazily trains and caches the shipped models under artifacts/.

    Each artifact directory holds model.json plus train_info.json with the
    measured training wall time and the history, so accuracy and runtime
    criteria evaluate against what the training actually did.
    """

    def __init__(self, root: str, data_dir: str):
        self.root = root
        self.data_dir = data_dir
        self._mnist = None
        os.makedirs(root, exist_ok=True)

    @property
    def mnist(self):
        if self._mnist is None:
            self._mnist = load_mnist(self.data_dir)
        return self._mnist

    def _paths(self, name: str):
        d = os.path.join(self.root, name)
        return d, os.path.join(d, "model.json"), os.path.join(d, "train_info.json")

    def _load(self, name: str, want_config: dict | None = None):
        d, model_p, info_p = self._paths(name)
        if os.path.exists(model_p) and os.path.exists(info_p):
            with open(info_p) as fh:
                info = json.load(fh)
            if want_config is not None and _plain(info.get("config")) != _plain(want_config):
                return None  # shipped config changed; retrain
            return load_model(model_p), info
        return None

    def _store(self, name: str, model, info: dict):
        d, model_p, info_p = self._paths(name)
        os.makedirs(d, exist_ok=True)
        save_model(model, model_p)
        with open(info_p, "w") as fh:
            json.dump(info, fh)

    def ensemble(self, structure: str, seed: int, thresholds=None, tag: str = ""):
        name = f"{structure}{tag}_seed{seed}"
        cfg = training.MLP1_CONFIG if structure == "mlp1" else training.MLP2_CONFIG
        cfg = training.replace(cfg, seed=seed)
        cached = self._load(name, cfg.__dict__)
        if cached:
            return cached
        t0 = time.time()
        ens, history = training.train_ensemble(cfg, structure, self.mnist,
                                               thresholds=thresholds)
        wall = time.time() - t0
        acc = self._ensemble_accuracy(ens)
        info = {"wall_seconds": wall, "history": history, "test_accuracy": acc,
                "config": cfg.__dict__}
        self._store(name, ens, info)
        return ens, info

    def single_member(self, structure: str = "mlp1", seed: int = 1,
                      threshold: float = 0.5):
        from dtnn.network import build_model, forward_codes
        from dtnn.quant import BinarizeSpec
        name = f"{structure}_member{threshold}_seed{seed}"
        cfg = training.replace(training.MLP1_CONFIG, seed=seed)
        cached = self._load(name, cfg.__dict__)
        if cached:
            return cached
        net = build_model(structure, fan_in=6, act_bits=1, seed=seed)
        net.binarize_spec = BinarizeSpec(threshold)
        t0 = time.time()
        net, history = training.train(net, self.mnist, cfg)
        wall = time.time() - t0
        x = np.asarray(self.mnist.test_images, dtype=np.float64).reshape(-1, 784)
        acc = float((np.argmax(forward_codes(net, x), axis=1)
                     == np.asarray(self.mnist.test_labels)).mean())
        info = {"wall_seconds": wall, "history": history, "test_accuracy": acc,
                "config": cfg.__dict__}
        self._store(name, net, info)
        return net, info

    def lenet_fp32(self, seed: int = 1):
        from dtnn.network import build_model
        name = f"lenet5_fp32_seed{seed}"
        cfg = training.replace(training.LENET_PRETRAIN_CONFIG, seed=seed)
        cached = self._load(name, cfg.__dict__)
        if cached:
            return cached
        t0 = time.time()
        module, history = training.pretrain_lenet_plain(self.mnist, cfg)
        net = training._plain_to_net(module, build_model(
            "lenet5", fan_in=LENET_FAN_IN, act_bits=4, seed=seed))
        wall = time.time() - t0
        acc = self._net_accuracy(net, quantized=False)
        info = {"wall_seconds": wall, "history": history, "test_accuracy": acc,
                "config": cfg.__dict__}
        self._store(name, net, info)
        return net, info

    def lenet(self, bits: int, seed: int = 1):
        name = f"lenet5_{bits}bit_fan{LENET_FAN_IN}_seed{seed}"
        want = {"act_bits": bits, "fan_in": LENET_FAN_IN, "seed": seed,
                "finetune": training.LENET_FINETUNE_CONFIG.__dict__}
        cached = self._load(name, want)
        if cached:
            return cached
        pretrained, pre_info = self.lenet_fp32(seed)
        t0 = time.time()
        net, history = training.train_lenet5(
            self.mnist, act_bits=bits, fan_in=LENET_FAN_IN, seed=seed,
            pretrained=pretrained)
        wall = time.time() - t0
        acc = self._net_accuracy(net, quantized=True)
        info = {"wall_seconds": wall, "history": history, "test_accuracy": acc,
                "pretrain_wall_seconds": pre_info["wall_seconds"],
                "config": {"act_bits": bits, "fan_in": LENET_FAN_IN, "seed": seed,
                           "finetune": training.LENET_FINETUNE_CONFIG.__dict__}}
        self._store(name, net, info)
        return net, info

    def _net_accuracy(self, net, quantized: bool) -> float:
        from dtnn.network import forward, forward_codes
        x = np.asarray(self.mnist.test_images, dtype=np.float64)
        x = x.reshape(-1, 1, 28, 28)
        labels = np.asarray(self.mnist.test_labels)
        if quantized:
            pred = np.argmax(forward_codes(net, x), axis=1)
        else:
            pred = np.argmax(forward(net, x, quantized=False), axis=1)
        return float((pred == labels).mean())

    def _ensemble_accuracy(self, ens) -> float:
        x = np.asarray(self.mnist.test_images, dtype=np.float64).reshape(-1, 784)
        return float((ens.predict(x) == np.asarray(self.mnist.test_labels)).mean())


@pytest.fixture(scope="session")
def store():
    if not os.path.isdir(DATA_DIR):
        pytest.fail(f"MNIST data directory missing: {DATA_DIR} "
                    f"(set DTNN_DATA_DIR or place the IDX files under data/mnist)")
    return ArtifactStore(ARTIFACTS, DATA_DIR)


@pytest.fixture(scope="session")
def acceptance_log():
    lines = []
    yield lines
    if lines:
        os.makedirs(ARTIFACTS, exist_ok=True)
        path = os.path.join(ARTIFACTS, "acceptance_report.txt")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print("\n" + "\n".join(lines))
