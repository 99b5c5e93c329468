import json
import os

import numpy as np
import pytest

from dtnn.cli import main
from tests.test_mnist import write_images, write_labels


@pytest.fixture(scope="module")
def tiny_mnist(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    write_images(str(d / "train-images-idx3-ubyte"),
                 rng.integers(0, 256, size=(64, 28, 28)))
    write_labels(str(d / "train-labels-idx1-ubyte"), rng.integers(0, 10, size=64))
    write_images(str(d / "t10k-images-idx3-ubyte"),
                 rng.integers(0, 256, size=(16, 28, 28)))
    write_labels(str(d / "t10k-labels-idx1-ubyte"), rng.integers(0, 10, size=16))
    return str(d)


@pytest.fixture(scope="module")
def trained_run(tiny_mnist, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = main(["train", "--model", "mlp1", "--data", tiny_mnist, "--seed", "1",
                 "--iterations", "20", "--out", out])
    assert code == 0
    return out


def manifest_entries(out_dir):
    with open(os.path.join(out_dir, "manifest.jsonl")) as fh:
        return [json.loads(line) for line in fh]


class TestTrain:
    def test_writes_model_history_figure_and_manifest(self, trained_run):
        for name in ("model.json", "history.csv", "history.png", "manifest.jsonl"):
            assert os.path.exists(os.path.join(trained_run, name)), name
        entry = manifest_entries(trained_run)[0]
        assert entry["command"] == "train"
        assert any(p.endswith("model.json") for p in entry["outputs"])
        assert entry["config"]["seed"] == 1

    def test_missing_idx_files_exit_2_naming_file(self, tmp_path, capsys):
        code = main(["train", "--model", "mlp1", "--data", str(tmp_path),
                     "--iterations", "5", "--out", str(tmp_path / "out")])
        assert code == 2
        assert "train-images-idx3-ubyte" in capsys.readouterr().err

    def test_deterministic_given_seed(self, tiny_mnist, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            assert main(["train", "--model", "mlp1", "--data", tiny_mnist,
                         "--seed", "3", "--iterations", "10", "--out", out]) == 0
            outs.append(manifest_entries(out)[0]["outputs"])
        hashes = [{os.path.basename(k): v for k, v in o.items()} for o in outs]
        assert hashes[0]["model.json"] == hashes[1]["model.json"]
        assert hashes[0]["history.csv"] == hashes[1]["history.csv"]

    def test_lenet_act_bits_flag(self, tiny_mnist, tmp_path):
        out = str(tmp_path / "lenet")
        code = main(["train", "--model", "lenet5", "--data", tiny_mnist,
                     "--act-bits", "4", "--epochs", "1", "--out", out])
        assert code == 0
        from dtnn.modelio import load_model
        net = load_model(os.path.join(out, "model.json"))
        assert net.act_bits == 4
        assert all(q.bits == 4 for l in net.layers if hasattr(l, "bundle")
                   for q in l.bundle.level_quant)

    def test_config_file_overridden_by_flags(self, tiny_mnist, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"iterations": 5, "lr": 0.5}))
        out = str(tmp_path / "cfgrun")
        code = main(["train", "--model", "mlp1", "--data", tiny_mnist,
                     "--config", str(cfg_path), "--iterations", "8", "--out", out])
        assert code == 0
        entry = manifest_entries(out)[0]
        assert entry["config"]["iterations"] == 8  # flag wins
        assert entry["config"]["lr"] == 0.5  # file beats builtin

    def test_unknown_config_key_rejected(self, tiny_mnist, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"learning_rate_typo": 0.5}))
        code = main(["train", "--model", "mlp1", "--data", tiny_mnist,
                     "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 2


class TestCompile:
    def test_compile_writes_netlist(self, trained_run, tmp_path):
        out = str(tmp_path / "c")
        code = main(["compile", os.path.join(trained_run, "model.json"),
                     "--out", out, "--debug-json"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "netlist.dtnnlut"))
        assert os.path.exists(os.path.join(out, "netlist.debug.json"))

    def test_oversize_node_exits_3_with_node_id(self, tiny_mnist, tmp_path, capsys):
        out = str(tmp_path / "lenet6")
        assert main(["train", "--model", "lenet5", "--data", tiny_mnist,
                     "--fan-in", "6", "--act-bits", "4", "--epochs", "1",
                     "--out", out]) == 0
        code = main(["compile", os.path.join(out, "model.json"),
                     "--out", str(tmp_path / "c2")])
        assert code == 3
        err = capsys.readouterr().err
        assert "node" in err and "24-bit" in err


@pytest.fixture(scope="module")
def netlist_path(trained_run, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("nl"))
    assert main(["compile", os.path.join(trained_run, "model.json"),
                 "--out", out]) == 0
    return os.path.join(out, "netlist.dtnnlut")


class TestInfer:
    def test_infer_over_test_split_prints_accuracy(self, netlist_path, tiny_mnist,
                                                   tmp_path, capsys):
        out = str(tmp_path / "inf")
        code = main(["infer", netlist_path, "--data", tiny_mnist, "--out", out])
        assert code == 0
        assert "accuracy" in capsys.readouterr().out
        lines = open(os.path.join(out, "predictions.csv")).read().strip().splitlines()
        assert len(lines) == 17  # header + 16 predictions

    def test_infer_single_raw_idx_image(self, netlist_path, tmp_path):
        img_path = str(tmp_path / "one-image-idx3-ubyte")
        write_images(img_path, np.random.default_rng(0).integers(0, 256, (1, 28, 28)))
        out = str(tmp_path / "inf1")
        assert main(["infer", netlist_path, "--images", img_path, "--out", out]) == 0
        lines = open(os.path.join(out, "predictions.csv")).read().strip().splitlines()
        assert len(lines) == 2

    def test_mismatched_image_size_exits_2(self, netlist_path, tmp_path, capsys):
        img_path = str(tmp_path / "bad-idx3-ubyte")
        write_images(img_path, np.zeros((2, 10, 10)))
        code = main(["infer", netlist_path, "--images", img_path,
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_missing_netlist_exits_2(self, tmp_path):
        assert main(["infer", str(tmp_path / "nope.dtnnlut"),
                     "--out", str(tmp_path / "x")]) == 2


class TestEstimate:
    def test_estimate_writes_report_and_figure(self, trained_run, tmp_path):
        nl_out = str(tmp_path / "nl")
        assert main(["compile", os.path.join(trained_run, "model.json"),
                     "--out", nl_out]) == 0
        out = str(tmp_path / "est")
        code = main(["estimate", "--model", os.path.join(trained_run, "model.json"),
                     "--netlist", os.path.join(nl_out, "netlist.dtnnlut"),
                     "--out", out])
        assert code == 0
        for suffix in (".json", ".txt", ".png"):
            assert os.path.exists(os.path.join(out, "cost_report" + suffix))
        doc = json.load(open(os.path.join(out, "cost_report.json")))
        assert doc["totals"]["improvement_ratio"] > 1.0

    def test_dram_strictly_costlier(self, trained_run, tmp_path):
        totals = {}
        for mem in ("sram", "dram"):
            out = str(tmp_path / mem)
            assert main(["estimate", "--model",
                         os.path.join(trained_run, "model.json"),
                         "--memory", mem, "--out", out]) == 0
            doc = json.load(open(os.path.join(out, "cost_report.json")))
            totals[mem] = doc["totals"]["energy_fp_uj"]
        assert totals["dram"] > totals["sram"]

    def test_missing_netlist_reports_fp_only(self, trained_run, tmp_path):
        out = str(tmp_path / "fponly")
        assert main(["estimate", "--model", os.path.join(trained_run, "model.json"),
                     "--out", out]) == 0
        doc = json.load(open(os.path.join(out, "cost_report.json")))
        assert doc["totals"]["energy_lut_uj"] is None
        assert doc["totals"]["energy_fp_uj"] > 0

    def test_netlist_from_other_model_exits_2(self, trained_run, tiny_mnist,
                                              tmp_path, capsys):
        other = str(tmp_path / "other")
        assert main(["train", "--model", "mlp1", "--data", tiny_mnist, "--seed", "9",
                     "--iterations", "10", "--out", other]) == 0
        nl_out = str(tmp_path / "nl")
        assert main(["compile", os.path.join(other, "model.json"),
                     "--out", nl_out]) == 0
        code = main(["estimate", "--model", os.path.join(trained_run, "model.json"),
                     "--netlist", os.path.join(nl_out, "netlist.dtnnlut"),
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "compiled from model" in capsys.readouterr().err
