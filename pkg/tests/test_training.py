import numpy as np
import pytest
import torch

from dtnn.mnist import LabeledImages
from dtnn.network import (DtreeNetwork, EnsembleClassifier, TreeDenseLayer,
                          build_ensemble, build_model, forward_codes,
                          make_tree_bundle)
from dtnn.quant import BinarizeSpec, QuantSpec
from dtnn.training import (TorchNetwork, TrainConfig, TrainingError, predict,
                           sync_to_network, train)


def xor_net(seed=5):
    one_bit = QuantSpec(bits=1, lo=-1.0, hi=1.0)
    rng = np.random.default_rng(seed)
    l1 = TreeDenseLayer(2, 4, make_tree_bundle(2, 4, 2, "type2", "sign", "sign",
                                               one_bit, rng))
    l2 = TreeDenseLayer(4, 1, make_tree_bundle(4, 1, 2, "type2", "sign", "sign",
                                               one_bit, rng))
    return DtreeNetwork(name="xor", input_shape=(2,), input_mode="binarized",
                        layers=[l1, l2], act_bits=1, binarize_spec=BinarizeSpec(0.5))


def xor_data():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32)
    Y = np.array([0, 1, 1, 0], dtype=np.int64)
    return LabeledImages(train_images=np.tile(X, (64, 1)),
                         train_labels=np.tile(Y, 64),
                         test_images=X, test_labels=Y)


class TestTrainLoop:
    def test_xor_reaches_full_accuracy_within_5000_iterations(self):
        cfg = TrainConfig(lr=0.01, batch_size=16, iterations=5000, eval_every=200,
                          patience=0, seed=2, eval_subset=4)
        net, hist = train(xor_net(), xor_data(), cfg)
        codes = forward_codes(net, xor_data().test_images.astype(np.float64))
        assert np.array_equal(codes[:, 0], np.array([0, 1, 1, 0]))
        assert any(h[3] == 1.0 for h in hist)

    def test_zero_iterations_returns_net_unchanged(self):
        net = xor_net()
        before = [l.bundle.leaf.copy() for l in net.layers]
        out, hist = train(net, xor_data(), TrainConfig(iterations=0, epochs=0))
        assert hist == []
        for b, l in zip(before, out.layers):
            assert np.array_equal(b, l.bundle.leaf)

    def test_same_seed_is_bit_identical(self):
        cfg = TrainConfig(lr=0.01, batch_size=16, iterations=60, eval_every=0,
                          patience=0, seed=7)
        net_a, _ = train(xor_net(seed=1), xor_data(), cfg)
        net_b, _ = train(xor_net(seed=1), xor_data(), cfg)
        for la, lb in zip(net_a.layers, net_b.layers):
            assert np.array_equal(la.bundle.leaf, lb.bundle.leaf)
            for wa, wb in zip(la.bundle.inner, lb.bundle.inner):
                assert np.array_equal(wa, wb)
            for ba, bb in zip(la.bundle.biases, lb.bundle.biases):
                assert np.array_equal(ba, bb)

    def test_epochs_and_iterations_are_exclusive(self):
        with pytest.raises(TrainingError):
            TrainConfig(epochs=2, iterations=100).validate()

    def test_divergence_reports_iteration(self):
        # SGD at an absurd rate explodes the identity-activation logits to
        # overflow within a few steps
        cfg = TrainConfig(optimizer="sgd", lr=1e22, batch_size=16, iterations=500,
                          eval_every=0, patience=0, seed=0)
        net = xor_net()
        for layer in net.layers:
            layer.bundle.root_act = "identity"
            layer.bundle.inner_act = "identity"
        with pytest.raises(TrainingError, match="iteration"):
            train(net, xor_data(), cfg, norm=False, quantized=False)


class TestSTEGradients:
    def test_gradients_match_central_differences(self):
        # quantization replaced by identity, smooth activations, float64
        rng = np.random.default_rng(0)
        bundle = make_tree_bundle(12, 3, 3, "type2", "tanh", "identity",
                                  QuantSpec(bits=8, lo=-8, hi=8), rng)
        layer = TreeDenseLayer(12, 3, bundle)
        net = DtreeNetwork(name="g", input_shape=(12,), input_mode="fp_first",
                           layers=[layer], act_bits=8)
        module = TorchNetwork(net, quantized=False, dtype=torch.float64)
        x = torch.tensor(rng.standard_normal((4, 12)))
        y = torch.tensor([0, 1, 2, 0])

        def loss_value():
            _, logits = module(x)
            return torch.nn.functional.cross_entropy(logits, y)

        loss = loss_value()
        loss.backward()
        params = [p for p in module.parameters() if p.requires_grad]
        probes = 0
        gen = np.random.default_rng(1)
        eps = 1e-6
        while probes < 100:
            p = params[gen.integers(len(params))]
            idx = tuple(gen.integers(s) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss_value().item()
                p[idx] = orig - eps
                down = loss_value().item()
                p[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad[idx].item()
            assert abs(analytic - numeric) <= 1e-4 * (1 + abs(numeric)), \
                (analytic, numeric)
            probes += 1


class TestPredictTieBreaks:
    def make_ensemble(self):
        ens = build_ensemble("mlp1", 6, seed=0)
        ens.combiner_spec = QuantSpec(bits=8, lo=-8.0, hi=8.0)
        return ens

    def rig(self, ens, sums):
        """Force the combiner's pre-sign sums to `sums` regardless of input:
        zero weights, bias = target."""
        ens.combiner_weights = np.zeros_like(ens.combiner_weights)
        ens.combiner_biases = np.asarray(sums, dtype=np.float64)

    def test_single_set_bit_wins(self):
        ens = self.make_ensemble()
        sums = -np.ones(10)
        sums[7] = 2.0
        self.rig(ens, sums)
        assert predict(ens, np.zeros(784)) == 7
        assert ens.class_bits(np.zeros((1, 784)))[0].tolist() == \
            [0, 0, 0, 0, 0, 0, 0, 1, 0, 0]

    def test_two_set_bits_take_larger_sum(self):
        ens = self.make_ensemble()
        sums = -np.ones(10)
        sums[2], sums[8] = 1.0, 3.0
        self.rig(ens, sums)
        assert predict(ens, np.zeros(784)) == 8

    def test_all_zero_bits_take_argmax_of_sums(self):
        ens = self.make_ensemble()
        sums = -np.linspace(3.0, 1.0, 10)  # every bit 0; class 9 least negative
        self.rig(ens, sums)
        assert predict(ens, np.zeros(784)) == 9
