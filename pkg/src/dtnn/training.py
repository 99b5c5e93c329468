"""Quantization-aware training of tree networks (torch backend).

Training runs in float32 through torch mirrors of the numpy layers, with
straight-through estimators for the quantizer (identity inside [lo, hi],
zero outside) and for sign (clipped identity on [-1, 1]). Trained weights
are copied back into the numpy network, whose float64 forward pass is the
reference everything else is measured against.

The ensemble trainer implements the five-threshold scheme: each member
sees the image binarized at its own threshold, and a per-class single-node
combiner over the five member sign bits is learned jointly with them.
Losses always use pre-binarization sums as logits (cross-entropy needs
real values; the sign applies at inference).
"""

from __future__ import annotations

import copy
import sys
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mnist import LabeledImages
from .network import (DtreeNetwork, EnsembleClassifier, FlattenLayer, FpConvLayer,
                      MaxPoolLayer, TreeConvLayer, TreeDenseLayer, build_ensemble,
                      build_model, calibrate)
from .dtree import ConfigError
from .quant import QuantSpec

__all__ = [
    "TrainConfig",
    "TrainingError",
    "train",
    "train_ensemble",
    "train_lenet5",
    "predict",
    "MLP1_CONFIG",
    "MLP2_CONFIG",
    "LENET_PRETRAIN_CONFIG",
    "LENET_FINETUNE_CONFIG",
]


class TrainingError(RuntimeError):
    """Divergence (NaN loss) or invalid training setup."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiply lr by this ...
    lr_decay_every: int = 0  # ... every N epochs (0 disables)
    batch_size: int = 256
    epochs: int = 0  # use either epochs or iterations
    iterations: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 1
    eval_every: int = 500  # iterations between test evaluations
    eval_subset: int = 2500  # test images used for the early-stop signal
    patience: int = 20  # evaluations without improvement before stopping (0 = off)
    threads: int = 1

    def validate(self):
        if self.lr <= 0 or self.batch_size <= 0:
            raise TrainingError("learning rate and batch size must be positive")
        if (self.epochs < 0 or self.iterations < 0
                or (self.epochs and self.iterations)):
            raise TrainingError("set epochs or iterations, not both")
        return self


# paper-style defaults: Adam(0.9, 0.999, 1e-8); the MNIST schedule uses
# lr 4e-3 halved every 30 epochs at batch 512; the MLP classifiers use
# lr 1e-3. Iteration budgets here are reduced from the stated upper bounds
# (20k / 500k) because early stopping converges far sooner at desk scale.
MLP1_CONFIG = TrainConfig(lr=1e-3, batch_size=256, iterations=6000,
                          eval_every=500, patience=6)
MLP2_CONFIG = TrainConfig(lr=1e-3, batch_size=256, iterations=9000,
                          eval_every=500, patience=8)
LENET_PRETRAIN_CONFIG = TrainConfig(lr=2e-3, lr_decay=0.5, lr_decay_every=8,
                                    batch_size=512, epochs=22, weight_decay=1e-4,
                                    eval_every=0, patience=0)
LENET_FINETUNE_CONFIG = TrainConfig(lr=2e-4, batch_size=256, epochs=3,
                                    weight_decay=0.0, eval_every=0, patience=0)


# ---------------------------------------------------------------------------
# straight-through estimators


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi, max_code):
        ctx.save_for_backward(x)
        ctx.lo, ctx.hi = lo, hi
        t = (x - lo) * (max_code / (hi - lo))
        c = torch.round(t).clamp_(0, max_code)  # round half to even
        return lo + c * ((hi - lo) / max_code)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        mask = (x >= ctx.lo) & (x <= ctx.hi)
        return grad * mask, None, None, None


def fake_quant_ste(x, lo: float, hi: float, bits: int):
    return _FakeQuantSTE.apply(x, float(lo), float(hi), float((1 << bits) - 1))


class _SignSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x > 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1.0)


def _act(name: str, x):
    if name == "identity":
        return x
    if name == "relu":
        return F.relu(x)
    if name == "tanh":
        return torch.tanh(x)
    if name == "sign":
        return _SignSTE.apply(x)
    raise ConfigError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# torch mirrors of the numpy layers


def _block_pad(x, groups: int, fan_in: int):
    """Pad the last axis to groups*fan_in and reshape it to (groups, fan_in)."""
    pad = groups * fan_in - x.shape[-1]
    if pad:
        x = F.pad(x, (0, pad))
    return x.reshape(*x.shape[:-1], groups, fan_in)


class TorchTreeDense(nn.Module):
    """Mirror of a dense tree layer.

    With `norm=True` (sign-tree training) every level's pre-activations go
    through batch normalization so sums stay inside the sign STE's [-1, 1]
    gradient window; the norm folds exactly into edge weights and node
    biases on export (sign(s*acc + t) == sign over rescaled weights), so
    the deployed model family is unchanged.
    """

    def __init__(self, layer: TreeDenseLayer, quantized: bool, norm: bool = False,
                 dtype=torch.float32):
        super().__init__()
        b = layer.bundle
        t = b.topology
        self.topology = t
        self.inner_act, self.root_act = b.inner_act, b.root_act
        self.quantized = quantized
        self.type1 = b.kind == "type1"
        self.leaf = nn.Parameter(torch.tensor(b.leaf, dtype=dtype))
        self.inner = nn.ParameterList(
            nn.Parameter(torch.tensor(w, dtype=dtype), requires_grad=not self.type1)
            for w in b.inner)
        self.biases = nn.ParameterList()
        for l, bb in enumerate(b.biases):
            train_it = (not self.type1) or l == t.depth - 1
            self.biases.append(nn.Parameter(torch.tensor(bb, dtype=dtype),
                                            requires_grad=train_it))
        self.quant = [(q.lo, q.hi, q.bits) for q in b.level_quant]
        self._mark_exact_levels(b)
        self.norms = None
        if norm:
            self.norms = nn.ModuleList(
                nn.BatchNorm1d(b.units * t.layer_sizes[l], dtype=dtype)
                for l in range(t.depth))

    def _mark_exact_levels(self, b):
        # sign outputs land exactly on the 1-bit {-1, +1} grid, so the fake
        # quantizer is the identity there and can be skipped
        self.exact = [b.level_act(l) == "sign" and q.bits == 1
                      and q.lo == -1.0 and q.hi == 1.0
                      for l, q in enumerate(b.level_quant)]

    def _normed(self, acc, level):
        if self.norms is None:
            return acc
        shape = acc.shape
        flat = acc.reshape(-1, shape[-2] * shape[-1]) if acc.ndim == 3 \
            else acc.reshape(acc.shape[0], -1)
        return self.norms[level](flat).reshape(shape)

    def forward(self, x):
        t = self.topology
        a0, f = t.layer_sizes[0], t.fan_in
        # leaf level as a batched matmul over blocks: (a0,B,f) @ (a0,f,U)
        xb = _block_pad(x, a0, f).permute(1, 0, 2)
        wb = _block_pad(self.leaf, a0, f).permute(1, 2, 0)
        acc = torch.bmm(xb, wb).permute(1, 2, 0) + self.biases[0]  # (B, U, a0)
        pre_root = None
        for l in range(t.depth):
            if l > 0:
                prod = acc * self.inner[l - 1]
                acc = _block_pad(prod, t.layer_sizes[l], t.fan_in).sum(-1) + self.biases[l]
            acc = self._normed(acc, l)
            is_root = l == t.depth - 1
            if is_root:
                pre_root = acc[..., 0]
            acc = _act(self.root_act if is_root else self.inner_act, acc)
            if self.quantized and not self.exact[l]:
                lo, hi, bits = self.quant[l]
                acc = fake_quant_ste(acc, lo, hi, bits)
        return acc[..., 0], pre_root  # (B, U) values and pre-activation logits


class TorchTreeConv(nn.Module):
    def __init__(self, layer: TreeConvLayer, quantized: bool, norm: bool = False,
                 dtype=torch.float32):
        super().__init__()
        b = layer.bundle
        t = b.topology
        self.topology = t
        self.kind = layer.kind
        self.kernel, self.stride, self.padding = layer.kernel, layer.stride, layer.padding
        self.in_channels, self.out_channels = layer.in_channels, layer.out_channels
        self.inner_act, self.root_act = b.inner_act, b.root_act
        self.quantized = quantized
        self.type1 = b.kind == "type1"
        self.leaf = nn.Parameter(torch.tensor(b.leaf, dtype=dtype))
        self.inner = nn.ParameterList(
            nn.Parameter(torch.tensor(w, dtype=dtype), requires_grad=not self.type1)
            for w in b.inner)
        self.biases = nn.ParameterList()
        for l, bb in enumerate(b.biases):
            train_it = (not self.type1) or l == t.depth - 1
            self.biases.append(nn.Parameter(torch.tensor(bb, dtype=dtype),
                                            requires_grad=train_it))
        self.quant = [(q.lo, q.hi, q.bits) for q in b.level_quant]
        TorchTreeDense._mark_exact_levels(self, b)
        self.norms = None
        if norm:
            self.norms = nn.ModuleList(
                nn.BatchNorm1d(b.units * t.layer_sizes[l], dtype=dtype)
                for l in range(t.depth))

    def _normed(self, acc, level):
        if self.norms is None:
            return acc
        b, u, p, a = acc.shape  # per-(unit, node) statistics across batch x positions
        flat = acc.permute(0, 2, 1, 3).reshape(b * p, u * a)
        flat = self.norms[level](flat)
        return flat.reshape(b, p, u, a).permute(0, 2, 1, 3)

    def forward(self, x):
        t = self.topology
        bsz = x.shape[0]
        a0, f = t.layer_sizes[0], t.fan_in
        win = F.unfold(x, self.kernel, stride=self.stride, padding=self.padding)
        # (B, C*k*k, P); receptive-field axis matches numpy gather_windows
        p = win.shape[-1]
        if self.kind == "depthwise_conv2d":
            win = win.reshape(bsz, self.in_channels, -1, p)  # (B, C, k*k, P)
            xb = _block_pad(win.permute(0, 1, 3, 2), a0, f)
            wb = _block_pad(self.leaf, a0, f)
            acc = torch.einsum("bupaf,uaf->bupa", xb, wb)
        else:
            if self.kind == "pointwise_conv2d" and self.kernel != 1:
                raise ConfigError("pointwise convolution requires kernel 1")
            xb = F.pad(win, (0, 0, 0, a0 * f - win.shape[1]))
            xb = xb.reshape(bsz, a0, f, p).permute(1, 0, 3, 2).reshape(a0, bsz * p, f)
            wb = _block_pad(self.leaf, a0, f).permute(1, 2, 0)  # (a0, f, U)
            acc = torch.bmm(xb, wb).reshape(a0, bsz, p, -1).permute(1, 3, 2, 0)
        acc = acc + self.biases[0][None, :, None, :]
        pre_root = None
        for l in range(t.depth):
            if l > 0:
                prod = acc * self.inner[l - 1][None, :, None, :]
                acc = _block_pad(prod, t.layer_sizes[l], t.fan_in).sum(-1)
                acc = acc + self.biases[l][None, :, None, :]
            acc = self._normed(acc, l)
            is_root = l == t.depth - 1
            if is_root:
                pre_root = acc[..., 0]
            acc = _act(self.root_act if is_root else self.inner_act, acc)
            if self.quantized and not self.exact[l]:
                lo, hi, bits = self.quant[l]
                acc = fake_quant_ste(acc, lo, hi, bits)
        out = acc[..., 0]  # (B, U, P)
        oh = (x.shape[2] + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (x.shape[3] + 2 * self.padding - self.kernel) // self.stride + 1
        return out.reshape(bsz, self.out_channels, oh, ow), pre_root


class TorchFpConv(nn.Module):
    def __init__(self, layer: FpConvLayer, quantized: bool, dtype=torch.float32):
        super().__init__()
        self.conv = nn.Conv2d(layer.in_channels, layer.out_channels, layer.kernel,
                              stride=layer.stride, padding=layer.padding, dtype=dtype)
        with torch.no_grad():
            self.conv.weight.copy_(torch.tensor(layer.weights, dtype=dtype))
            self.conv.bias.copy_(torch.tensor(layer.bias, dtype=dtype))
        self.act = layer.act
        self.quantized = quantized
        self.quant = (layer.out_quant.lo, layer.out_quant.hi, layer.out_quant.bits)

    def forward(self, x):
        y = _act(self.act, self.conv(x))
        if self.quantized:
            y = fake_quant_ste(y, *self.quant)
        return y, None


class TorchNetwork(nn.Module):
    """Mirror of a DtreeNetwork. forward returns (values, logits) where
    logits are the final layer's pre-activation root sums."""

    def __init__(self, net: DtreeNetwork, quantized: bool = True, norm: bool = False,
                 dtype=torch.float32):
        super().__init__()
        self.input_mode = net.input_mode
        self.threshold = net.binarize_spec.threshold if net.binarize_spec else None
        mods = []
        for layer in net.layers:
            if isinstance(layer, FpConvLayer):
                mods.append(TorchFpConv(layer, quantized, dtype))
            elif isinstance(layer, TreeDenseLayer):
                mods.append(TorchTreeDense(layer, quantized, norm, dtype))
            elif isinstance(layer, TreeConvLayer):
                mods.append(TorchTreeConv(layer, quantized, norm, dtype))
            elif isinstance(layer, MaxPoolLayer):
                mods.append(nn.MaxPool2d(layer.kernel, layer.stride))
            elif isinstance(layer, FlattenLayer):
                mods.append(nn.Flatten())
            else:
                raise ConfigError(f"cannot mirror layer {type(layer).__name__}")
        self.stages = nn.ModuleList(mods)

    def forward(self, x):
        if self.input_mode == "binarized":
            x = (x > self.threshold).to(x.dtype)
        logits = None
        for mod in self.stages:
            if isinstance(mod, (TorchTreeDense, TorchTreeConv, TorchFpConv)):
                x, pre = mod(x)
                if pre is not None:
                    logits = pre
            else:
                x = mod(x)
        return x, logits


class _StackedTreeLayer(nn.Module):
    """All ensemble members' copies of one dense sign-tree layer, evaluated
    as a single stacked tensor (member axis folded into the batched matmul)
    so five members cost one pass of big kernels instead of five of small."""

    def __init__(self, layers: list, dtype=torch.float32):
        super().__init__()
        b0 = layers[0].bundle
        t = b0.topology
        self.topology = t
        self.members = len(layers)
        self.units = b0.units
        self.leaf = nn.Parameter(torch.tensor(
            np.stack([l.bundle.leaf for l in layers]), dtype=dtype))  # (M, U, n)
        self.inner = nn.ParameterList(
            nn.Parameter(torch.tensor(np.stack([l.bundle.inner[i] for l in layers]),
                                      dtype=dtype))
            for i in range(t.depth - 1))
        self.biases = nn.ParameterList(
            nn.Parameter(torch.tensor(np.stack([l.bundle.biases[i] for l in layers]),
                                      dtype=dtype))
            for i in range(t.depth))
        self.norms = nn.ModuleList(
            nn.BatchNorm1d(self.members * self.units * t.layer_sizes[l], dtype=dtype)
            for l in range(t.depth))

    def forward(self, x):
        # x: (B, M, n) member-specific inputs
        t = self.topology
        m, u = self.members, self.units
        a0, f = t.layer_sizes[0], t.fan_in
        bsz = x.shape[0]
        xb = _block_pad(x, a0, f).permute(1, 2, 0, 3).reshape(m * a0, bsz, f)
        wb = _block_pad(self.leaf, a0, f).permute(0, 2, 3, 1).reshape(m * a0, f, u)
        acc = torch.bmm(xb, wb).reshape(m, a0, bsz, u).permute(2, 0, 3, 1)
        acc = acc + self.biases[0][None]  # (B, M, U, a0)
        pre_root = None
        for l in range(t.depth):
            if l > 0:
                prod = acc * self.inner[l - 1][None]
                acc = _block_pad(prod, t.layer_sizes[l], f).sum(-1) + self.biases[l][None]
            shape = acc.shape
            acc = self.norms[l](acc.reshape(bsz, -1)).reshape(shape)
            if l == t.depth - 1:
                pre_root = acc[..., 0]
            acc = _SignSTE.apply(acc)
        return acc[..., 0], pre_root  # (B, M, U)


class TorchEnsemble(nn.Module):
    """Stacked mirror of an EnsembleClassifier (members must be dense sign
    MLPs, which the five-threshold classifiers are)."""

    def __init__(self, ens: EnsembleClassifier, dtype=torch.float32):
        super().__init__()
        self.register_buffer("thresholds", torch.tensor(
            [m.binarize_spec.threshold for m in ens.members], dtype=dtype))
        n_layers = len(ens.members[0].layers)
        self.layers = nn.ModuleList(
            _StackedTreeLayer([m.layers[i] for m in ens.members], dtype)
            for i in range(n_layers))
        self.comb_w = nn.Parameter(torch.tensor(ens.combiner_weights, dtype=dtype))
        self.comb_b = nn.Parameter(torch.tensor(ens.combiner_biases, dtype=dtype))

    def forward(self, x):
        bits = (x[:, None, :] > self.thresholds[None, :, None]).to(x.dtype)
        acc = bits
        for layer in self.layers:
            acc, _ = layer(acc)
        # acc: (B, M, classes) in {-1,+1}; combiner weights are (classes, M)
        sums = (acc * self.comb_w.t()[None]).sum(1) + self.comb_b
        return sums, sums  # combiner pre-sign sums are the logits


# ---------------------------------------------------------------------------
# weight transfer (torch -> numpy)


def _to64(p: torch.Tensor) -> np.ndarray:
    return p.detach().cpu().numpy().astype(np.float64)


def _f32grid(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _fold_norms(mod, b) -> None:
    """Fold trained batch-norm into the bundle's weights and biases.

    BN(acc) = s*acc + t with s = gamma/sqrt(var+eps), t = beta - mean*s.
    Node scale s multiplies that node's incoming edge weights, and the bias
    becomes s*bias + t; this is exact for any sign of s. Folded values are
    snapped back to the float32 grid so model files stay lossless.
    """
    t = b.topology
    for l, bn in enumerate(mod.norms):
        units, nodes = b.leaf.shape[0], t.layer_sizes[l]
        var = bn.running_var.detach().numpy().astype(np.float64)
        mean = bn.running_mean.detach().numpy().astype(np.float64)
        gamma = bn.weight.detach().numpy().astype(np.float64)
        beta = bn.bias.detach().numpy().astype(np.float64)
        s = (gamma / np.sqrt(var + bn.eps)).reshape(units, nodes)
        shift = beta.reshape(units, nodes) - mean.reshape(units, nodes) * s
        prev = t.prev_count(l)
        per_edge = np.repeat(s, t.fan_in, axis=1)[:, :prev]
        if l == 0:
            b.leaf = _f32grid(b.leaf * per_edge)
        else:
            b.inner[l - 1] = _f32grid(b.inner[l - 1] * per_edge)
        b.biases[l] = _f32grid(b.biases[l] * s + shift)


def sync_to_network(module: TorchNetwork, net: DtreeNetwork) -> DtreeNetwork:
    mods = [m for m in module.stages
            if isinstance(m, (TorchTreeDense, TorchTreeConv, TorchFpConv))]
    layers = [l for l in net.layers
              if isinstance(l, (TreeDenseLayer, TreeConvLayer, FpConvLayer))]
    for mod, layer in zip(mods, layers):
        if isinstance(mod, TorchFpConv):
            layer.weights = _to64(mod.conv.weight)
            layer.bias = _to64(mod.conv.bias)
        else:
            b = layer.bundle
            b.leaf = _to64(mod.leaf)
            b.inner = [_to64(w) for w in mod.inner]
            b.biases = [_to64(bb) for bb in mod.biases]
            if mod.norms is not None:
                _fold_norms(mod, b)
    return net


def sync_to_ensemble(module: TorchEnsemble, ens: EnsembleClassifier) -> EnsembleClassifier:
    for li, stacked in enumerate(module.layers):
        t = stacked.topology
        for m, member in enumerate(ens.members):
            b = member.layers[li].bundle
            b.leaf = _to64(stacked.leaf[m])
            b.inner = [_to64(w[m]) for w in stacked.inner]
            b.biases = [_to64(bb[m]) for bb in stacked.biases]
            for l, bn in enumerate(stacked.norms):
                units, nodes = stacked.units, t.layer_sizes[l]
                var = bn.running_var.detach().numpy().astype(np.float64)
                mean = bn.running_mean.detach().numpy().astype(np.float64)
                gamma = bn.weight.detach().numpy().astype(np.float64)
                beta = bn.bias.detach().numpy().astype(np.float64)
                s = (gamma / np.sqrt(var + bn.eps)).reshape(stacked.members, units, nodes)[m]
                shift = (beta.reshape(stacked.members, units, nodes)[m]
                         - mean.reshape(stacked.members, units, nodes)[m] * s)
                prev = t.prev_count(l)
                per_edge = np.repeat(s, t.fan_in, axis=1)[:, :prev]
                if l == 0:
                    b.leaf = _f32grid(b.leaf * per_edge)
                else:
                    b.inner[l - 1] = _f32grid(b.inner[l - 1] * per_edge)
                b.biases[l] = _f32grid(b.biases[l] * s + shift)
    ens.combiner_weights = _to64(module.comb_w)
    ens.combiner_biases = _to64(module.comb_b)
    return ens


# ---------------------------------------------------------------------------
# the training loop


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas),
                                eps=cfg.eps, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9,
                               weight_decay=cfg.weight_decay)
    raise TrainingError(f"unknown optimizer {cfg.optimizer!r}")


def _loss_fn(logits, yb):
    if logits.ndim == 2 and logits.shape[1] == 1:
        return F.binary_cross_entropy_with_logits(logits[:, 0], yb.float())
    return F.cross_entropy(logits, yb)


@torch.no_grad()
def _refresh_bn_stats(module: nn.Module, xtr, batches: int = 8,
                      batch: int = 256) -> None:
    """Re-estimate batch-norm running statistics under the current weights
    (cumulative average over fixed training slices). Deep sign trees are
    sensitive to stale statistics: the fold and eval-mode accuracy use the
    running stats, which lag the weights during fast training."""
    bns = [m for m in module.modules() if isinstance(m, nn.BatchNorm1d)]
    if not bns:
        return
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative moving average
    was_training = module.training
    module.train()
    n = xtr.shape[0]
    for i in range(batches):
        s = (i * batch) % max(1, n - batch + 1)
        module(xtr[s:s + batch])
    for bn in bns:
        bn.momentum = 0.1
    if not was_training:
        module.eval()


@torch.no_grad()
def _accuracy(module, x, y, batch: int = 1024) -> float:
    # eval mode: batch norm must use running statistics, matching what the
    # folded (deployed) weights will compute
    was_training = module.training
    module.eval()
    hits = 0
    for s in range(0, x.shape[0], batch):
        _, logits = module(x[s:s + batch])
        if logits.shape[1] == 1:
            pred = (logits[:, 0] > 0).long()
        else:
            pred = logits.argmax(1)
        hits += (pred == y[s:s + batch]).sum().item()
    if was_training:
        module.train()
    return hits / x.shape[0]


def _maybe_compile(module: nn.Module, total_iters: int, threshold: int = 400):
    """Fuse the training forward with torch.compile when the run is long
    enough to amortize compilation; DTNN_NO_COMPILE=1 forces eager."""
    if os.environ.get("DTNN_NO_COMPILE") or total_iters < threshold:
        return module
    try:
        return torch.compile(module, dynamic=False)
    except Exception:
        return module


def _fit(module: nn.Module, xtr, ytr, xte, yte, cfg: TrainConfig,
         compile_steps: bool = False):
    """Shared loop; returns history rows [(iteration, epoch, loss, test_acc)]."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(max(1, cfg.threads))
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer([p for p in module.parameters() if p.requires_grad], cfg)
    n = xtr.shape[0]
    per_epoch = max(1, n // cfg.batch_size)
    total = cfg.iterations if cfg.iterations else cfg.epochs * per_epoch
    stepper = _maybe_compile(module, total) if compile_steps else module
    history = []
    best_acc, best_state, stale = -1.0, None, 0
    perm = rng.permutation(n)
    cursor = 0
    loss_sum, loss_n = 0.0, 0
    for it in range(1, total + 1):
        if cursor + cfg.batch_size > n:
            perm = rng.permutation(n)
            cursor = 0
            epoch_now = (it - 1) // per_epoch
            if cfg.lr_decay_every and epoch_now and epoch_now % cfg.lr_decay_every == 0:
                for g in opt.param_groups:
                    g["lr"] = cfg.lr * (cfg.lr_decay ** (epoch_now // cfg.lr_decay_every))
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        xb = xtr[idx]
        yb = ytr[idx]
        opt.zero_grad()
        _, logits = stepper(xb)
        loss = _loss_fn(logits, yb)
        if not torch.isfinite(loss):
            raise TrainingError(f"training diverged (non-finite loss) at iteration {it}")
        loss.backward()
        opt.step()
        loss_sum += loss.item()
        loss_n += 1
        eval_now = (cfg.eval_every and it % cfg.eval_every == 0) or it == total
        if eval_now:
            _refresh_bn_stats(module, xtr, batches=8, batch=cfg.batch_size)
            sub = min(cfg.eval_subset or xte.shape[0], xte.shape[0])
            acc = _accuracy(module, xte[:sub], yte[:sub])
            history.append((it, it / per_epoch, loss_sum / max(loss_n, 1), acc))
            if os.environ.get("DTNN_VERBOSE"):
                print(f"  iter {it}/{total} loss {history[-1][2]:.4f} "
                      f"acc {acc:.4f}", file=sys.stderr, flush=True)
            loss_sum, loss_n = 0.0, 0
            if acc > best_acc:
                best_acc, stale = acc, 0
                best_state = copy.deepcopy(module.state_dict())
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    break
    if best_state is not None:
        module.load_state_dict(best_state)
    _refresh_bn_stats(module, xtr, batches=40, batch=cfg.batch_size)
    return history


def _tensors(dataset: LabeledImages, flat: bool):
    xtr = torch.tensor(np.asarray(dataset.train_images), dtype=torch.float32)
    xte = torch.tensor(np.asarray(dataset.test_images), dtype=torch.float32)
    if flat:
        xtr = xtr.reshape(xtr.shape[0], -1)
        xte = xte.reshape(xte.shape[0], -1)
    else:
        xtr = xtr.reshape(xtr.shape[0], 1, *xtr.shape[1:3])
        xte = xte.reshape(xte.shape[0], 1, *xte.shape[1:3])
    ytr = torch.tensor(np.asarray(dataset.train_labels), dtype=torch.long)
    yte = torch.tensor(np.asarray(dataset.test_labels), dtype=torch.long)
    return xtr, ytr, xte, yte


def _wants_norm(net: DtreeNetwork) -> bool:
    """Sign trees need per-node normalization to keep gradients inside the
    STE window; identity/relu trees train fine without."""
    return any(isinstance(l, (TreeDenseLayer, TreeConvLayer))
               and l.bundle.kind == "type2" and l.bundle.root_act == "sign"
               for l in net.layers)


def train(net: DtreeNetwork, dataset: LabeledImages, cfg: TrainConfig,
          quantized: bool = True, norm: bool | None = None):
    """Backprop through the fake-quantized forward; returns (net, history).

    Zero epochs/iterations returns the network unchanged (bit-identical).
    """
    cfg.validate()
    if not cfg.epochs and not cfg.iterations:
        return net, []
    flat = len(net.input_shape) == 1
    xtr, ytr, xte, yte = _tensors(dataset, flat)
    if norm is None:
        norm = _wants_norm(net)
    module = TorchNetwork(net, quantized=quantized, norm=norm)
    history = _fit(module, xtr, ytr, xte, yte, cfg)
    return sync_to_network(module, net), history


def train_ensemble(cfg: TrainConfig, structure: str, dataset: LabeledImages,
                   fan_in: int = 6, thresholds=None):
    """Train the five-threshold ensemble jointly end to end."""
    cfg.validate()
    kwargs = {} if thresholds is None else {"thresholds": thresholds}
    ens = build_ensemble(structure, fan_in=fan_in, seed=cfg.seed, **kwargs)
    xtr, ytr, xte, yte = _tensors(dataset, flat=True)
    module = TorchEnsemble(ens)
    history = _fit(module, xtr, ytr, xte, yte, cfg, compile_steps=True)
    ens = sync_to_ensemble(module, ens)
    _calibrate_combiner(ens, np.asarray(dataset.train_images).reshape(-1, 784)[:4096])
    return ens, history


def _calibrate_combiner(ens: EnsembleClassifier, images: np.ndarray) -> None:
    """Size the combiner's 8-bit grid to cover the observed pre-sign sums."""
    mem = ens.member_codes(images).astype(np.int64) * 2 - 1  # {-1, +1}
    sums = (mem * ens.combiner_weights.T[None]).sum(1) + ens.combiner_biases
    bound = float(np.max(np.abs(sums))) * 1.05 + 1e-3
    ens.combiner_spec = QuantSpec(bits=8, lo=-bound, hi=bound)


def predict(ens: EnsembleClassifier, image) -> int:
    """Class of the single set combiner bit; ties and all-zero cases fall
    back to the highest pre-binarization sum."""
    image = np.asarray(image, dtype=np.float64).reshape(-1)
    return int(ens.predict(image[None])[0])


# ---------------------------------------------------------------------------
# LeNet pipeline: float pretrain, convert, calibrate, quantized fine-tune


class PlainLenet(nn.Module):
    """Native-kernel float LeNet used only for pretraining; its weights map
    one-to-one onto the Type-I tree network (trees with unit inner weights
    compute the same sums, so this is purely a speed choice)."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(400, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        logits = self.fc3(x)
        return logits, logits


def _plain_to_net(module: PlainLenet, net: DtreeNetwork) -> DtreeNetwork:
    """Copy plain conv/linear weights into the Type-I tree network: kernels
    and rows become leaf weights, biases go to the tree roots."""
    conv1, _, conv2, _, _, fc1, fc2, fc3 = net.layers
    conv1.weights = _to64(module.conv1.weight)
    conv1.bias = _to64(module.conv1.bias)
    pairs = [(conv2, module.conv2), (fc1, module.fc1), (fc2, module.fc2),
             (fc3, module.fc3)]
    for layer, src in pairs:
        b = layer.bundle
        b.leaf = _to64(src.weight).reshape(b.leaf.shape[0], -1)
        b.biases[-1] = _to64(src.bias).reshape(-1, 1)
    return net


def pretrain_lenet_plain(dataset: LabeledImages, cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    module = PlainLenet()
    xtr, ytr, xte, yte = _tensors(dataset, flat=False)
    history = _fit(module, xtr, ytr, xte, yte, cfg)
    return module, history


def train_lenet5(dataset: LabeledImages, act_bits: int, fan_in: int = 2,
                 pretrain: TrainConfig = LENET_PRETRAIN_CONFIG,
                 finetune: TrainConfig = LENET_FINETUNE_CONFIG,
                 seed: int = 1, calib_images: int = 1024,
                 pretrained: DtreeNetwork | None = None):
    """Returns (net, history). The float network is trained once (or passed
    in via `pretrained`), converted to Type-I trees, range-calibrated, and
    fine-tuned with fake quantization at every tree node."""
    net = build_model("lenet5", fan_in=fan_in, act_bits=act_bits, seed=seed)
    history = []
    if pretrained is None:
        module, history = pretrain_lenet_plain(dataset, replace(pretrain, seed=seed))
        net = _plain_to_net(module, net)
    else:
        net = _transfer_type1(pretrained, net)
    calib = np.asarray(dataset.train_images[:calib_images], dtype=np.float64)
    calib = calib.reshape(-1, 1, 28, 28)
    calibrate(net, calib)
    if finetune.epochs or finetune.iterations:
        cfg = replace(finetune, seed=seed)
        net, hist2 = train(net, dataset, cfg, quantized=True)
        history = history + hist2
    return net, history


def _transfer_type1(src: DtreeNetwork, dst: DtreeNetwork) -> DtreeNetwork:
    """Copy float weights between Type-I networks: leaf weights and root
    biases are flat views of the conventional parameters, so they carry
    across any (fan_in, act_bits) combination unchanged."""
    for ls, ld in zip(src.layers, dst.layers):
        if isinstance(ld, FpConvLayer):
            ld.weights = ls.weights.copy()
            ld.bias = ls.bias.copy()
        elif isinstance(ld, (TreeDenseLayer, TreeConvLayer)):
            ld.bundle.leaf = ls.bundle.leaf.copy()
            ld.bundle.biases[-1] = ls.bundle.biases[-1].copy()
    return dst
