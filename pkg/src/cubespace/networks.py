"""Network building blocks: encoder/decoder schedules, action heads and Back-to-Logit.

Layer stacks are described by plain tuples (a "layer schedule") so they can be
stored next to the weights and rebuilt exactly.  Images travel through the
public API channels-last, ``(N, H, W, C)``; the convolutional stacks work
channels-first internally.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

BN_EPS = 1e-3

Schedule = list  # list of tuples, e.g. [("conv", 5, 32), ("relu",)]


class ConfigurationError(ValueError):
    pass


class GaussianNoise(nn.Module):
    """Adds N(0, stddev) to its input in training mode only."""

    def __init__(self, stddev: float):
        super().__init__()
        self.stddev = stddev

    def forward(self, x):
        if self.training and self.stddev > 0:
            return x + torch.randn_like(x) * self.stddev
        return x


def encoder_schedule(F: int, channels: int = 32, kernel: int = 5, noise: float = 0.2,
                     dropout: float = 0.2) -> Schedule:
    block = [("conv", kernel, channels), ("relu",), ("bn",), ("dropout", dropout)]
    return [("noise", noise), ("bn",), *block, *block, ("conv", kernel, channels),
            ("flatten",), ("fc", F)]


def decoder_schedule(image_shape: Sequence[int], channels: int = 32, kernel: int = 5,
                     dropout: float = 0.2) -> Schedule:
    H, W, C = image_shape
    block = [("conv", kernel, channels), ("relu",), ("bn",), ("dropout", dropout)]
    return [("fc", H * W), ("reshape", (1, H, W)), ("bn",), *block, *block, ("conv", kernel, C)]


def action_schedule(A: int, hidden: int = 1000, dropout: float = 0.2) -> Schedule:
    return [("sigmoid",), ("fc", hidden), ("relu",), ("bn",), ("dropout", dropout), ("fc", A)]


def build(schedule: Schedule, input_shape: Sequence[int]) -> nn.Sequential:
    """Instantiate a schedule for inputs of shape ``input_shape`` (without batch axis)."""
    shape = tuple(input_shape)
    layers: list[nn.Module] = []
    for desc in schedule:
        kind = desc[0]
        if kind == "noise":
            layers.append(GaussianNoise(desc[1]))
        elif kind == "bn":
            layers.append(nn.BatchNorm2d(shape[0], eps=BN_EPS) if len(shape) == 3
                          else nn.BatchNorm1d(shape[0], eps=BN_EPS))
        elif kind == "conv":
            k, c = desc[1], desc[2]
            if len(shape) != 3:
                raise ConfigurationError(f"conv layer needs a (C, H, W) input, got {shape}")
            layers.append(nn.Conv2d(shape[0], c, k, padding=k // 2))
            shape = (c, shape[1], shape[2])
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "sigmoid":
            layers.append(nn.Sigmoid())
        elif kind == "dropout":
            layers.append(nn.Dropout(desc[1]))
        elif kind == "flatten":
            layers.append(nn.Flatten())
            shape = (math.prod(shape),)
        elif kind == "fc":
            if len(shape) != 1:
                raise ConfigurationError(f"fc layer needs a flat input, got {shape}")
            layers.append(nn.Linear(shape[0], desc[1]))
            shape = (desc[1],)
        elif kind == "reshape":
            target = tuple(desc[1])
            if math.prod(target) != math.prod(shape):
                raise ConfigurationError(f"cannot reshape {shape} to {target}")
            layers.append(nn.Unflatten(1, target))
            shape = target
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
    seq = nn.Sequential(*layers)
    _init_weights(seq)
    return seq


def _init_weights(seq: nn.Sequential) -> None:
    mods = list(seq)
    for i, m in enumerate(mods):
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nxt = mods[i + 1] if i + 1 < len(mods) else None
            if isinstance(nxt, nn.ReLU):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            else:
                nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    def __init__(self, image_shape: Sequence[int], F: int, channels: int = 32, kernel: int = 5,
                 noise: float = 0.2, dropout: float = 0.2):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.schedule = encoder_schedule(F, channels, kernel, noise, dropout)
        H, W, C = self.image_shape
        self.net = build(self.schedule, (C, H, W))

    def forward(self, x):
        if tuple(x.shape[1:]) != self.image_shape:
            raise ConfigurationError(
                f"expected images of shape {self.image_shape}, got {tuple(x.shape[1:])}")
        return self.net(x.permute(0, 3, 1, 2))


class Decoder(nn.Module):
    def __init__(self, image_shape: Sequence[int], F: int, channels: int = 32, kernel: int = 5,
                 dropout: float = 0.2):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.schedule = decoder_schedule(self.image_shape, channels, kernel, dropout)
        self.net = build(self.schedule, (F,))

    def forward(self, z):
        return self.net(z).permute(0, 2, 3, 1)


class ActionNet(nn.Module):
    """Action logits from the concatenated pair (l0, l1); sigmoid is applied to the concatenation."""

    def __init__(self, F: int, A: int, hidden: int = 1000, dropout: float = 0.2):
        super().__init__()
        self.schedule = action_schedule(A, hidden, dropout)
        self.net = build(self.schedule, (2 * F,))

    def forward(self, l0, l1):
        return self.net(torch.cat([l0, l1], dim=-1))


class ActionPrior(nn.Module):
    """Single FC(A) head used as applicable(z) or regressable(z)."""

    def __init__(self, F: int, A: int):
        super().__init__()
        self.schedule = [("fc", A)]
        self.net = build(self.schedule, (F,))

    def forward(self, z):
        return self.net(z)


class BackToLogit(nn.Module):
    """logits = BN(z) + BN(M a) for a per-action column matrix M (effects or preconditions)."""

    def __init__(self, F: int, A: int):
        super().__init__()
        self.F, self.A = F, A
        self.matrix = nn.Parameter(torch.empty(F, A))
        nn.init.xavier_uniform_(self.matrix)
        self.bn_z = nn.BatchNorm1d(F, eps=BN_EPS)
        self.bn_e = nn.BatchNorm1d(F, eps=BN_EPS)

    def embed(self, a):
        return a @ self.matrix.T

    def forward(self, z, a):
        return self.bn_z(z) + self.bn_e(self.embed(a))

    def state_slope(self) -> torch.Tensor:
        """Effective per-bit slope of the state path, gamma / sqrt(var + eps)."""
        return self.bn_z.weight.detach() / torch.sqrt(self.bn_z.running_var + self.bn_z.eps)


def btl_apply(z0, a, params: BackToLogit):
    """Successor logits BN(z0) + BN(E a); sampling/determinization is left to the caller."""
    return params(z0, a)


def btl_regress(z1, a, params: BackToLogit):
    """Predecessor logits BN(z1) + BN(P a)."""
    return params(z1, a)


def check_monotonicity(apply: BackToLogit | None = None,
                       regress: BackToLogit | None = None) -> list[tuple[int, str]]:
    """Bits whose state-path batch norm has a negative slope, tagged by path."""
    out = []
    for tag, btl in (("apply", apply), ("regress", regress)):
        if btl is None:
            continue
        for f in torch.nonzero(btl.state_slope() < 0).flatten().tolist():
            out.append((int(f), tag))
    return out


def batchnorm_layers(model: nn.Module) -> list[nn.modules.batchnorm._BatchNorm]:
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@torch.no_grad()
def finalize_batchnorm(model: nn.Module, forward: Callable, batches: Iterable) -> nn.Module:
    """Replace running statistics by exact whole-dataset statistics, layer by layer.

    ``forward(batch)`` must run the model's full pipeline on one batch.  Layers
    are finalized in execution order, each pass running in eval mode so a
    layer's input is computed with every upstream layer already finalized.
    The variance stored is the biased (population) one used for normalization
    in train mode.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("cannot finalize batch normalization on an empty dataset")
    model.eval()
    order: list[nn.Module] = []

    def record(mod, inputs):
        if mod not in order:
            order.append(mod)

    handles = [bn.register_forward_pre_hook(record) for bn in batchnorm_layers(model)]
    try:
        forward(batches[0])
    finally:
        for h in handles:
            h.remove()

    for bn in order:
        mean = _channel_moment(bn, forward, batches, None)
        var = _channel_moment(bn, forward, batches, mean)
        bn.running_mean.copy_(mean.to(bn.running_mean.dtype))
        bn.running_var.copy_(var.to(bn.running_var.dtype))
        bn.num_batches_tracked.fill_(1)
    model.eval()
    return model


def _channel_moment(bn, forward, batches, mean):
    """Per-channel mean of the layer input (mean=None) or of its squared deviation from mean."""
    acc = {"n": 0, "s": 0.0}

    def hook(mod, inputs):
        x = inputs[0].detach().to(torch.float64)
        dims = [0] + list(range(2, x.dim()))
        if mean is not None:
            shape = [1, -1] + [1] * (x.dim() - 2)
            x = (x - mean.view(shape)) ** 2
        acc["n"] += x.numel() // x.shape[1]
        acc["s"] = acc["s"] + x.sum(dim=dims)

    h = bn.register_forward_pre_hook(hook)
    try:
        for b in batches:
            forward(b)
    finally:
        h.remove()
    return acc["s"] / acc["n"]
