"""Builds trainable staged ResNet-style networks from architecture configs.

Parameter names follow a fixed (stage, layer, role) scheme, e.g.
``stages.2.0.conv1.weight`` or ``stages.2.0.shortcut.1.running_mean``; the
remapping module slices tensors by these names, so the scheme is a contract.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import SpaceValidationError
from .space import ArchConfig, SearchSpaceSpec


class ShapeError(SpaceValidationError):
    """Input tensor does not match the shape the spec declares."""


class ResidualBlock(nn.Module):
    """Two 3x3 convs with BN and a projection shortcut.

    Every block projects; a conditional identity shortcut would leave some
    student positions without a teacher tensor to slice from, forcing the
    remapping to invent parameters.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
            nn.BatchNorm2d(out_ch),
        )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class StagedNetwork(nn.Module):
    """Stem, then one module list of residual blocks per stage, then a linear
    head over the globally pooled stage-M feature map.

    The stage-M map has ``spec.base_widths[-1]`` channels for every config in
    the space, because the last block of each stage is pinned to ratio 1.
    """

    def __init__(self, spec: SearchSpaceSpec, config: ArchConfig, num_classes: int):
        super().__init__()
        config.validate(spec)
        if num_classes < 1:
            raise SpaceValidationError(f"num_classes must be >= 1, got {num_classes}")
        self.spec = spec
        self.config = config
        self.num_classes = num_classes

        c_in = spec.input_shape[0]
        stem_w = spec.base_widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(c_in, stem_w, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(stem_w),
            nn.ReLU(inplace=True),
        )
        widths = config.layer_widths(spec)
        stages = []
        prev = stem_w
        for m in range(spec.num_stages):
            blocks = []
            for o, out_ch in enumerate(widths[m]):
                stride = 2 if (o == 0 and m > 0) else 1
                blocks.append(ResidualBlock(prev, out_ch, stride))
                prev = out_ch
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(prev, num_classes)

    def _check_input(self, x: torch.Tensor):
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(
                f"expected batch of shape (N, {', '.join(map(str, self.spec.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def stage_forward(self, m: int, x: torch.Tensor) -> torch.Tensor:
        """Apply only the blocks of stage ``m``."""
        for block in self.stages[m]:
            x = block(x)
        return x

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Feature map after each stage, shallow to deep."""
        self._check_input(x)
        h = self.stem(x)
        maps = []
        for m in range(len(self.stages)):
            h = self.stage_forward(m, h)
            maps.append(h)
        return maps

    def forward(self, x: torch.Tensor, features_only: bool = False) -> torch.Tensor:
        """Logits, or the stage-M feature map when ``features_only`` is set
        (the flag lets functional parameter substitution reach the feature
        path, which only dispatches through forward)."""
        feats = self.forward_features(x)
        if features_only:
            return feats[-1]
        pooled = feats[-1].mean(dim=(2, 3))
        return self.head(pooled)


def build(
    spec: SearchSpaceSpec, config: ArchConfig, num_classes: int, rng_seed: int
) -> StagedNetwork:
    """Construct a network with seed-deterministic initialization.

    The global torch RNG state is forked, so callers' random streams are
    unaffected.
    """
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        net = StagedNetwork(spec, config, num_classes)
    return net


def parameter_table(net: StagedNetwork) -> dict[str, torch.Tensor]:
    """Full named-tensor table: trainable parameters plus buffers (norm
    running stats). This is the object remapping and checkpoints exchange."""
    table = {name: p.detach().clone() for name, p in net.named_parameters()}
    for name, b in net.named_buffers():
        table[name] = b.detach().clone()
    return table


def load_table(net: StagedNetwork, table: dict[str, torch.Tensor]) -> StagedNetwork:
    """Copy a parameter table into a network built for the matching config."""
    net.load_state_dict(table)
    return net
