"""Convolutional backbone, classifier heads, and named layer taps.

The extractor is a plain stack of conv -> batch-norm -> ReLU -> pool
stages ending in global average pooling. Each convolution is registered
in a tap registry (deepest layer first) so residual adapters can be
injected per layer and per-layer outputs can be probed for drift
measurement.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .seeding import torch_generator


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description: ordered (c_in, c_out, kernel) conv stages."""

    conv_stages: tuple[tuple[int, int, int], ...]
    feature_dim: int

    def validate(self) -> None:
        if not self.conv_stages:
            raise ConfigError("backbone needs at least one conv stage")
        for c_in, c_out, k in self.conv_stages:
            if min(c_in, c_out, k) < 1:
                raise ConfigError(f"non-positive stage dims ({c_in}, {c_out}, {k})")
        for i in range(len(self.conv_stages) - 1):
            c_out = self.conv_stages[i][1]
            c_in_next = self.conv_stages[i + 1][0]
            if c_out != c_in_next:
                raise ConfigError(
                    f"stage {i + 1} outputs {c_out} channels but stage {i + 2} expects {c_in_next}"
                )
        if self.feature_dim != self.conv_stages[-1][1]:
            raise ConfigError(
                f"feature_dim {self.feature_dim} != final stage channels {self.conv_stages[-1][1]}"
            )


def default_backbone_spec(in_channels: int = 3, channels: tuple[int, ...] = (16, 32, 64, 64),
                          kernel: int = 3) -> BackboneSpec:
    stages = []
    prev = in_channels
    for c in channels:
        stages.append((prev, c, kernel))
        prev = c
    return BackboneSpec(conv_stages=tuple(stages), feature_dim=channels[-1])


class FeatureExtractor(nn.Module):
    """Stacked conv stages with a tap registry and optional per-tap adapters.

    Taps are named ``conv1`` .. ``convN`` in forward order; the registry
    lists them deepest-first. An adapter passed for a tap receives the
    tap's input and its output is added to the convolution output before
    normalization.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for c_in, c_out, k in spec.conv_stages:
            self.convs.append(nn.Conv2d(c_in, c_out, k, stride=1, padding=k // 2, bias=False))
            self.norms.append(nn.BatchNorm2d(c_out))

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def tap_names(self) -> list[str]:
        """Convolution tap names, deepest layer first."""
        return [f"conv{i + 1}" for i in reversed(range(len(self.convs)))]

    def tap_conv(self, tap: str) -> nn.Conv2d:
        index = self._tap_index(tap)
        return self.convs[index]

    def _tap_index(self, tap: str) -> int:
        if tap not in set(self.tap_names()):
            raise DimensionError(f"unknown tap {tap!r}; registry: {self.tap_names()}")
        return int(tap.removeprefix("conv")) - 1

    def _run(self, x: torch.Tensor, adapters=None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.spec.conv_stages[0][0]:
            raise DimensionError(
                f"expected input (N, {self.spec.conv_stages[0][0]}, H, W), got {tuple(x.shape)}"
            )
        adapters = adapters or {}
        taps: dict[str, torch.Tensor] = {}
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            name = f"conv{i + 1}"
            out = conv(h)
            adapter = adapters.get(name)
            if adapter is not None:
                out = out + adapter(h)
            taps[name] = out
            h = F.relu(norm(out))
            if h.shape[-2] >= 2 and h.shape[-1] >= 2:
                h = F.max_pool2d(h, 2)
        features = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return features, taps

    def forward(self, x: torch.Tensor, adapters=None) -> torch.Tensor:
        return self._run(x, adapters)[0]

    def layer_outputs(self, x: torch.Tensor, adapters=None) -> dict[str, torch.Tensor]:
        """Per-tap convolution outputs (after any adapter residual)."""
        return self._run(x, adapters)[1]


def build_backbone(spec: BackboneSpec, seed: int) -> FeatureExtractor:
    """Deterministically initialized extractor; same (spec, seed) is bitwise-identical."""
    spec.validate()
    extractor = FeatureExtractor(spec)
    gen = torch_generator(seed)
    with torch.no_grad():
        for conv in extractor.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
        for norm in extractor.norms:
            norm.weight.fill_(1.0)
            norm.bias.fill_(0.0)
    return extractor


class ClassifierHead(nn.Module):
    """Linear head; ``weight`` is laid out (input_width, num_classes)."""

    ROLES = ("base", "aggregate", "auxiliary")

    def __init__(self, input_width: int, num_classes: int, role: str = "base"):
        super().__init__()
        if role not in self.ROLES:
            raise ConfigError(f"unknown head role {role!r}")
        if input_width < 1 or num_classes < 1:
            raise ConfigError("head dims must be positive")
        self.role = role
        self.weight = nn.Parameter(torch.zeros(input_width, num_classes))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    @property
    def input_width(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return forward_logits(self, features)


def new_head(input_width: int, num_classes: int, role: str, seed: int) -> ClassifierHead:
    head = ClassifierHead(input_width, num_classes, role)
    gen = torch_generator(seed)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    return head


def forward_logits(head: ClassifierHead, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != head.input_width:
        raise DimensionError(
            f"head expects width {head.input_width}, got {tuple(features.shape)}"
        )
    return features @ head.weight + head.bias


def grow_head(head: ClassifierHead, new_input_width: int, new_num_classes: int) -> ClassifierHead:
    """Grow a head; the old weight block is copied bitwise, new entries are zero.

    Zero-filled cross blocks mean a freshly grown head ignores new feature
    blocks and scores new classes at the bias origin, avoiding logit shock
    at task boundaries.
    """
    if new_input_width < head.input_width or new_num_classes < head.num_classes:
        raise ConfigError(
            f"head can only grow: ({head.input_width}, {head.num_classes}) -> "
            f"({new_input_width}, {new_num_classes})"
        )
    grown = ClassifierHead(new_input_width, new_num_classes, head.role)
    with torch.no_grad():
        grown.weight[: head.input_width, : head.num_classes].copy_(head.weight)
        grown.bias[: head.num_classes].copy_(head.bias)
    return grown
