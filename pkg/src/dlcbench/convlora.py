"""Low-rank residual adapters for convolutions and per-task plugin sets.

An adapter is a rank-r down-projection convolution (same kernel, stride
and padding as its target layer) followed by a 1x1 up-projection, scaled
by alpha/r and added to the target convolution's output. The up kernel
starts at zero so a fresh adapter is an exact identity on the residual
path. Because the up-projection is 1x1, the two-step path collapses to a
single dense kernel, which serves as an independent test oracle.
"""

from __future__ import annotations

import json

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .seeding import param_checksum, torch_generator
from .substrate import FeatureExtractor

ADAPTER_INIT_STD = 0.02


class ConvLoraAdapter(nn.Module):
    """Rank-r residual adapter for one convolutional layer.

    ``down`` has shape (r, c_in, k, k) and runs with the target layer's
    stride/padding; ``up`` has shape (c_out, r, 1, 1) and runs stride-1
    unpadded, so the residual geometry matches the base path exactly.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rank: int,
                 alpha: float, target_tap: str = "", stride: int = 1,
                 padding: int | None = None):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}")
        if min(c_in, c_out, kernel_size) < 1:
            raise ConfigError("adapter channel/kernel dims must be positive")
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.rank = rank
        self.alpha = float(alpha)
        self.target_tap = target_tap
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.down = nn.Parameter(torch.empty(rank, c_in, kernel_size, kernel_size))
        self.up = nn.Parameter(torch.zeros(c_out, rank, 1, 1))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(
                f"adapter expects (N, {self.c_in}, H, W), got {tuple(x.shape)}"
            )
        z = F.conv2d(x, self.down, stride=self.stride, padding=self.padding)
        return F.conv2d(z, self.up) * self.scale

    def param_count(self) -> int:
        return self.down.numel() + self.up.numel()


def init_adapter(c_in: int, c_out: int, kernel_size: int, rank: int, alpha: float,
                 seed: int, target_tap: str = "", stride: int = 1,
                 padding: int | None = None) -> ConvLoraAdapter:
    """Fresh adapter: Gaussian down kernel, zero up kernel (zero residual)."""
    adapter = ConvLoraAdapter(c_in, c_out, kernel_size, rank, alpha,
                              target_tap=target_tap, stride=stride, padding=padding)
    gen = torch_generator(seed)
    with torch.no_grad():
        adapter.down.normal_(0.0, ADAPTER_INIT_STD, generator=gen)
        adapter.up.zero_()
    return adapter


def adapter_forward(adapter: ConvLoraAdapter, x: torch.Tensor) -> torch.Tensor:
    return adapter(x)


def adapted_forward(conv_weight: torch.Tensor, adapter: ConvLoraAdapter, x: torch.Tensor,
                    stride: int | None = None, padding: int | None = None) -> torch.Tensor:
    """Base convolution plus scaled residual, both with the same geometry."""
    if stride is not None and stride != adapter.stride:
        raise ConfigError(f"stride mismatch: base {stride} vs adapter {adapter.stride}")
    if padding is not None and padding != adapter.padding:
        raise ConfigError(f"padding mismatch: base {padding} vs adapter {adapter.padding}")
    if tuple(conv_weight.shape) != (adapter.c_out, adapter.c_in,
                                    adapter.kernel_size, adapter.kernel_size):
        raise ConfigError(
            f"conv weight {tuple(conv_weight.shape)} does not match adapter "
            f"({adapter.c_out}, {adapter.c_in}, {adapter.kernel_size}, {adapter.kernel_size})"
        )
    base = F.conv2d(x, conv_weight, stride=adapter.stride, padding=adapter.padding)
    return base + adapter(x)


def plugin_param_count(c_in: int, c_out: int, kernel_size: int, rank: int) -> int:
    """Stored scalars of one adapter: r * (c_in * k^2 + c_out)."""
    if min(c_in, c_out, kernel_size, rank) < 1:
        raise ConfigError("all plugin count arguments must be >= 1")
    return rank * (c_in * kernel_size * kernel_size + c_out)


def merge_equivalent_kernel(adapter: ConvLoraAdapter) -> torch.Tensor:
    """Dense (c_out, c_in, k, k) kernel equivalent to the two-step path.

    Valid because the up kernel is 1x1: convolving the input with the
    merged kernel and scaling by alpha/r reproduces ``adapter(x)``.
    """
    if adapter.up.shape[-2:] != (1, 1):
        raise ConfigError("merge oracle requires a 1x1 up-projection kernel")
    return torch.einsum("or,rikl->oikl", adapter.up[:, :, 0, 0], adapter.down)


class PluginSet(nn.Module):
    """The per-task group of adapters, ordered deepest tap first."""

    def __init__(self, task_id: int, adapters: list[ConvLoraAdapter]):
        super().__init__()
        self.task_id = task_id
        self.adapters = nn.ModuleList(adapters)
        self.frozen = False

    def adapter_map(self) -> dict[str, ConvLoraAdapter]:
        return {a.target_tap: a for a in self.adapters}

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.frozen = True

    def checksum(self) -> str:
        return param_checksum(self)

    def param_count(self) -> int:
        return sum(a.param_count() for a in self.adapters)


def default_rank(c_out: int) -> int:
    """Per-layer rank rule: 8 up to 64 output channels, 16 beyond."""
    return 8 if c_out <= 64 else 16


def make_plugin_set(extractor: FeatureExtractor, task_id: int, k_plugins: int,
                    seed: int, rank: int = 0, alpha: float = 0.0) -> PluginSet:
    """Fresh adapters for the deepest ``k_plugins`` taps of the extractor.

    ``rank=0`` applies the per-layer channel rule; ``alpha=0`` uses
    alpha = rank so the effective residual scale is 1.
    """
    taps = extractor.tap_names()
    if not 1 <= k_plugins <= len(taps):
        raise ConfigError(f"k_plugins must be in [1, {len(taps)}], got {k_plugins}")
    adapters = []
    for depth, tap in enumerate(taps[:k_plugins]):
        conv = extractor.tap_conv(tap)
        r = rank if rank >= 1 else default_rank(conv.out_channels)
        a = alpha if alpha > 0 else float(r)
        adapters.append(init_adapter(
            conv.in_channels, conv.out_channels, conv.kernel_size[0], r, a,
            seed=seed + depth, target_tap=tap,
            stride=conv.stride[0], padding=conv.padding[0],
        ))
    return PluginSet(task_id, adapters)


class AdaptedExtractor:
    """Read-only view of an extractor with one plugin set attached.

    The underlying extractor is untouched; dropping the view restores the
    plain forward exactly.
    """

    def __init__(self, extractor: FeatureExtractor, plugin_set: PluginSet):
        self.extractor = extractor
        self.plugin_set = plugin_set
        self._adapters = plugin_set.adapter_map()

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x, adapters=self._adapters)

    def layer_outputs(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        return self.extractor.layer_outputs(x, adapters=self._adapters)


def attach_plugin_set(extractor: FeatureExtractor, plugin_set: PluginSet) -> AdaptedExtractor:
    registry = set(extractor.tap_names())
    for adapter in plugin_set.adapters:
        if adapter.target_tap not in registry:
            raise DimensionError(
                f"adapter targets unknown tap {adapter.target_tap!r}; registry {sorted(registry)}"
            )
        conv = extractor.tap_conv(adapter.target_tap)
        if (conv.in_channels, conv.out_channels) != (adapter.c_in, adapter.c_out) \
                or conv.kernel_size[0] != adapter.kernel_size \
                or conv.stride[0] != adapter.stride or conv.padding[0] != adapter.padding:
            raise ConfigError(
                f"adapter for {adapter.target_tap!r} does not match the target conv geometry"
            )
    return AdaptedExtractor(extractor, plugin_set)


def serialize_adapter(adapter: ConvLoraAdapter, task_id: int) -> bytes:
    """One adapter as a JSON header line plus raw LE float32 A then B."""
    header = {
        "task_id": task_id,
        "tap": adapter.target_tap,
        "c_in": adapter.c_in,
        "c_out": adapter.c_out,
        "kernel": adapter.kernel_size,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "stride": adapter.stride,
        "padding": adapter.padding,
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    blob += adapter.down.detach().numpy().astype("<f4", copy=False).tobytes()
    blob += adapter.up.detach().numpy().astype("<f4", copy=False).tobytes()
    return blob


def deserialize_adapter(blob: bytes) -> tuple[ConvLoraAdapter, int]:
    newline = blob.index(b"\n")
    header = json.loads(blob[:newline].decode())
    adapter = ConvLoraAdapter(
        header["c_in"], header["c_out"], header["kernel"], header["rank"],
        header["alpha"], target_tap=header["tap"],
        stride=header["stride"], padding=header["padding"],
    )
    offset = newline + 1
    down_bytes = adapter.down.numel() * 4
    up_bytes = adapter.up.numel() * 4
    if len(blob) != offset + down_bytes + up_bytes:
        raise ValueError("adapter blob length does not match its header")
    with torch.no_grad():
        down = np.frombuffer(blob, dtype="<f4", count=adapter.down.numel(), offset=offset)
        adapter.down.copy_(torch.from_numpy(down.copy()).view_as(adapter.down))
        up = np.frombuffer(blob, dtype="<f4", count=adapter.up.numel(),
                           offset=offset + down_bytes)
        adapter.up.copy_(torch.from_numpy(up.copy()).view_as(adapter.up))
    return adapter, header["task_id"]
