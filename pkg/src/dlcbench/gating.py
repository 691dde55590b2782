"""Channel-importance gate over concatenated per-task representations.

A bottleneck pair of linear layers with a sigmoid produces one weight in
(0, 1) per channel of the concatenated feature vector. Training targets
are block-structured: for a sample from task t, channels produced by
plugins of earlier tasks ("pre" blocks) aim at 0 and the rest ("pos"
blocks) at 1, so unrelated task residuals get suppressed.

The up-projection bias starts at +2 (sigmoid ~= 0.88), so a fresh or
freshly grown gate is close to a pass-through and suppression has to be
earned by the importance loss; starting at the sigmoid midpoint instead
measurably hurts the aggregate classifier.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .seeding import torch_generator

GROW_INIT_STD = 0.02
UP_BIAS_INIT = 2.0


def hidden_width(k_gate: int) -> int:
    """Squeeze-style bottleneck width: k/16, floored at 4."""
    return max(k_gate // 16, 4)


class WeightingUnit(nn.Module):
    """sigmoid(linear(relu(linear(x)))) with output in (0,1)^k."""

    def __init__(self, k_gate: int, d_hidden: int):
        super().__init__()
        if k_gate < 1 or d_hidden < 1:
            raise ConfigError("gate dims must be positive")
        self.k_gate = k_gate
        self.d_hidden = d_hidden
        self.w_down = nn.Parameter(torch.empty(d_hidden, k_gate))
        self.b_down = nn.Parameter(torch.zeros(d_hidden))
        self.w_up = nn.Parameter(torch.empty(k_gate, d_hidden))
        self.b_up = nn.Parameter(torch.zeros(k_gate))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return weighting_forward(self, x)


def weighting_forward(unit: WeightingUnit, features: torch.Tensor) -> torch.Tensor:
    if features.shape[-1] != unit.k_gate:
        raise DimensionError(
            f"gate expects width {unit.k_gate}, got {tuple(features.shape)}"
        )
    hidden = F.relu(F.linear(features, unit.w_down, unit.b_down))
    return torch.sigmoid(F.linear(hidden, unit.w_up, unit.b_up))


def apply_gate(omega: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    if omega.shape != features.shape:
        raise DimensionError(
            f"gate/feature width mismatch: {tuple(omega.shape)} vs {tuple(features.shape)}"
        )
    return omega * features


def new_unit(k_gate: int, seed: int) -> WeightingUnit:
    unit = WeightingUnit(k_gate, hidden_width(k_gate))
    gen = torch_generator(seed)
    with torch.no_grad():
        unit.w_down.normal_(0.0, GROW_INIT_STD, generator=gen)
        unit.b_down.zero_()
        unit.w_up.normal_(0.0, GROW_INIT_STD, generator=gen)
        unit.b_up.fill_(UP_BIAS_INIT)
    return unit


def grow_unit(old: WeightingUnit | None, new_k_gate: int, d_feat: int,
              seed: int) -> WeightingUnit:
    """Wider unit warm-started bitwise from the old parameter blocks.

    With no prior unit this is a fresh unit of width ``new_k_gate``.
    """
    if new_k_gate % d_feat != 0:
        raise ConfigError(f"k_gate {new_k_gate} not divisible by d_feat {d_feat}")
    if old is None:
        return new_unit(new_k_gate, seed)
    if new_k_gate <= old.k_gate:
        raise ConfigError(f"gate can only grow: {old.k_gate} -> {new_k_gate}")
    grown = new_unit(new_k_gate, seed)
    with torch.no_grad():
        grown.w_down[: old.d_hidden, : old.k_gate].copy_(old.w_down)
        grown.b_down[: old.d_hidden].copy_(old.b_down)
        grown.w_up[: old.k_gate, : old.d_hidden].copy_(old.w_up)
        grown.b_up[: old.k_gate].copy_(old.b_up)
    return grown


def ideal_weights(sample_task_id: int, task_count: int, d_feat: int) -> torch.Tensor:
    """Per-channel {0,1} targets: 0 on blocks of tasks before the sample's."""
    if not 1 <= sample_task_id <= task_count:
        raise ConfigError(
            f"sample task id {sample_task_id} outside 1..{task_count}"
        )
    target = torch.ones(task_count * d_feat)
    target[: (sample_task_id - 1) * d_feat] = 0.0
    return target


def batch_ideal_weights(task_ids: torch.Tensor, task_count: int, d_feat: int) -> torch.Tensor:
    rows = [ideal_weights(int(t), task_count, d_feat) for t in task_ids]
    return torch.stack(rows)


def loss_ia(omega: torch.Tensor, omega_ideal: torch.Tensor) -> torch.Tensor:
    """Mean squared gap to the ideal weights (squared L2 / element count)."""
    if omega.shape != omega_ideal.shape:
        raise DimensionError(
            f"gate/ideal width mismatch: {tuple(omega.shape)} vs {tuple(omega_ideal.shape)}"
        )
    return ((omega - omega_ideal) ** 2).mean()
