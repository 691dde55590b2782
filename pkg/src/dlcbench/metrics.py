"""Accuracy metrics, confusion matrices, parameter/memory ledgers, and
empirical feature-drift measurement between model snapshots."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .buffer import images_to_tensor
from .errors import DimensionError
from .substrate import FeatureExtractor

BYTES_PER_MB = 2 ** 20


def stage_accuracy(predictions, labels) -> float:
    """Percent correct over one evaluation pass."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(
            f"predictions {predictions.shape} vs labels {labels.shape}"
        )
    if predictions.size == 0:
        raise ValueError("cannot score an empty evaluation")
    return 100.0 * float((predictions == labels).sum()) / predictions.size


def average_accuracy(stage_accuracies) -> float:
    values = list(stage_accuracies)
    if not values:
        raise ValueError("cannot average zero stages")
    return float(sum(values)) / len(values)


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """counts[i, j] = samples of true class i predicted as class j."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    for name, values in (("predictions", predictions), ("labels", labels)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(
                f"{name} outside [0, {num_classes}): {values.min()}..{values.max()}"
            )
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


@dataclass(frozen=True)
class MemoryLedger:
    param_count: int
    bytes_per_param: int
    exemplar_count: int
    bytes_per_exemplar: int

    @property
    def model_bytes(self) -> int:
        return self.param_count * self.bytes_per_param

    @property
    def exemplar_bytes(self) -> int:
        return self.exemplar_count * self.bytes_per_exemplar

    @property
    def total_mb(self) -> float:
        return (self.model_bytes + self.exemplar_bytes) / BYTES_PER_MB


def memory_ledger(param_count: int, bytes_per_param: int, exemplar_count: int,
                  bytes_per_exemplar: int) -> MemoryLedger:
    if min(param_count, bytes_per_param, exemplar_count, bytes_per_exemplar) < 0:
        raise ValueError("memory ledger arguments must be non-negative")
    return MemoryLedger(param_count, bytes_per_param, exemplar_count, bytes_per_exemplar)


@dataclass(frozen=True)
class ParameterReport:
    lora_total: int
    extractor_total: int
    heads_total: int
    gate_total: int

    @property
    def model_total(self) -> int:
        return self.lora_total + self.extractor_total + self.heads_total + self.gate_total


def parameter_report(state) -> ParameterReport:
    """Literal scalar counts of every stored component of the learner."""
    lora_total = sum(pset.param_count() for pset in state.plugin_sets)
    extractor_total = sum(p.numel() for p in state.extractor.parameters())
    heads_total = 0
    for head in (state.base_head, state.aggregate_head):
        if head is not None:
            heads_total += sum(p.numel() for p in head.parameters())
    gate_total = 0
    if state.gate_unit is not None:
        gate_total = sum(p.numel() for p in state.gate_unit.parameters())
    return ParameterReport(lora_total, extractor_total, heads_total, gate_total)


@dataclass(frozen=True)
class DriftReport:
    layer: str
    probe_size: int
    mean_l2: float
    max_l2: float


def _check_same_architecture(before: FeatureExtractor, after: FeatureExtractor) -> None:
    if before.tap_names() != after.tap_names():
        raise DimensionError("snapshots have different tap registries")
    for tap in before.tap_names():
        if before.tap_conv(tap).weight.shape != after.tap_conv(tap).weight.shape:
            raise DimensionError(f"snapshots disagree on {tap} geometry")


def measure_drift(model_before: FeatureExtractor, model_after: FeatureExtractor,
                  layer: str, probe: np.ndarray | torch.Tensor) -> DriftReport:
    """Mean/max per-sample L2 distance between the two snapshots' outputs
    at the named tap, on a fixed probe batch."""
    _check_same_architecture(model_before, model_after)
    if layer not in model_before.tap_names():
        raise DimensionError(f"unknown tap {layer!r}")
    if isinstance(probe, np.ndarray):
        probe = images_to_tensor(probe)
    if probe.shape[0] == 0:
        raise ValueError("drift probe must be non-empty")
    model_before.eval()
    model_after.eval()
    with torch.no_grad():
        out_before = model_before.layer_outputs(probe)[layer]
        out_after = model_after.layer_outputs(probe)[layer]
        delta = (out_after - out_before).flatten(1)
        dists = torch.linalg.vector_norm(delta, dim=1)
    return DriftReport(layer=layer, probe_size=int(probe.shape[0]),
                       mean_l2=float(dists.mean()), max_l2=float(dists.max()))


def drift_all_taps(model_before: FeatureExtractor, model_after: FeatureExtractor,
                   probe) -> list[DriftReport]:
    return [measure_drift(model_before, model_after, tap, probe)
            for tap in model_before.tap_names()]


@dataclass
class StageRecord:
    stage: int
    known_classes: int
    a_b: float
    a_mean_so_far: float
    lora_params: int
    extractor_params: int
    buffer_count: int
    memory_mb: float


@dataclass
class MetricsReport:
    stages: list[StageRecord] = field(default_factory=list)
    confusions: list[np.ndarray] = field(default_factory=list)

    @property
    def stage_accuracies(self) -> list[float]:
        return [s.a_b for s in self.stages]

    @property
    def a_bar(self) -> float:
        return average_accuracy(self.stage_accuracies)

    @property
    def a_last(self) -> float:
        if not self.stages:
            raise ValueError("empty report")
        return self.stages[-1].a_b
