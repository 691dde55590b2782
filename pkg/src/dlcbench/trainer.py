"""Two-phase incremental trainer and the full learner state.

Phase 1 of each stage trains the extractor and base head exactly as the
chosen base method would (cross-entropy plus optional distillation over
old-class logits); plugins, gate and aggregate head are untouched, so
the extractor trajectory is bitwise identical to a run without them.
Phase 2 freezes the extractor (including batch-norm statistics), then
trains the stage's plugin set, the gate, and the aggregate head on the
same data. The finished plugin set is frozen permanently.

All randomness is drawn from generators derived from (seed, label path),
so adding phase 2 never perturbs the phase-1 streams.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from .buffer import ExemplarBuffer, images_to_tensor
from .convlora import PluginSet, attach_plugin_set, make_plugin_set
from .errors import ConfigError, ProtocolError, TrainingError
from .gating import WeightingUnit, batch_ideal_weights, grow_unit, loss_ia
from .losses import loss_aux, loss_ce, loss_kd_ce, loss_kd_kl
from .seeding import derive_seed, numpy_rng
from .streams import Task
from .substrate import (BackboneSpec, ClassifierHead, FeatureExtractor,
                        build_backbone, grow_head, new_head)

METHODS = ("replay", "distill", "replay+distill")
DISTILL_VARIANTS = ("ce", "kl")


@dataclass
class TrainConfig:
    method: str = "replay+distill"
    dlc: bool = True
    gate: bool = True
    phase1_epochs: int = 12
    phase2_epochs: int = 0  # 0 -> max(1, phase1_epochs // 5)
    lr_phase1: float = 0.1
    lr_phase2: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = 0.1
    tau: float = 2.0
    distill_variant: str = "kl"
    lambda_ce: float = 1.0
    lambda_mem: float = 1.0
    lambda_aux: float = 1.0
    lambda_ia: float = 1.0
    buffer_capacity: int = 2000
    rank: int = 0  # 0 -> per-layer channel rule
    alpha: float = 0.0  # 0 -> alpha = rank
    k_plugins: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.distill_variant not in DISTILL_VARIANTS:
            raise ConfigError(f"unknown distillation variant {self.distill_variant!r}")
        if self.phase1_epochs < 1:
            raise ConfigError("phase1_epochs must be >= 1")
        if self.phase2_epochs < 0:
            raise ConfigError("phase2_epochs must be >= 0 (0 derives from phase 1)")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch-norm needs 2 samples)")
        if self.buffer_capacity < 0:
            raise ConfigError("buffer_capacity must be >= 0")
        if self.rank < 0 or self.alpha < 0:
            raise ConfigError("rank/alpha must be >= 0 (0 means automatic)")
        if self.k_plugins < 1:
            raise ConfigError("k_plugins must be >= 1")

    @property
    def resolved_phase2_epochs(self) -> int:
        return self.phase2_epochs if self.phase2_epochs > 0 else max(1, self.phase1_epochs // 5)

    @property
    def uses_replay(self) -> bool:
        return self.method in ("replay", "replay+distill")

    @property
    def uses_distill(self) -> bool:
        return self.method in ("distill", "replay+distill")


class DlcState:
    """Full learner: extractor, heads, gate, plugin sets, teacher snapshot."""

    def __init__(self, backbone_spec: BackboneSpec, config: TrainConfig):
        config.validate()
        self.backbone_spec = backbone_spec
        self.config = config
        self.extractor: FeatureExtractor = build_backbone(
            backbone_spec, derive_seed(config.seed, "backbone"))
        self.base_head: ClassifierHead | None = None
        self.aggregate_head: ClassifierHead | None = None
        self.gate_unit: WeightingUnit | None = None
        self.plugin_sets: list[PluginSet] = []
        self.teacher_extractor: FeatureExtractor | None = None
        self.teacher_head: ClassifierHead | None = None
        self.completed_stages = 0
        self.known_class_count = 0
        self.last_phase1_losses: list[float] = []
        self.last_phase2_losses: list[float] = []
        self._phase1_stage = 0

    @property
    def d_feat(self) -> int:
        return self.extractor.feature_dim

    def complete_stage(self, task: Task) -> None:
        self.completed_stages = task.task_id
        self.known_class_count = task.class_ids[-1] + 1


def init_state(backbone_spec: BackboneSpec, config: TrainConfig) -> DlcState:
    return DlcState(backbone_spec, config)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton is dropped (batch-norm)."""
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches = batches[:-1]
    return batches


def _lr_for_epoch(base_lr: float, epoch: int, total_epochs: int,
                  milestones: tuple[float, ...], decay: float) -> float:
    passed = sum(1 for m in milestones if epoch >= math.ceil(m * total_epochs))
    return base_lr * (decay ** passed)


def _training_pool(task: Task, buffer: ExemplarBuffer | None,
                   config: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Current-task data plus replay exemplars, with provenance task ids."""
    images = task.train_images
    labels = task.train_labels
    task_ids = np.full(len(labels), task.task_id, dtype=np.int64)
    if config.uses_replay and buffer is not None and len(buffer) > 0:
        buf_images, buf_labels, buf_task_ids = buffer.all_samples()
        images = np.concatenate([images, buf_images])
        labels = np.concatenate([labels, buf_labels])
        task_ids = np.concatenate([task_ids, buf_task_ids])
    return images, labels, task_ids


def phase1_train(state: DlcState, task: Task, buffer: ExemplarBuffer | None,
                 config: TrainConfig) -> DlcState:
    """Base-method stage training: extractor and base head only."""
    stage = task.task_id
    if stage != state.completed_stages + 1:
        raise ProtocolError(
            f"stage {stage} started but {state.completed_stages} stages are complete"
        )
    n_known = task.class_ids[-1] + 1
    n_old = n_known - len(task.class_ids)
    distilling = config.uses_distill and stage > 1
    if distilling and state.teacher_extractor is None:
        raise ProtocolError(f"stage {stage} distillation requires a teacher snapshot")

    if state.base_head is None:
        state.base_head = new_head(state.d_feat, n_known, "base",
                                   derive_seed(config.seed, "base_head"))
    else:
        state.base_head = grow_head(state.base_head, state.d_feat, n_known)

    images, labels, _ = _training_pool(task, buffer, config)
    if len(images) < 2:
        raise TrainingError(f"stage {stage}: need at least 2 training samples")
    labels_t = torch.from_numpy(labels)

    state.extractor.train()
    state.base_head.train()
    params = list(state.extractor.parameters()) + list(state.base_head.parameters())
    optimizer = torch.optim.SGD(params, lr=config.lr_phase1, momentum=config.momentum)

    epoch_losses = []
    for epoch in range(config.phase1_epochs):
        lr = _lr_for_epoch(config.lr_phase1, epoch, config.phase1_epochs,
                           config.lr_milestones, config.lr_decay)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = numpy_rng(derive_seed(config.seed, "batches", stage, "phase1", epoch))
        total, count = 0.0, 0
        for batch in _epoch_batches(len(images), config.batch_size, rng):
            x = images_to_tensor(images[batch])
            y = labels_t[batch]
            logits = state.base_head(state.extractor(x))
            loss = config.lambda_ce * loss_ce(logits, y)
            if distilling:
                with torch.no_grad():
                    teacher_logits = state.teacher_head(state.teacher_extractor(x))
                if config.distill_variant == "kl":
                    kd = loss_kd_kl(logits[:, :n_old], teacher_logits, config.tau)
                else:
                    kd = loss_kd_ce(logits[:, :n_old], teacher_logits)
                loss = loss + config.lambda_mem * kd
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            count += 1
        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise TrainingError(f"stage {stage} phase 1 diverged at epoch {epoch}")
        epoch_losses.append(mean_loss)

    state.last_phase1_losses = epoch_losses
    state._phase1_stage = stage
    return state


def _stage_features(state: DlcState, active_set: PluginSet | None,
                    x: torch.Tensor) -> list[torch.Tensor]:
    """Per-task adapted features; frozen sets run without autograd."""
    feats = []
    for pset in state.plugin_sets:
        with torch.no_grad():
            feats.append(attach_plugin_set(state.extractor, pset)(x))
    if active_set is not None:
        feats.append(attach_plugin_set(state.extractor, active_set)(x))
    return feats


def phase2_train(state: DlcState, task: Task, buffer: ExemplarBuffer | None,
                 config: TrainConfig) -> DlcState:
    """Plugin-set stage training against a frozen extractor."""
    stage = task.task_id
    if state._phase1_stage != stage:
        raise ProtocolError(f"phase 2 of stage {stage} called before phase 1")
    if any(p.task_id == stage for p in state.plugin_sets):
        raise ProtocolError(f"stage {stage} already has a frozen plugin set")
    n_known = task.class_ids[-1] + 1

    active_set = make_plugin_set(state.extractor, stage, config.k_plugins,
                                 derive_seed(config.seed, "plugin", stage),
                                 rank=config.rank, alpha=config.alpha)
    if state.aggregate_head is None:
        state.aggregate_head = new_head(state.d_feat, n_known, "aggregate",
                                        derive_seed(config.seed, "agg_head"))
    else:
        state.aggregate_head = grow_head(state.aggregate_head,
                                         stage * state.d_feat, n_known)
    if config.gate:
        state.gate_unit = grow_unit(state.gate_unit, stage * state.d_feat,
                                    state.d_feat, derive_seed(config.seed, "gate", stage))
    aux_head = new_head(state.d_feat, len(task.class_ids) + 1, "auxiliary",
                        derive_seed(config.seed, "aux_head", stage))

    images, labels, task_ids = _training_pool(task, buffer, config)
    labels_t = torch.from_numpy(labels)
    task_ids_t = torch.from_numpy(task_ids)

    # Freeze the extractor bitwise: no grads, no batch-norm statistic updates.
    state.extractor.eval()
    for p in state.extractor.parameters():
        p.requires_grad_(False)

    params = list(active_set.parameters()) + list(state.aggregate_head.parameters())
    params += list(aux_head.parameters())
    if config.gate:
        params += list(state.gate_unit.parameters())
    optimizer = torch.optim.SGD(params, lr=config.lr_phase2, momentum=config.momentum)

    epoch_losses = []
    for epoch in range(config.resolved_phase2_epochs):
        rng = numpy_rng(derive_seed(config.seed, "batches", stage, "phase2", epoch))
        total, count = 0.0, 0
        for batch in _epoch_batches(len(images), config.batch_size, rng):
            x = images_to_tensor(images[batch])
            y = labels_t[batch]
            feats = _stage_features(state, active_set, x)
            h = torch.cat(feats, dim=1)
            if config.gate:
                omega = state.gate_unit(h)
                gated = omega * h
            else:
                gated = h
            logits = state.aggregate_head(gated)
            loss = config.lambda_ce * loss_ce(logits, y)
            loss = loss + config.lambda_aux * loss_aux(aux_head(feats[-1]), y, task.class_ids)
            if config.gate:
                ideal = batch_ideal_weights(task_ids_t[batch], stage, state.d_feat)
                loss = loss + config.lambda_ia * loss_ia(omega, ideal)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            count += 1
        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise TrainingError(f"stage {stage} phase 2 diverged at epoch {epoch}")
        epoch_losses.append(mean_loss)

    active_set.freeze()
    state.plugin_sets.append(active_set)
    for p in state.extractor.parameters():
        p.requires_grad_(True)
    state.last_phase2_losses = epoch_losses
    return state


def snapshot_teacher(state: DlcState) -> DlcState:
    """Immutable copy of extractor + base head for next-stage distillation."""
    if state.base_head is None:
        raise ProtocolError("cannot snapshot a teacher before any training")
    state.teacher_extractor = copy.deepcopy(state.extractor)
    state.teacher_head = copy.deepcopy(state.base_head)
    state.teacher_extractor.eval()
    state.teacher_head.eval()
    for p in state.teacher_extractor.parameters():
        p.requires_grad_(False)
    for p in state.teacher_head.parameters():
        p.requires_grad_(False)
    return state


def infer(state: DlcState, x: torch.Tensor) -> torch.Tensor:
    """Gated concatenated inference over every completed task's plugin set."""
    if state.completed_stages < 1:
        raise ProtocolError("inference requires at least one completed stage")
    if not state.plugin_sets:
        raise ProtocolError("no plugin sets; this state was trained without them")
    feats = [attach_plugin_set(state.extractor, pset)(x) for pset in state.plugin_sets]
    h = torch.cat(feats, dim=1)
    if state.gate_unit is not None:
        h = state.gate_unit(h) * h
    return state.aggregate_head(h)


def predict(state: DlcState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions over all known classes, via the aggregate path when
    plugin sets exist and the base head otherwise."""
    if state.completed_stages < 1:
        raise ProtocolError("prediction requires at least one completed stage")
    state.extractor.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start : start + batch_size])
            if state.plugin_sets:
                logits = infer(state, x)
            else:
                logits = state.base_head(state.extractor(x))
            outputs.append(logits.argmax(dim=1).numpy())
    return np.concatenate(outputs).astype(np.int64)
