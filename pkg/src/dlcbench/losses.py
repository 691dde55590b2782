"""Classification and distillation losses for the incremental trainer."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the true class."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError(
            f"labels outside [0, {logits.shape[1]}): {labels.min()}..{labels.max()}"
        )
    return F.cross_entropy(logits, labels)


def loss_kd_ce(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of student softmax against teacher softmax, batch mean."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"student/teacher width mismatch: {tuple(student_logits.shape)} vs "
            f"{tuple(teacher_logits.shape)}"
        )
    teacher = F.softmax(teacher_logits, dim=1)
    log_student = F.log_softmax(student_logits, dim=1)
    return -(teacher * log_student).sum(dim=1).mean()


def loss_kd_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
               tau: float) -> torch.Tensor:
    """Temperature-softened KL(teacher || student), scaled by tau^2."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"student/teacher width mismatch: {tuple(student_logits.shape)} vs "
            f"{tuple(teacher_logits.shape)}"
        )
    log_teacher = F.log_softmax(teacher_logits / tau, dim=1)
    log_student = F.log_softmax(student_logits / tau, dim=1)
    kl = (log_teacher.exp() * (log_teacher - log_student)).sum(dim=1)
    return tau * tau * kl.mean()


def loss_aux(aux_logits: torch.Tensor, labels: torch.Tensor,
             current_task_classes) -> torch.Tensor:
    """Auxiliary discrimination loss for the current task's plugin.

    The head has one logit per current-task class plus a single "old"
    class at index 0 that every replay sample maps onto.
    """
    classes = sorted(int(c) for c in current_task_classes)
    if aux_logits.shape[1] != len(classes) + 1:
        raise DimensionError(
            f"aux head width {aux_logits.shape[1]} != |task classes| + 1 = {len(classes) + 1}"
        )
    index = {c: i + 1 for i, c in enumerate(classes)}
    mapped = torch.tensor([index.get(int(y), 0) for y in labels], dtype=torch.long)
    return F.cross_entropy(aux_logits, mapped)
