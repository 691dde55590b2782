"""Fixed-capacity replay store with greedy mean-matching (herding) selection.

Per class, exemplars are kept in greedy order: each prefix's feature mean
is the best running approximation of the class mean. Shrinking the quota
therefore just truncates the stored order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .streams import Task


def herding_select(class_features: np.ndarray, quota: int) -> list[int]:
    """Greedy herding order over one class's feature rows.

    At every step the index minimizing the squared distance between the
    selected prefix's mean and the class mean is taken; ties break toward
    the lower index. Returns min(quota, n) indices.
    """
    features = np.asarray(class_features, dtype=np.float64)
    n = len(features)
    take = min(int(quota), n)
    if take <= 0:
        return []
    if not np.isfinite(features).all():
        raise ValueError("herding requires finite features")
    target = features.mean(axis=0)
    chosen: list[int] = []
    chosen_sum = np.zeros(features.shape[1], dtype=np.float64)
    remaining = np.ones(n, dtype=bool)
    for step in range(1, take + 1):
        candidates = np.nonzero(remaining)[0]
        means = (chosen_sum[None, :] + features[candidates]) / step
        dists = ((means - target[None, :]) ** 2).sum(axis=1)
        pick = candidates[int(np.argmin(dists))]
        chosen.append(int(pick))
        chosen_sum += features[pick]
        remaining[pick] = False
    return chosen


@dataclass
class ClassStore:
    class_id: int
    task_id: int
    images: np.ndarray  # greedy order
    labels: np.ndarray
    dataset_indices: np.ndarray  # positions in the source train split

    def truncate(self, quota: int) -> None:
        self.images = self.images[:quota]
        self.labels = self.labels[:quota]
        self.dataset_indices = self.dataset_indices[:quota]


@dataclass
class ExemplarBuffer:
    capacity: int
    classes: dict[int, ClassStore] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(store.labels) for store in self.classes.values())

    def quota(self, known_classes: int) -> int:
        return self.capacity // known_classes if known_classes else 0

    def all_samples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(images, labels, task_ids) concatenated in class-id order."""
        stores = [self.classes[c] for c in sorted(self.classes)]
        if not stores:
            raise ValueError("buffer is empty")
        images = np.concatenate([s.images for s in stores])
        labels = np.concatenate([s.labels for s in stores])
        task_ids = np.concatenate([
            np.full(len(s.labels), s.task_id, dtype=np.int64) for s in stores
        ])
        return images, labels, task_ids

    def manifest_rows(self) -> list[tuple[int, int, int]]:
        rows = []
        for c in sorted(self.classes):
            store = self.classes[c]
            for label, idx in zip(store.labels, store.dataset_indices):
                rows.append((store.task_id, int(label), int(idx)))
        return rows


def extract_features(extractor, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Plain (un-adapted) eval-mode features for herding, as float64 rows."""
    was_training = extractor.training
    extractor.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images_to_tensor(images[start : start + batch_size])
            chunks.append(extractor(batch).double().numpy())
    if was_training:
        extractor.train()
    return np.concatenate(chunks)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, C) -> float32 (N, C, H, W) in [0, 1]."""
    tensor = torch.from_numpy(np.ascontiguousarray(images))
    return tensor.permute(0, 3, 1, 2).float() / 255.0


def update_buffer(buffer: ExemplarBuffer, task: Task, extractor,
                  batch_size: int = 256) -> ExemplarBuffer:
    """Add the finished task's classes by herding, then re-balance quotas.

    Existing classes keep the leading prefix of their stored greedy order;
    total occupancy never exceeds capacity.
    """
    known = len(buffer.classes) + len(task.class_ids)
    quota = buffer.quota(known)
    for store in buffer.classes.values():
        store.truncate(quota)
    for class_id in task.class_ids:
        mask = task.train_labels == class_id
        images = task.train_images[mask]
        indices = task.train_indices[mask]
        features = extract_features(extractor, images, batch_size)
        order = herding_select(features, quota)
        buffer.classes[class_id] = ClassStore(
            class_id=class_id,
            task_id=task.task_id,
            images=images[order],
            labels=np.full(len(order), class_id, dtype=np.int64),
            dataset_indices=indices[order],
        )
    return buffer
