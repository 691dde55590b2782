"""Task streams: class-disjoint splits under the base-m / inc-n rule.

Class ids are permuted by the order seed and remapped to a contiguous
0..C-1 range in permutation order, so task t covers a contiguous label
block and heads can grow by appending columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .errors import ConfigError
from .seeding import numpy_rng


@dataclass
class Task:
    task_id: int  # 1-based stage index
    class_ids: tuple[int, ...]  # remapped, contiguous
    train_images: np.ndarray
    train_labels: np.ndarray
    train_indices: np.ndarray  # positions in the source train split
    test_images: np.ndarray
    test_labels: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    base_m: int
    inc_n: int
    class_count: int
    class_order: np.ndarray  # original class id at each remapped position

    def __len__(self) -> int:
        return len(self.tasks)

    def known_classes(self, stage: int) -> int:
        """Number of classes seen after completing 1-based stage ``stage``."""
        return self.base_m + (stage - 1) * self.inc_n

    def test_up_to(self, stage: int) -> tuple[np.ndarray, np.ndarray]:
        """Test split over every class known after ``stage``."""
        images = np.concatenate([t.test_images for t in self.tasks[:stage]])
        labels = np.concatenate([t.test_labels for t in self.tasks[:stage]])
        return images, labels


def task_count(class_count: int, base_m: int, inc_n: int) -> int:
    if base_m < 1 or inc_n < 1:
        raise ConfigError(f"base_m and inc_n must be >= 1, got {base_m}, {inc_n}")
    if base_m > class_count:
        raise ConfigError(f"base_m {base_m} exceeds class count {class_count}")
    remainder = class_count - base_m
    if remainder % inc_n != 0:
        raise ConfigError(
            f"class_count - base_m = {remainder} is not divisible by inc_n = {inc_n}"
        )
    return 1 + remainder // inc_n


def split_stream(dataset: Dataset, base_m: int, inc_n: int, order_seed: int) -> TaskStream:
    stages = task_count(dataset.class_count, base_m, inc_n)
    order = numpy_rng(order_seed).permutation(dataset.class_count)
    remap = np.empty(dataset.class_count, dtype=np.int64)
    remap[order] = np.arange(dataset.class_count)

    train_labels = remap[dataset.train_labels]
    test_labels = remap[dataset.test_labels]

    tasks = []
    start = 0
    for stage in range(1, stages + 1):
        width = base_m if stage == 1 else inc_n
        class_ids = tuple(range(start, start + width))
        train_mask = (train_labels >= start) & (train_labels < start + width)
        test_mask = (test_labels >= start) & (test_labels < start + width)
        train_indices = np.nonzero(train_mask)[0]
        tasks.append(Task(
            task_id=stage,
            class_ids=class_ids,
            train_images=dataset.train_images[train_indices],
            train_labels=train_labels[train_indices],
            train_indices=train_indices,
            test_images=dataset.test_images[test_mask],
            test_labels=test_labels[test_mask],
        ))
        start += width
    return TaskStream(tasks=tasks, base_m=base_m, inc_n=inc_n,
                      class_count=dataset.class_count, class_order=order)
