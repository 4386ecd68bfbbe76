"""Task sequences and batch sampling for the labeled and unlabeled streams.

Supports two task constructions (random class partition, one parent class per
task) and four unlabeled-stream distributions (uniform over all classes, the
current task's super-class, every other super-class, or a fixed random class
sample redrawn once per task).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DataError
from .taxonomy import Dataset, Taxonomy

TASK_MODES = ("random_class", "parent_class")
UNLABELED_MODES = ("uniform", "positive_superclass", "negative_superclass", "random_sample")


@dataclass(frozen=True)
class TaskSequence:
    """Ordered, pairwise-disjoint class-id sets, one per task."""

    tasks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = [c for task in self.tasks for c in task]
        if len(flat) != len(set(flat)):
            raise ConfigurationError("tasks must be pairwise disjoint")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def classes_through(self, n_tasks: int) -> tuple[int, ...]:
        """Classes of tasks 0..n_tasks-1 in task order."""
        return tuple(c for task in self.tasks[:n_tasks] for c in task)


@dataclass(frozen=True)
class ScenarioConfig:
    """Stream scenario: how tasks are formed and what feeds the unlabeled pool.

    ``mu`` is the unlabeled-to-labeled batch-size ratio; each step draws
    ``batch_size`` labeled and ``round(mu * batch_size)`` unlabeled examples.
    """

    task_mode: str = "random_class"
    unlabeled_mode: str = "uniform"
    n_tasks: int = 5
    batch_size: int = 64
    mu: float = 2.0
    random_sample_count: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.task_mode not in TASK_MODES:
            raise ConfigurationError(f"unknown task_mode {self.task_mode!r}")
        if self.unlabeled_mode not in UNLABELED_MODES:
            raise ConfigurationError(f"unknown unlabeled_mode {self.unlabeled_mode!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.mu < 0:
            raise ConfigurationError("mu must be >= 0")
        if self.unlabeled_mode == "random_sample" and self.random_sample_count < 1:
            raise ConfigurationError("random_sample_count must be >= 1")
        if self.unlabeled_mode in ("positive_superclass", "negative_superclass") and (
            self.task_mode != "parent_class"
        ):
            raise ConfigurationError(
                f"unlabeled_mode {self.unlabeled_mode!r} requires task_mode "
                "'parent_class': a random class partition has no single parent"
            )

    @property
    def unlabeled_batch_size(self) -> int:
        return int(round(self.mu * self.batch_size))


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class UnlabeledBatch:
    """Unlabeled inputs plus their true labels kept for audits only.

    Training code must consume ``features`` exclusively; ``hidden_labels``
    exists so invariant tests and detector audits can check where a batch came
    from. Batches are meant to be discarded after the step that drew them.
    """

    features: np.ndarray
    hidden_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.hidden_labels)


def make_tasks(taxonomy: Taxonomy, task_mode: str, n_tasks: int, seed: int) -> TaskSequence:
    """Partition the taxonomy's classes into a task sequence.

    ``random_class`` shuffles all class ids by seed and splits them into
    ``n_tasks`` equal sets (``n_tasks`` must divide the class count).
    ``parent_class`` makes each task exactly one parent class, parent order
    shuffled by seed (``n_tasks`` must equal the parent count).
    """
    rng = np.random.default_rng(seed)
    if task_mode == "random_class":
        m = taxonomy.n_classes
        if n_tasks < 1 or m % n_tasks != 0:
            raise ConfigurationError(
                f"random_class needs n_tasks dividing the class count ({m}), got {n_tasks}"
            )
        ids = rng.permutation(np.array(taxonomy.all_class_ids))
        size = m // n_tasks
        tasks = tuple(
            tuple(sorted(int(c) for c in ids[i * size:(i + 1) * size])) for i in range(n_tasks)
        )
    elif task_mode == "parent_class":
        if n_tasks != taxonomy.n_parents:
            raise ConfigurationError(
                f"parent_class needs n_tasks == parent count ({taxonomy.n_parents}), got {n_tasks}"
            )
        order = rng.permutation(taxonomy.n_parents)
        tasks = tuple(
            tuple(sorted(taxonomy.parents[int(p)].class_ids)) for p in order
        )
    else:
        raise ConfigurationError(f"unknown task_mode {task_mode!r}")
    return TaskSequence(tasks=tasks)


def unlabeled_class_pool(
    taxonomy: Taxonomy,
    sequence: TaskSequence,
    task_index: int,
    mode: str,
    config: ScenarioConfig,
) -> tuple[int, ...]:
    """Class ids eligible to appear in the unlabeled stream of one task.

    ``task_index`` is 0-based. ``random_sample`` pools are redrawn once per
    task from the scenario seed, so every batch of a task shares the pool.
    """
    if not 0 <= task_index < sequence.n_tasks:
        raise ConfigurationError(f"task_index {task_index} out of range")
    if mode == "uniform":
        return taxonomy.all_class_ids
    if mode in ("positive_superclass", "negative_superclass"):
        if config.task_mode != "parent_class":
            raise ConfigurationError(
                f"unlabeled_mode {mode!r} requires parent_class tasks"
            )
        super_index = taxonomy.superclass_index_of_task(sequence.tasks[task_index])
        inside = taxonomy.classes_of_superclass(super_index)
        if mode == "positive_superclass":
            return inside
        return tuple(sorted(set(taxonomy.all_class_ids) - set(inside)))
    if mode == "random_sample":
        if config.random_sample_count > taxonomy.n_classes:
            raise ConfigurationError(
                f"random_sample_count {config.random_sample_count} exceeds "
                f"class count {taxonomy.n_classes}"
            )
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, task_index]))
        picked = rng.choice(
            np.array(taxonomy.all_class_ids), size=config.random_sample_count, replace=False
        )
        return tuple(sorted(int(c) for c in picked))
    raise ConfigurationError(f"unknown unlabeled_mode {mode!r}")


def sample_labeled_batch(
    dataset: Dataset, task_classes, batch_size: int, rng: np.random.Generator
) -> LabeledBatch:
    """Draw ``batch_size`` train examples uniformly from the task's classes.

    Draws are uniform with replacement, so pools smaller than the batch never
    fail (relevant for tiny desk-scale datasets).
    """
    pool = dataset.train_indices_for(task_classes)
    if len(pool) == 0:
        raise DataError(f"no train examples for classes {tuple(task_classes)}")
    idx = pool[rng.integers(0, len(pool), size=batch_size)]
    return LabeledBatch(features=dataset.x_train[idx], labels=dataset.y_train[idx])


def sample_unlabeled_batch(
    dataset: Dataset, pool_classes, size: int, rng: np.random.Generator
) -> UnlabeledBatch:
    """Draw ``size`` train examples uniformly from the pool's classes.

    The batch carries its true labels only for audits; see
    :class:`UnlabeledBatch`.
    """
    pool = dataset.train_indices_for(pool_classes)
    if len(pool) == 0:
        raise DataError(f"no train examples for unlabeled pool {tuple(pool_classes)}")
    idx = pool[rng.integers(0, len(pool), size=size)]
    return UnlabeledBatch(features=dataset.x_train[idx], hidden_labels=dataset.y_train[idx])
