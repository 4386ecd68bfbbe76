"""Evaluation quantities for a continual run and the offline-oracle upper
bound used to normalize them.

A run after task i is scored three ways on each earlier task n:

* ``local[i, n]``  -- accuracy on task n's test data with predictions
  restricted to task n's own classes (feeds backward transfer),
* ``global_r[i, n]`` -- accuracy on task n's test data with predictions over
  the classes of tasks 1..n (feeds forgetting),
* ``prefix[i, n]`` -- accuracy on the union test data of tasks 1..n with
  predictions over those classes (feeds the normalized average).

``oracle[n]`` is the test accuracy of a fresh model trained jointly on the
labeled data of tasks 1..n, cached on disk keyed by a config hash.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from .errors import ContractError, DataError
from .model import IncrementalClassifier, weak_augment
from .seeding import derive_rng, derive_seed
from .taxonomy import Dataset

MATRIX_COLUMNS = ("i", "n", "local_acc", "global_acc", "prefix_acc", "oracle_acc",
                  "task_size", "auroc")


def task_accuracy(predicted, true) -> float:
    """Fraction of predictions equal to the true labels."""
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape or predicted.size == 0:
        raise DataError("predictions and labels must be nonempty and aligned")
    return float(np.mean(predicted == true))


@dataclass
class ResultsTable:
    """Accuracy matrices of one run; entries are defined for n <= i only."""

    local: np.ndarray
    global_r: np.ndarray
    prefix: np.ndarray
    oracle: np.ndarray
    task_sizes: np.ndarray
    auroc_per_task: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.local.shape[0]
        if self.auroc_per_task is None:
            self.auroc_per_task = np.full(n, np.nan)

    @property
    def n_tasks(self) -> int:
        return self.local.shape[0]

    @property
    def final_accuracy(self) -> float:
        """Accuracy over all classes after the last task."""
        n = self.n_tasks
        return float(self.prefix[n - 1, n - 1])

    def save_csv(self, path) -> None:
        lines = [",".join(MATRIX_COLUMNS)]
        for i in range(self.n_tasks):
            for n in range(i + 1):
                lines.append(",".join([
                    str(i + 1),
                    str(n + 1),
                    repr(float(self.local[i, n])),
                    repr(float(self.global_r[i, n])),
                    repr(float(self.prefix[i, n])),
                    repr(float(self.oracle[n])),
                    str(int(self.task_sizes[n])),
                    repr(float(self.auroc_per_task[i])),
                ]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_csv(cls, path) -> "ResultsTable":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        header = tuple(lines[0].split(","))
        if header != MATRIX_COLUMNS:
            raise DataError(f"unexpected accuracy-matrix header {header}")
        rows = [line.split(",") for line in lines[1:]]
        n_tasks = max(int(r[0]) for r in rows)
        local = np.full((n_tasks, n_tasks), np.nan)
        global_r = np.full((n_tasks, n_tasks), np.nan)
        prefix = np.full((n_tasks, n_tasks), np.nan)
        oracle = np.full(n_tasks, np.nan)
        sizes = np.zeros(n_tasks, dtype=np.int64)
        auroc = np.full(n_tasks, np.nan)
        for r in rows:
            i, n = int(r[0]) - 1, int(r[1]) - 1
            local[i, n] = float(r[2])
            global_r[i, n] = float(r[3])
            prefix[i, n] = float(r[4])
            oracle[n] = float(r[5])
            sizes[n] = int(r[6])
            auroc[i] = float(r[7])
        return cls(local=local, global_r=global_r, prefix=prefix, oracle=oracle,
                   task_sizes=sizes, auroc_per_task=auroc)


def omega(table: ResultsTable, upto: int | None = None) -> float:
    """Average over tasks of oracle-normalized prefix accuracies.

    After each task i, the accuracies over prefixes 1..n (n <= i) are divided
    by the offline oracle's accuracy on the same prefix and combined with
    weights proportional to task sizes (the weights sum to 1 per i); the
    result is the mean of these per-task sums. A learner matching the oracle
    everywhere scores exactly 1.
    """
    n_tasks = table.n_tasks if upto is None else int(upto)
    if not 1 <= n_tasks <= table.n_tasks:
        raise ContractError(f"upto {upto} out of range")
    sizes = table.task_sizes.astype(np.float64)
    cum = np.cumsum(sizes)
    total = 0.0
    for i in range(n_tasks):
        for n in range(i + 1):
            if not np.isfinite(table.oracle[n]) or table.oracle[n] <= 0:
                raise ContractError(f"missing or nonpositive oracle accuracy for prefix {n + 1}")
            total += (sizes[n] / cum[i]) * (table.prefix[i, n] / table.oracle[n])
    return total / n_tasks


def omega_curve(table: ResultsTable) -> np.ndarray:
    """Running value of :func:`omega` truncated after each task."""
    return np.array([omega(table, upto=t) for t in range(1, table.n_tasks + 1)])


def bwt(table: ResultsTable) -> float:
    """Mean change of each task's own-range accuracy between the task's end
    and the end of the run; negative values mean forgetting."""
    n = table.n_tasks
    if n < 2:
        raise ContractError("backward transfer needs at least two tasks")
    diffs = [table.local[n - 1, t] - table.local[t, t] for t in range(n - 1)]
    return float(np.mean(diffs))


def fgt(table: ResultsTable) -> float:
    """Task-size-weighted mean drop of prefix-range accuracies over time;
    positive values mean forgetting on the growing class set."""
    n = table.n_tasks
    if n < 2:
        raise ContractError("forgetting needs at least two tasks")
    sizes = table.task_sizes.astype(np.float64)
    cum = np.cumsum(sizes)
    total = 0.0
    for i in range(1, n):
        for t in range(i):
            total += (sizes[t] / cum[i]) * (table.global_r[t, t] - table.global_r[i, t])
    return float(total / (n - 1))


def train_offline_model(dataset: Dataset, class_ids, config, seed: int) -> IncrementalClassifier:
    """Train a fresh single-head model jointly on the given classes.

    Uses the continual learner's backbone, optimizer, schedule and weak
    augmentation so the normalization is comparable.
    """
    from .trainer import lr_schedule  # late import; trainer imports this module

    class_ids = tuple(sorted(int(c) for c in class_ids))
    model = IncrementalClassifier(dataset.dim, config.hidden, seed=derive_seed(seed, "oracle-init"))
    model.expand_head(class_ids, seed=derive_seed(seed, "oracle-head"))
    pool = dataset.train_indices_for(class_ids)
    if len(pool) == 0:
        raise DataError(f"no train data for classes {class_ids}")
    positions = model.positions_of(dataset.y_train[pool])
    rng_batch = derive_rng(seed, "oracle-batches")
    rng_aug = derive_rng(seed, "oracle-augment")
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(pool) / config.batch_size)
    x_pool = dataset.x_train[pool]
    targets = torch.as_tensor(positions, dtype=torch.long)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            idx = rng_batch.integers(0, len(pool), size=config.batch_size)
            xb = weak_augment(x_pool[idx], rng_aug, config.sigma_weak)
            logits = model.logits(xb)
            loss = torch.nn.functional.cross_entropy(logits, targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return model


def _oracle_cache_key(dataset: Dataset, class_ids, config, seed: int) -> str:
    payload = {
        "dataset": dataset.fingerprint,
        "classes": list(class_ids),
        "seed": seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "decay_epochs": list(config.decay_epochs),
        "decay_factor": config.decay_factor,
        "momentum": config.momentum,
        "weight_decay": config.weight_decay,
        "batch_size": config.batch_size,
        "hidden": list(config.hidden),
        "sigma_weak": config.sigma_weak,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def offline_oracle(dataset: Dataset, class_ids, config, seed: int, cache_dir=None) -> float:
    """Joint-training upper-bound accuracy for one class prefix.

    Trains on all labeled data of the given classes with no continual
    constraint and reports test accuracy over them. Results are cached per
    (classes, config, seed) with per-entry file locking so parallel runs can
    share a cache directory.
    """
    class_ids = tuple(sorted(int(c) for c in class_ids))
    cache_file = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        key = _oracle_cache_key(dataset, class_ids, config, seed)
        cache_file = cache_dir / f"{key}.json"
        with FileLock(str(cache_file) + ".lock"):
            if cache_file.exists():
                return float(json.loads(cache_file.read_text())["accuracy"])

    model = train_offline_model(dataset, class_ids, config, seed)
    test_idx = dataset.test_indices_for(class_ids)
    if len(test_idx) == 0:
        raise DataError(f"no test data for classes {class_ids}")
    predicted = model.classify(dataset.x_test[test_idx], np.array(class_ids))
    accuracy = task_accuracy(predicted, dataset.y_test[test_idx])

    if cache_file is not None:
        with FileLock(str(cache_file) + ".lock"):
            cache_file.write_text(json.dumps({"accuracy": accuracy}, sort_keys=True))
    return accuracy
