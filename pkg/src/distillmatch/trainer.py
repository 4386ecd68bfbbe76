"""Per-task training loop: schedules, coreset rehearsal, snapshotting,
detector-gated pseudo-labeling, optional final-layer fine-tuning, and the full
task-sequence run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import losses, metrics, ood, stream
from .errors import ConfigurationError, ContractError
from .model import IncrementalClassifier, Snapshot, strong_augment, weak_augment
from .seeding import derive_rng, derive_seed
from .taxonomy import Dataset, Taxonomy

METHODS = ("distillmatch", "base")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization constants. Desk-scale defaults are the reference schedule
    scaled down tenfold; ``paper_scale()`` restores the full-length one."""

    epochs: int = 20
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (12, 16, 18)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    mu: float = 2.0
    lambda_ucl: float = 1.0
    lambda_dst: float = 1.0
    temperature: float = 2.0
    tau_fm: float = 0.9
    tpr: float | None = None
    epsilon_ood: float = 0.002
    coreset_budget: int = 0
    finetune: bool | None = None
    finetune_epochs: int = 2
    finetune_decay_epochs: tuple[int, ...] = (1,)
    hidden: tuple[int, ...] = (64, 64)
    sigma_weak: float = 0.05
    sigma_strong: float = 0.25
    drop_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigurationError("epochs, lr and decay_factor must be positive")
        if self.temperature <= 0 or not 0 < self.tau_fm:
            raise ConfigurationError("temperature and tau_fm must be positive")
        if self.tpr is not None and not 0 < self.tpr <= 1:
            raise ConfigurationError("tpr must lie in (0, 1]")
        if self.batch_size < 1 or self.mu < 0:
            raise ConfigurationError("batch_size must be >= 1 and mu >= 0")
        if self.coreset_budget < 0 or self.lambda_ucl < 0 or self.lambda_dst < 0:
            raise ConfigurationError("coreset budget and loss weights must be >= 0")
        for decays, limit, label in (
            (self.decay_epochs, self.epochs, "decay_epochs"),
            (self.finetune_decay_epochs, self.finetune_epochs, "finetune_decay_epochs"),
        ):
            if list(decays) != sorted(set(decays)) or any(d < 1 for d in decays):
                raise ConfigurationError(f"{label} must be strictly increasing and >= 1")
            if any(d >= limit for d in decays):
                raise ConfigurationError(f"{label} must be < the phase's epoch count")

    @property
    def resolved_tpr(self) -> float:
        """Target true-positive ratio; defaults depend on coreset presence."""
        if self.tpr is not None:
            return self.tpr
        return 0.05 if self.coreset_budget > 0 else 0.5

    @property
    def finetune_active(self) -> bool:
        if self.finetune is not None:
            return self.finetune
        return self.coreset_budget > 0

    @property
    def unlabeled_batch_size(self) -> int:
        return int(round(self.mu * self.batch_size))

    def paper_scale(self) -> "TrainConfig":
        return replace(
            self,
            epochs=200,
            decay_epochs=(120, 160, 180),
            finetune_epochs=20,
            finetune_decay_epochs=(10, 15),
        )


def lr_schedule(epoch: int, config: TrainConfig, finetune: bool = False) -> float:
    """Step-decayed learning rate.

    In the main phase the base rate decays by ``decay_factor`` after each
    configured epoch. The fine-tune phase restarts at 10% of the base rate
    with its own decay points, ``epoch`` counting from the phase start.
    """
    if finetune:
        if not 0 <= epoch < config.finetune_epochs:
            raise ValueError(f"fine-tune epoch {epoch} out of range")
        passed = sum(1 for d in config.finetune_decay_epochs if epoch >= d)
        return 0.1 * config.lr * config.decay_factor**passed
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} out of range")
    passed = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.lr * config.decay_factor**passed


@dataclass(frozen=True)
class AblationFlags:
    """Single-removal toggles; each zeroes exactly its objective component."""

    no_pl: bool = False
    no_w: bool = False
    no_ul: bool = False
    no_dst: bool = False

    def active(self) -> tuple[str, ...]:
        return tuple(name for name in ("no_pl", "no_w", "no_ul", "no_dst")
                     if getattr(self, name))


class Coreset:
    """Budgeted store of labeled past-task examples, balanced per class."""

    def __init__(self, budget: int):
        if budget < 0:
            raise ConfigurationError("coreset budget must be >= 0")
        self.budget = int(budget)
        self._store: dict[int, np.ndarray] = {}

    @property
    def size(self) -> int:
        return sum(len(v) for v in self._store.values())

    @property
    def is_empty(self) -> bool:
        return self.size == 0

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self._store))

    def per_class_counts(self) -> dict[int, int]:
        return {c: len(self._store[c]) for c in sorted(self._store)}

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            d = 0
            return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
        xs, ys = [], []
        for c in sorted(self._store):
            xs.append(self._store[c])
            ys.append(np.full(len(self._store[c]), c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)


def update_coreset(
    coreset: Coreset,
    task_data: dict[int, np.ndarray],
    budget: int,
    rng: np.random.Generator,
) -> Coreset:
    """Rebalance the store over all classes seen so far.

    Every class ends with ``budget // K`` or ``budget // K + 1`` examples
    (extras assigned by seeded shuffle); new classes sample uniformly from the
    task's data, shrinking classes evict uniformly at random. Budget 0 keeps
    the store empty.
    """
    updated = Coreset(budget)
    if budget == 0:
        return updated
    sources: dict[int, np.ndarray] = {c: coreset._store[c] for c in coreset._store}
    for c, feats in task_data.items():
        sources[int(c)] = np.asarray(feats)
    classes = sorted(sources)
    k = len(classes)
    base, extra = divmod(budget, k)
    quotas = {c: base for c in classes}
    for pos in rng.permutation(k)[:extra]:
        quotas[classes[int(pos)]] += 1
    for c in classes:
        feats = sources[c]
        take = min(quotas[c], len(feats))
        if take == 0:
            continue
        keep = np.sort(rng.choice(len(feats), size=take, replace=False))
        updated._store[c] = feats[keep].copy()
    return updated


@dataclass
class StepRecord:
    step: int
    l_s: float
    l_pl: float
    l_ul: float
    l_dst: float
    l_total: float
    b_pl: int


@dataclass
class RunState:
    """Mutable state threaded through the task loop of one run."""

    model: IncrementalClassifier
    coreset: Coreset
    snapshot: Snapshot | None = None
    snapshot_hash: str | None = None
    detector: ood.OodDetector | None = None
    task_index: int = 0
    step_count: int = 0
    step_rows: list = field(default_factory=list)
    local_rows: list = field(default_factory=list)
    global_rows: list = field(default_factory=list)
    prefix_rows: list = field(default_factory=list)
    aurocs: list = field(default_factory=list)


@dataclass
class TaskStreams:
    """Everything one task's training needs: data, pools and seeded rngs."""

    dataset: Dataset
    taxonomy: Taxonomy
    sequence: stream.TaskSequence
    task_index: int
    task_classes: tuple[int, ...]
    pool_classes: tuple[int, ...] | None
    labeled_rng: np.random.Generator
    unlabeled_rng: np.random.Generator
    augment_rng: np.random.Generator
    coreset_rng: np.random.Generator
    head_seed: int
    detector_seed: int


def build_task_streams(
    dataset: Dataset,
    taxonomy: Taxonomy,
    sequence: stream.TaskSequence,
    task_index: int,
    scenario: stream.ScenarioConfig,
    config: TrainConfig,
    method: str,
) -> TaskStreams:
    pool = None
    if method == "distillmatch" and scenario.unlabeled_batch_size > 0:
        pool = stream.unlabeled_class_pool(
            taxonomy, sequence, task_index, scenario.unlabeled_mode, scenario
        )
    return TaskStreams(
        dataset=dataset,
        taxonomy=taxonomy,
        sequence=sequence,
        task_index=task_index,
        task_classes=sequence.tasks[task_index],
        pool_classes=pool,
        labeled_rng=derive_rng(scenario.seed, "labeled", task_index),
        unlabeled_rng=derive_rng(scenario.seed, "unlabeled", task_index),
        augment_rng=derive_rng(config.seed, "augment", task_index),
        coreset_rng=derive_rng(config.seed, "coreset", task_index),
        head_seed=derive_seed(config.seed, "head", task_index),
        detector_seed=derive_seed(config.seed, "detector", task_index),
    )


def _labeled_pool(streams: TaskStreams, coreset: Coreset) -> tuple[np.ndarray, np.ndarray]:
    idx = streams.dataset.train_indices_for(streams.task_classes)
    x = streams.dataset.x_train[idx]
    y = streams.dataset.y_train[idx]
    if not coreset.is_empty:
        cx, cy = coreset.arrays()
        x = np.concatenate([x, cx])
        y = np.concatenate([y, cy])
    return x, y


def _train_step(
    state: RunState,
    streams: TaskStreams,
    config: TrainConfig,
    method: str,
    ablation: AblationFlags,
    optimizer: torch.optim.Optimizer,
    x_pool: np.ndarray,
    y_pool_positions: np.ndarray,
) -> StepRecord:
    rng = streams.labeled_rng
    aug = streams.augment_rng
    b = config.batch_size
    idx = rng.integers(0, len(x_pool), size=b)
    x_weak = torch.as_tensor(weak_augment(x_pool[idx], aug, config.sigma_weak))
    label_pos = y_pool_positions[idx]

    n_seen = state.model.n_outputs
    use_unlabeled = method == "distillmatch" and streams.pool_classes is not None
    gate_on = use_unlabeled and state.snapshot is not None and not ablation.no_pl

    u_weak = u_strong = None
    accept = pseudo_pos = None
    if use_unlabeled:
        batch = stream.sample_unlabeled_batch(
            streams.dataset, streams.pool_classes, config.unlabeled_batch_size,
            streams.unlabeled_rng,
        )
        u_raw = batch.features
        u_weak = torch.as_tensor(weak_augment(u_raw, aug, config.sigma_weak))
        u_strong = torch.as_tensor(
            strong_augment(u_raw, aug, config.sigma_strong, config.drop_fraction)
        )
        if gate_on:
            if state.detector is None:
                raise ContractError(
                    "pseudo-label gating needs the previous task's detector"
                )
            accept = state.detector.accept(u_raw)
            with torch.no_grad():
                pseudo_pos = state.snapshot.predict(u_weak).argmax(dim=-1).numpy()

    if ablation.no_w:
        weights = np.ones(n_seen)
    else:
        accepted = pseudo_pos[accept] if gate_on else np.zeros(0, dtype=np.int64)
        weights = losses.class_balance_weights(label_pos, accepted, n_seen)

    l_s = losses.supervised_loss(state.model, x_weak, label_pos, weights)
    if gate_on:
        l_pl, b_pl = losses.hard_distillation_loss(state.model, state.snapshot,
                                                   u_weak, accept, weights, pseudo_pos)
    else:
        l_pl, b_pl = 0.0, 0
    if use_unlabeled and not ablation.no_ul:
        l_ul = losses.consistency_loss(state.model, u_weak, u_strong, config.tau_fm)
        lam_ul = config.lambda_ucl
    else:
        l_ul, lam_ul = 0.0, 0.0
    if state.snapshot is not None and not ablation.no_dst and config.lambda_dst > 0:
        dst_inputs = x_weak if u_weak is None else torch.cat([x_weak, u_weak])
        l_dst = losses.local_distillation_loss(
            state.model, state.snapshot, dst_inputs, config.temperature
        )
        lam_dst = config.lambda_dst
    else:
        l_dst, lam_dst = 0.0, 0.0

    breakdown = losses.total_loss(l_s, l_pl, l_ul, l_dst, b, b_pl, lam_ul, lam_dst)
    optimizer.zero_grad()
    breakdown.l_total.backward()
    optimizer.step()

    state.step_count += 1
    row = StepRecord(step=state.step_count, **breakdown.floats())
    state.step_rows.append(row)
    return row


def _finetune_phase(state: RunState, streams: TaskStreams, config: TrainConfig) -> None:
    """Final-layer-only training on the coreset with class balancing."""
    cx, cy = state.coreset.arrays()
    positions = state.model.positions_of(cy)
    optimizer = torch.optim.SGD(
        [state.model.head_weight, state.model.head_bias],
        lr=lr_schedule(0, config, finetune=True),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(cx) / config.batch_size)
    n_seen = state.model.n_outputs
    for epoch in range(config.finetune_epochs):
        lr = lr_schedule(epoch, config, finetune=True)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            idx = streams.labeled_rng.integers(0, len(cx), size=config.batch_size)
            xb = torch.as_tensor(weak_augment(cx[idx], streams.augment_rng, config.sigma_weak))
            label_pos = positions[idx]
            weights = losses.class_balance_weights(label_pos, [], n_seen)
            l_s = losses.supervised_loss(state.model, xb, label_pos, weights)
            breakdown = losses.total_loss(l_s, 0.0, 0.0, 0.0, config.batch_size, 0, 0.0, 0.0)
            optimizer.zero_grad()
            breakdown.l_total.backward()
            optimizer.step()
            state.step_count += 1
            state.step_rows.append(StepRecord(step=state.step_count, **breakdown.floats()))


def _evaluate_after_task(state: RunState, streams: TaskStreams) -> None:
    dataset = streams.dataset
    sequence = streams.sequence
    i = streams.task_index
    local_row, global_row, prefix_row = [], [], []
    for n in range(i + 1):
        task_n = sequence.tasks[n]
        test_n = dataset.test_indices_for(task_n)
        seen = sequence.classes_through(n + 1)
        local_row.append(metrics.task_accuracy(
            state.model.classify(dataset.x_test[test_n], np.array(task_n)),
            dataset.y_test[test_n],
        ))
        global_row.append(metrics.task_accuracy(
            state.model.classify(dataset.x_test[test_n], np.array(seen)),
            dataset.y_test[test_n],
        ))
        test_prefix = dataset.test_indices_for(seen)
        prefix_row.append(metrics.task_accuracy(
            state.model.classify(dataset.x_test[test_prefix], np.array(seen)),
            dataset.y_test[test_prefix],
        ))
    state.local_rows.append(local_row)
    state.global_rows.append(global_row)
    state.prefix_rows.append(prefix_row)

    auroc_value = np.nan
    if state.detector is not None:
        seen = sequence.classes_through(i + 1)
        unseen = tuple(sorted(set(range(dataset.n_classes)) - set(seen)))
        if unseen:
            id_scores = state.detector.score(dataset.x_test[dataset.test_indices_for(seen)])
            ood_scores = state.detector.score(dataset.x_test[dataset.test_indices_for(unseen)])
            auroc_value = ood.auroc(id_scores, ood_scores)
    state.aurocs.append(auroc_value)


def train_task(
    state: RunState,
    streams: TaskStreams,
    config: TrainConfig,
    method: str = "distillmatch",
    ablation: AblationFlags = AblationFlags(),
) -> RunState:
    """Run one task end to end and update the run state.

    Expands the head, trains the configured epochs (stopping at the last decay
    point when a fine-tune phase will follow), optionally fine-tunes the final
    layer on the coreset, then snapshots the model, retrains and calibrates
    the detector, updates the coreset, and records the evaluation rows.
    """
    n = streams.task_index
    if n != state.task_index:
        raise ContractError(f"state expects task {state.task_index}, got {n}")
    if n >= 1:
        if state.snapshot is None or state.snapshot.param_hash() != state.snapshot_hash:
            raise ContractError("snapshot missing or stale; it must be the end-of-previous-task model")
        needs_gate = (method == "distillmatch" and streams.pool_classes is not None
                      and not ablation.no_pl)
        if needs_gate and state.detector is None:
            raise ContractError("pseudo-label gating enabled but no detector is trained")

    state.model.expand_head(streams.task_classes, seed=streams.head_seed)
    optimizer = torch.optim.SGD(
        state.model.parameters(), lr=config.lr,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )

    x_pool, y_pool = _labeled_pool(streams, state.coreset)
    y_positions = state.model.positions_of(y_pool)
    steps_per_epoch = math.ceil(len(x_pool) / config.batch_size)

    finetune_now = (
        method == "distillmatch" and config.finetune_active and not state.coreset.is_empty
    )
    main_epochs = config.epochs
    if finetune_now and config.decay_epochs:
        main_epochs = config.decay_epochs[-1]

    for epoch in range(main_epochs):
        lr = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            _train_step(state, streams, config, method, ablation, optimizer,
                        x_pool, y_positions)

    if finetune_now:
        _finetune_phase(state, streams, config)

    state.snapshot = state.model.snapshot()
    state.snapshot_hash = state.model.param_hash()

    if method == "distillmatch" and not ablation.no_pl:
        seen = streams.sequence.classes_through(n + 1)
        idx = streams.dataset.train_indices_for(seen)
        positions = state.model.positions_of(streams.dataset.y_train[idx])
        detector, (hold_x, _) = ood.train_detector(
            streams.dataset.x_train[idx], positions, len(seen), config,
            seed=streams.detector_seed,
        )
        detector.tau = ood.calibrate_threshold(detector, hold_x, config.resolved_tpr)
        detector.delta = config.resolved_tpr
        state.detector = detector

    if config.coreset_budget > 0:
        task_data = {
            c: streams.dataset.x_train[streams.dataset.train_indices_for([c])]
            for c in streams.task_classes
        }
        state.coreset = update_coreset(
            state.coreset, task_data, config.coreset_budget, streams.coreset_rng
        )

    _evaluate_after_task(state, streams)
    state.task_index += 1
    return state


def run_sequence(
    scenario: stream.ScenarioConfig,
    config: TrainConfig,
    dataset: Dataset,
    taxonomy: Taxonomy,
    method: str = "distillmatch",
    ablation: AblationFlags = AblationFlags(),
    oracle_cache=None,
) -> tuple[metrics.ResultsTable, list[StepRecord]]:
    """Train all tasks in order and assemble the results table.

    Evaluates local/prefix-range accuracies on the test split after every
    task, then fills in the per-prefix offline-oracle accuracies (cached when
    ``oracle_cache`` is a directory).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if method != "distillmatch" and ablation.active():
        raise ConfigurationError("ablation flags apply to the distillmatch method only")
    sequence = stream.make_tasks(taxonomy, scenario.task_mode, scenario.n_tasks, scenario.seed)
    state = RunState(
        model=IncrementalClassifier(dataset.dim, config.hidden,
                                    seed=derive_seed(config.seed, "init")),
        coreset=Coreset(config.coreset_budget),
    )
    for n in range(sequence.n_tasks):
        streams = build_task_streams(dataset, taxonomy, sequence, n, scenario, config, method)
        train_task(state, streams, config, method, ablation)

    n_tasks = sequence.n_tasks
    local = np.full((n_tasks, n_tasks), np.nan)
    global_r = np.full((n_tasks, n_tasks), np.nan)
    prefix = np.full((n_tasks, n_tasks), np.nan)
    for i in range(n_tasks):
        local[i, :i + 1] = state.local_rows[i]
        global_r[i, :i + 1] = state.global_rows[i]
        prefix[i, :i + 1] = state.prefix_rows[i]
    oracle = np.array([
        metrics.offline_oracle(dataset, sequence.classes_through(n + 1), config,
                               seed=config.seed, cache_dir=oracle_cache)
        for n in range(n_tasks)
    ])
    table = metrics.ResultsTable(
        local=local,
        global_r=global_r,
        prefix=prefix,
        oracle=oracle,
        task_sizes=np.array([len(t) for t in sequence.tasks], dtype=np.int64),
        auroc_per_task=np.array(state.aurocs),
    )
    return table, state.step_rows
