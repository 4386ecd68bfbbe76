"""Semi-supervised continual-learning lab.

Correlated labeled/unlabeled stream simulation over a class hierarchy, an
incrementally growing classifier trained with distillation, detector-gated
pseudo-labeling, consistency regularization and class balancing, plus the
metric suite (normalized average accuracy, backward transfer, forgetting) and
an experiment harness, all at a desk scale that runs in minutes on one CPU.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    SplitError,
    TaxonomyError,
)
from .harness import (
    DatasetConfig,
    ExperimentConfig,
    ablate,
    parse_config,
    parse_config_text,
    report,
    run_experiment,
    run_oracle,
    serialize_config,
)
from .losses import (
    LossBreakdown,
    class_balance_weights,
    consistency_loss,
    hard_distillation_loss,
    local_distillation_loss,
    supervised_loss,
    total_loss,
)
from .metrics import ResultsTable, bwt, fgt, offline_oracle, omega, omega_curve, task_accuracy
from .model import (
    IncrementalClassifier,
    Snapshot,
    load_checkpoint,
    save_checkpoint,
    strong_augment,
    weak_augment,
)
from .ood import OodDetector, auroc, calibrate_threshold, ood_score, train_detector
from .stream import (
    LabeledBatch,
    ScenarioConfig,
    TaskSequence,
    UnlabeledBatch,
    make_tasks,
    sample_labeled_batch,
    sample_unlabeled_batch,
    unlabeled_class_pool,
)
from .taxonomy import (
    Dataset,
    Taxonomy,
    load_cifar_layout,
    load_taxonomy,
    save_taxonomy,
    synthetic_dataset,
)
from .trainer import (
    AblationFlags,
    Coreset,
    RunState,
    TrainConfig,
    lr_schedule,
    run_sequence,
    train_task,
    update_coreset,
)

__version__ = "0.1.0"
