"""Experiment configuration, execution, persistence and curve export.

Configs are flat ``key: value`` text with dotted section prefixes
(``train.lr``, ``scenario.task_mode``); unambiguous bare names are accepted as
aliases (``coreset`` for ``train.coreset``). Every run writes a directory with
``steps.csv`` (per-step loss components), ``matrix.csv`` (accuracy matrices,
oracle column and per-task AUROC; every summary number is recomputable from
it), ``summary.json`` and the resolved ``config.txt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics, trainer
from .errors import ConfigurationError, DataError
from .stream import ScenarioConfig, make_tasks
from .taxonomy import Dataset, Taxonomy, cifar_layout_path, load_taxonomy, synthetic_dataset
from .trainer import METHODS, AblationFlags, TrainConfig

STEP_COLUMNS = ("step", "l_s", "l_pl", "l_ul", "l_dst", "l_total", "B_pl")
SUMMARY_METRICS = ("final_accuracy", "omega", "bwt", "fgt")
ABLATION_ROWS = ("l_pl", "w_k", "l_ul", "l_dst", "full_method")
_ABLATION_FLAG = {"l_pl": "no_pl", "w_k": "no_w", "l_ul": "no_ul", "l_dst": "no_dst"}


@dataclass(frozen=True)
class DatasetConfig:
    per_class_train: int = 100
    per_class_test: int = 20
    dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.per_class_train < 1 or self.per_class_test < 1:
            raise ConfigurationError("per-class counts must be >= 1")
        if self.dim < 2:
            raise ConfigurationError("feature dimension must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    taxonomy: str = "cifar_layout"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    task_mode: str = "random_class"
    unlabeled_mode: str = "uniform"
    n_tasks: int = 5
    random_sample_count: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "distillmatch"
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs"
    oracle_cache: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method != "distillmatch" and self.ablation.active():
            raise ConfigurationError("ablation flags require method 'distillmatch'")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        # Exercises the same constraint the stream module enforces.
        self.scenario_for(self.seeds[0])

    def scenario_for(self, seed: int) -> ScenarioConfig:
        return ScenarioConfig(
            task_mode=self.task_mode,
            unlabeled_mode=self.unlabeled_mode,
            n_tasks=self.n_tasks,
            batch_size=self.train.batch_size,
            mu=self.train.mu,
            random_sample_count=self.random_sample_count,
            seed=seed,
        )

    def train_for(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def taxonomy_path(self) -> Path:
        if self.taxonomy == "cifar_layout":
            return cifar_layout_path()
        return Path(self.taxonomy)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(p.strip()) for p in text.split(","))


def _parse_auto_float(text: str):
    return None if text.lower() == "auto" else float(text)


def _parse_auto_bool(text: str):
    return None if text.lower() == "auto" else _parse_bool(text)


# key -> (path into ExperimentConfig, parser)
_KEY_TABLE = {
    "taxonomy": (("taxonomy",), str),
    "dataset.per_class_train": (("dataset", "per_class_train"), int),
    "dataset.per_class_test": (("dataset", "per_class_test"), int),
    "dataset.dim": (("dataset", "dim"), int),
    "dataset.seed": (("dataset", "seed"), int),
    "scenario.task_mode": (("task_mode",), str),
    "scenario.unlabeled_mode": (("unlabeled_mode",), str),
    "scenario.n_tasks": (("n_tasks",), int),
    "scenario.batch_size": (("train", "batch_size"), int),
    "scenario.mu": (("train", "mu"), float),
    "scenario.random_sample_count": (("random_sample_count",), int),
    "train.epochs": (("train", "epochs"), int),
    "train.lr": (("train", "lr"), float),
    "train.decay_epochs": (("train", "decay_epochs"), _parse_int_list),
    "train.decay_factor": (("train", "decay_factor"), float),
    "train.momentum": (("train", "momentum"), float),
    "train.weight_decay": (("train", "weight_decay"), float),
    "train.lambda_ucl": (("train", "lambda_ucl"), float),
    "train.lambda_dst": (("train", "lambda_dst"), float),
    "train.temperature": (("train", "temperature"), float),
    "train.tau_fm": (("train", "tau_fm"), float),
    "train.tpr": (("train", "tpr"), _parse_auto_float),
    "train.epsilon_ood": (("train", "epsilon_ood"), float),
    "train.coreset": (("train", "coreset_budget"), int),
    "train.finetune": (("train", "finetune"), _parse_auto_bool),
    "train.finetune_epochs": (("train", "finetune_epochs"), int),
    "train.finetune_decay_epochs": (("train", "finetune_decay_epochs"), _parse_int_list),
    "train.hidden": (("train", "hidden"), _parse_int_list),
    "train.sigma_weak": (("train", "sigma_weak"), float),
    "train.sigma_strong": (("train", "sigma_strong"), float),
    "train.drop_fraction": (("train", "drop_fraction"), float),
    "method": (("method",), str),
    "ablation.no_pl": (("ablation", "no_pl"), _parse_bool),
    "ablation.no_w": (("ablation", "no_w"), _parse_bool),
    "ablation.no_ul": (("ablation", "no_ul"), _parse_bool),
    "ablation.no_dst": (("ablation", "no_dst"), _parse_bool),
    "seeds": (("seeds",), _parse_int_list),
    "out": (("out",), str),
    "oracle_cache": (("oracle_cache",), str),
}


def _alias_table() -> dict[str, str]:
    by_suffix: dict[str, list[str]] = {}
    for key in _KEY_TABLE:
        by_suffix.setdefault(key.rsplit(".", 1)[-1], []).append(key)
    return {suffix: keys[0] for suffix, keys in by_suffix.items() if len(keys) == 1}


_ALIASES = _alias_table()


def parse_config_text(text: str, paper_scale: bool = False) -> ExperimentConfig:
    """Build a validated config from flat key/value text.

    Missing keys take the documented defaults; an empty string yields the
    all-default config. Unknown keys raise a named error.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        canonical = key if key in _KEY_TABLE else _ALIASES.get(key)
        if canonical is None:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        path, parser = _KEY_TABLE[canonical]
        try:
            values[canonical] = (path, parser(value.strip()))
        except ConfigurationError:
            raise
        except ValueError as err:
            raise ConfigurationError(f"key {canonical!r}: {err}") from None

    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {"dataset": {}, "train": {}, "ablation": {}}
    for path, value in values.values():
        if len(path) == 1:
            top[path[0]] = value
        else:
            nested[path[0]][path[1]] = value

    train_defaults = TrainConfig().paper_scale() if paper_scale else TrainConfig()
    try:
        config = ExperimentConfig(
            dataset=DatasetConfig(**nested["dataset"]),
            train=replace(train_defaults, **nested["train"]),
            ablation=AblationFlags(**nested["ablation"]),
            **top,
        )
    except TypeError as err:
        raise ConfigurationError(str(err)) from None
    return config


def parse_config(path=None, paper_scale: bool = False) -> ExperimentConfig:
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    return parse_config_text(text, paper_scale=paper_scale)


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text whose parse equals the given config exactly."""
    obj_of = {"dataset": config.dataset, "train": config.train, "ablation": config.ablation}
    lines = []
    for key, (path, _) in _KEY_TABLE.items():
        if len(path) == 1:
            value = getattr(config, path[0])
        else:
            value = getattr(obj_of[path[0]], path[1])
        if key == "oracle_cache" and value is None:
            continue
        lines.append(f"{key}: {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _nan_to_none(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def run_metrics(table: metrics.ResultsTable) -> dict:
    """Summary numbers of one run, all recomputable from its matrix CSV."""
    n = table.n_tasks
    return {
        "final_accuracy": table.final_accuracy,
        "omega": metrics.omega(table),
        "bwt": metrics.bwt(table) if n >= 2 else None,
        "fgt": metrics.fgt(table) if n >= 2 else None,
        "auroc_per_task": [_nan_to_none(a) for a in table.auroc_per_task],
    }


def _write_steps_csv(path: Path, rows) -> None:
    lines = [",".join(STEP_COLUMNS)]
    for r in rows:
        lines.append(",".join([
            str(r.step), repr(r.l_s), repr(r.l_pl), repr(r.l_ul),
            repr(r.l_dst), repr(r.l_total), str(r.b_pl),
        ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_name(config: ExperimentConfig, seed: int) -> str:
    variant = config.method
    flags = config.ablation.active()
    if flags:
        variant += "-" + "-".join(flags)
    return f"{variant}_seed{seed}"


def _prepare_run_dir(out: Path, name: str, overwrite: bool) -> Path:
    run_dir = out / name
    if run_dir.exists():
        if not overwrite:
            raise ConfigurationError(
                f"output directory {run_dir} already exists; pass overwrite to replace it"
            )
        for child in sorted(run_dir.glob("*")):
            if child.is_file():
                child.unlink()
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_inputs(config: ExperimentConfig) -> tuple[Taxonomy, Dataset]:
    taxonomy = load_taxonomy(config.taxonomy_path())
    dataset = synthetic_dataset(
        taxonomy,
        per_class_train=config.dataset.per_class_train,
        per_class_test=config.dataset.per_class_test,
        dim=config.dataset.dim,
        seed=config.dataset.seed,
    )
    return taxonomy, dataset


def _summarize_runs(per_run: list[dict]) -> dict:
    summary = {}
    for name in SUMMARY_METRICS:
        values = [r[name] for r in per_run]
        if any(v is None for v in values):
            summary[name] = {"mean": None, "std": None, "values": values}
        else:
            summary[name] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "values": values,
            }
    return summary


def run_experiment(config: ExperimentConfig, overwrite: bool = False) -> list[Path]:
    """Execute one run per seed and write the cross-seed summary.

    Runs are pinned to a single torch thread so repeated executions with the
    same config reproduce every persisted number bit for bit.
    """
    torch.set_num_threads(1)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = config.oracle_cache or str(out / "oracle_cache")
    taxonomy, dataset = _load_inputs(config)
    config_text = serialize_config(config)

    run_dirs = []
    per_run = []
    for seed in config.seeds:
        run_dir = _prepare_run_dir(out, _run_name(config, seed), overwrite)
        table, step_rows = trainer.run_sequence(
            config.scenario_for(seed), config.train_for(seed), dataset, taxonomy,
            method=config.method, ablation=config.ablation, oracle_cache=cache,
        )
        (run_dir / "config.txt").write_text(config_text, encoding="utf-8")
        _write_steps_csv(run_dir / "steps.csv", step_rows)
        table.save_csv(run_dir / "matrix.csv")
        summary = {"seed": seed, "method": config.method,
                   "ablation": list(config.ablation.active()),
                   "n_tasks": table.n_tasks, **run_metrics(table)}
        _write_json(run_dir / "summary.json", summary)
        run_dirs.append(run_dir)
        per_run.append(summary)

    _write_json(out / "summary.json", {
        "method": config.method,
        "ablation": list(config.ablation.active()),
        "seeds": list(config.seeds),
        "runs": [d.name for d in run_dirs],
        "metrics": _summarize_runs(per_run),
    })
    return run_dirs


def ablate(config: ExperimentConfig, overwrite: bool = False) -> dict:
    """Compare the full method against the four single-removal variants.

    Produces one experiment per row (the four removals plus the full method)
    under the config's output directory, and a combined table with the four
    summary metrics per row.
    """
    if config.method != "distillmatch":
        raise ConfigurationError("ablation studies require method 'distillmatch'")
    if config.ablation.active():
        raise ConfigurationError("the ablation study sets its own flags; start from none")
    out = Path(config.out)
    cache = config.oracle_cache or str(out / "oracle_cache")
    rows = {}
    for row in ABLATION_ROWS:
        flags = AblationFlags(**{_ABLATION_FLAG[row]: True}) if row in _ABLATION_FLAG \
            else AblationFlags()
        sub = replace(config, out=str(out / row), ablation=flags, oracle_cache=cache)
        run_experiment(sub, overwrite=overwrite)
        sub_summary = json.loads((out / row / "summary.json").read_text())
        rows[row] = {
            "A_N": sub_summary["metrics"]["final_accuracy"],
            "omega": sub_summary["metrics"]["omega"],
            "bwt": sub_summary["metrics"]["bwt"],
            "fgt": sub_summary["metrics"]["fgt"],
        }
    table = {"rows": rows, "row_order": list(ABLATION_ROWS),
             "metric_order": ["A_N", "omega", "bwt", "fgt"]}
    _write_json(out / "ablation.json", table)

    lines = ["row,a_n_mean,a_n_std,omega_mean,omega_std,bwt_mean,bwt_std,fgt_mean,fgt_std"]
    for row in ABLATION_ROWS:
        cells = [row]
        for metric in ("A_N", "omega", "bwt", "fgt"):
            for stat in ("mean", "std"):
                value = rows[row][metric][stat]
                cells.append("" if value is None else repr(value))
        lines.append(",".join(cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table


def run_oracle(config: ExperimentConfig, overwrite: bool = False) -> list[Path]:
    """Materialize the offline upper bound as run directories.

    For every prefix the oracle model is trained jointly on that prefix and
    evaluated like a continual model; the prefix accuracies are normalized by
    themselves, so the summary's omega is exactly 1 and the curve is flat,
    while backward transfer and forgetting reflect the real per-prefix models.
    """
    torch.set_num_threads(1)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    taxonomy, dataset = _load_inputs(config)
    config_text = serialize_config(config)

    run_dirs = []
    per_run = []
    for seed in config.seeds:
        run_dir = _prepare_run_dir(out, f"oracle_seed{seed}", overwrite)
        scenario = config.scenario_for(seed)
        train_cfg = config.train_for(seed)
        sequence = make_tasks(taxonomy, scenario.task_mode, scenario.n_tasks, scenario.seed)
        n_tasks = sequence.n_tasks
        local = np.full((n_tasks, n_tasks), np.nan)
        global_r = np.full((n_tasks, n_tasks), np.nan)
        prefix = np.full((n_tasks, n_tasks), np.nan)
        oracle = np.zeros(n_tasks)
        for i in range(n_tasks):
            model = metrics.train_offline_model(
                dataset, sequence.classes_through(i + 1), train_cfg, seed=train_cfg.seed
            )
            for n in range(i + 1):
                task_n = sequence.tasks[n]
                seen = sequence.classes_through(n + 1)
                test_n = dataset.test_indices_for(task_n)
                local[i, n] = metrics.task_accuracy(
                    model.classify(dataset.x_test[test_n], np.array(task_n)),
                    dataset.y_test[test_n])
                global_r[i, n] = metrics.task_accuracy(
                    model.classify(dataset.x_test[test_n], np.array(seen)),
                    dataset.y_test[test_n])
            seen = sequence.classes_through(i + 1)
            test_prefix = dataset.test_indices_for(seen)
            oracle[i] = metrics.task_accuracy(
                model.classify(dataset.x_test[test_prefix], np.array(seen)),
                dataset.y_test[test_prefix])
        for i in range(n_tasks):
            prefix[i, :i + 1] = oracle[:i + 1]
        table = metrics.ResultsTable(
            local=local, global_r=global_r, prefix=prefix, oracle=oracle,
            task_sizes=np.array([len(t) for t in sequence.tasks], dtype=np.int64),
        )
        (run_dir / "config.txt").write_text(config_text, encoding="utf-8")
        _write_steps_csv(run_dir / "steps.csv", [])
        table.save_csv(run_dir / "matrix.csv")
        summary = {"seed": seed, "method": "oracle", "ablation": [],
                   "n_tasks": n_tasks, **run_metrics(table)}
        _write_json(run_dir / "summary.json", summary)
        run_dirs.append(run_dir)
        per_run.append(summary)

    _write_json(out / "summary.json", {
        "method": "oracle", "ablation": [], "seeds": list(config.seeds),
        "runs": [d.name for d in run_dirs], "metrics": _summarize_runs(per_run),
    })
    return run_dirs


def report(run_dirs) -> list[Path]:
    """Write per-task curve CSVs for completed runs.

    ``omega_curve.csv`` holds the running normalized average after each task
    and ``auroc_curve.csv`` the per-task detector audit; the final curve point
    equals the summary's value. Renders a PNG when matplotlib is importable;
    the CSVs are the canonical artifact.
    """
    written = []
    for raw_dir in run_dirs:
        run_dir = Path(raw_dir)
        matrix = run_dir / "matrix.csv"
        summary = run_dir / "summary.json"
        if not matrix.exists() or not summary.exists():
            raise DataError(f"incomplete run directory {run_dir}: need matrix.csv and summary.json")
        table = metrics.ResultsTable.load_csv(matrix)
        curve = metrics.omega_curve(table)
        lines = ["task,omega_so_far"]
        lines += [f"{t + 1},{repr(float(v))}" for t, v in enumerate(curve)]
        omega_path = run_dir / "omega_curve.csv"
        omega_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        lines = ["task,auroc"]
        for t, value in enumerate(table.auroc_per_task):
            text = "" if math.isnan(float(value)) else repr(float(value))
            lines.append(f"{t + 1},{text}")
        auroc_path = run_dir / "auroc_curve.csv"
        auroc_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written += [omega_path, auroc_path]
        written += _maybe_plot(run_dir, curve)
    return written


def _maybe_plot(run_dir: Path, curve: np.ndarray) -> list[Path]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(range(1, len(curve) + 1), 100.0 * curve, marker="o")
    ax.set_xlabel("task")
    ax.set_ylabel("normalized average accuracy (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    path = run_dir / "omega_curve.png"
    fig.savefig(path)
    plt.close(fig)
    return [path]
