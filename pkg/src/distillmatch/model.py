"""Incrementally growing classifier, frozen snapshots, and the weak/strong
input perturbations used in place of image augmentation.

All parameters are float64 so that training is bit-reproducible on CPU and
finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

import numpy as np
import torch
from torch import nn

from .errors import ContractError

DTYPE = torch.float64


def weak_augment(x: np.ndarray, rng: np.random.Generator, sigma: float = 0.05) -> np.ndarray:
    """Additive isotropic Gaussian jitter; ``sigma=0`` leaves values unchanged."""
    return x + sigma * rng.standard_normal(x.shape)


def strong_augment(
    x: np.ndarray,
    rng: np.random.Generator,
    sigma: float = 0.25,
    drop_fraction: float = 0.1,
) -> np.ndarray:
    """Larger jitter plus random zeroing of a fraction of the coordinates."""
    out = x + sigma * rng.standard_normal(x.shape)
    out[rng.random(x.shape) < drop_fraction] = 0.0
    return out


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    layer.weight.data.uniform_(-bound, bound, generator=gen)
    layer.bias.data.uniform_(-bound, bound, generator=gen)


def as_input(x) -> torch.Tensor:
    """Coerce a feature array to a 2-d float64 tensor."""
    t = torch.as_tensor(x, dtype=DTYPE)
    return t.unsqueeze(0) if t.dim() == 1 else t


class IncrementalClassifier(nn.Module):
    """Fully connected classifier whose output head grows one group per task.

    Each output group holds the logits of one task's classes, in the order the
    classes were registered via :meth:`expand_head`. Predictions over a range
    of tasks slice the head weights before the matmul, so outputs over old
    ranges are bit-identical before and after an expansion.
    """

    def __init__(self, in_dim: int, hidden=(64, 64), seed: int = 0):
        super().__init__()
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = self.in_dim
        for width in self.hidden:
            layer = nn.Linear(prev, width, dtype=DTYPE)
            _init_linear(layer, gen)
            layers.append(layer)
            prev = width
        self.trunk = nn.ModuleList(layers)
        self.feature_dim = prev
        self.head_weight = nn.Parameter(torch.zeros(0, self.feature_dim, dtype=DTYPE))
        self.head_bias = nn.Parameter(torch.zeros(0, dtype=DTYPE))
        self.output_groups: list[tuple[int, ...]] = []
        self._class_pos: dict[int, int] = {}

    @property
    def trained_through(self) -> int:
        """Number of output groups, i.e. tasks the head covers."""
        return len(self.output_groups)

    @property
    def n_outputs(self) -> int:
        return int(self.head_weight.shape[0])

    def classes_through(self, task_range: int | None = None) -> tuple[int, ...]:
        t = self.trained_through if task_range is None else task_range
        return tuple(c for group in self.output_groups[:t] for c in group)

    def group_slice(self, task_index: int) -> slice:
        start = sum(len(g) for g in self.output_groups[:task_index])
        return slice(start, start + len(self.output_groups[task_index]))

    def positions_of(self, class_ids) -> np.ndarray:
        """Head positions of global class ids; raises on unknown ids."""
        try:
            return np.array([self._class_pos[int(c)] for c in np.asarray(class_ids).ravel()])
        except KeyError as err:
            raise ContractError(f"class id {err.args[0]} is outside the trained head") from None

    def expand_head(self, class_ids, seed: int = 0) -> None:
        """Append one output group for ``class_ids``.

        New weights are uniform in +/- 1/feature_dim with zero bias: small
        enough that existing classes keep dominating right after expansion.
        Existing parameters are untouched.
        """
        ids = tuple(int(c) for c in class_ids)
        if len(ids) < 1:
            raise ValueError("a new output group needs at least one class")
        if len(set(ids)) != len(ids) or any(c in self._class_pos for c in ids):
            raise ValueError(f"class ids {ids} overlap an existing output group")
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / self.feature_dim
        new_w = torch.empty(len(ids), self.feature_dim, dtype=DTYPE)
        new_w.uniform_(-bound, bound, generator=gen)
        new_b = torch.zeros(len(ids), dtype=DTYPE)
        with torch.no_grad():
            self.head_weight = nn.Parameter(torch.cat([self.head_weight.data, new_w]))
            self.head_bias = nn.Parameter(torch.cat([self.head_bias.data, new_b]))
        base = len(self._class_pos)
        for offset, cid in enumerate(ids):
            self._class_pos[cid] = base + offset
        self.output_groups.append(ids)

    def features(self, x) -> torch.Tensor:
        h = as_input(x)
        for layer in self.trunk:
            h = torch.relu(layer(h))
        return h

    def logits(self, x, task_range: int | None = None) -> torch.Tensor:
        """Logits over the classes of tasks 0..task_range-1 (all when None)."""
        t = self._check_range(task_range)
        width = sum(len(g) for g in self.output_groups[:t])
        h = self.features(x)
        return h @ self.head_weight[:width].T + self.head_bias[:width]

    def predict(self, x, task_range: int | None = None, temperature: float = 1.0) -> torch.Tensor:
        """Temperature-scaled softmax over the classes of tasks 0..task_range-1."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return torch.softmax(self.logits(x, task_range) / temperature, dim=-1)

    def predict_local(self, x, task_index: int, temperature: float = 1.0) -> torch.Tensor:
        """Softmax restricted to a single task's output group."""
        if not 0 <= task_index < self.trained_through:
            raise ContractError(f"task index {task_index} beyond trained head")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        sl = self.group_slice(task_index)
        h = self.features(x)
        logits = h @ self.head_weight[sl].T + self.head_bias[sl]
        return torch.softmax(logits / temperature, dim=-1)

    def classify(self, x, class_ids, temperature: float = 1.0) -> np.ndarray:
        """Argmax prediction restricted to an arbitrary set of known classes."""
        pos = self.positions_of(class_ids)
        with torch.no_grad():
            h = self.features(x)
            logits = h @ self.head_weight[pos].T + self.head_bias[pos]
        choice = torch.argmax(logits, dim=-1).numpy()
        return np.asarray(class_ids)[choice]

    def _check_range(self, task_range: int | None) -> int:
        t = self.trained_through if task_range is None else int(task_range)
        if not 1 <= t <= self.trained_through:
            raise ContractError(
                f"task range {task_range} beyond trained head ({self.trained_through} groups)"
            )
        return t

    def parameter_vector(self) -> np.ndarray:
        with torch.no_grad():
            return torch.cat([p.reshape(-1) for p in self.parameters()]).numpy().copy()

    def load_parameter_vector(self, vec: np.ndarray) -> None:
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.as_tensor(vec[offset:offset + n], dtype=DTYPE).reshape(p.shape))
                offset += n
        if offset != len(vec):
            raise ValueError(f"parameter vector length {len(vec)} != expected {offset}")

    def param_hash(self) -> str:
        h = hashlib.sha256(self.parameter_vector().tobytes())
        h.update(json.dumps(self.output_groups).encode())
        return h.hexdigest()

    def snapshot(self) -> "Snapshot":
        """Deep frozen copy; later training of this model never affects it."""
        if self.trained_through < 1:
            raise ContractError("cannot snapshot a model with no trained output group")
        frozen = copy.deepcopy(self)
        for p in frozen.parameters():
            p.requires_grad_(False)
        frozen.eval()
        return Snapshot(frozen)


class Snapshot:
    """Read-only view of a classifier frozen at the end of a task."""

    def __init__(self, frozen: IncrementalClassifier):
        self._model = frozen

    @property
    def output_groups(self) -> list[tuple[int, ...]]:
        return self._model.output_groups

    @property
    def trained_through(self) -> int:
        return self._model.trained_through

    def classes_through(self, task_range: int | None = None) -> tuple[int, ...]:
        return self._model.classes_through(task_range)

    def logits(self, x, task_range: int | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self._model.logits(x, task_range)

    def predict(self, x, task_range: int | None = None, temperature: float = 1.0) -> torch.Tensor:
        with torch.no_grad():
            return self._model.predict(x, task_range, temperature)

    def predict_local(self, x, task_index: int, temperature: float = 1.0) -> torch.Tensor:
        with torch.no_grad():
            return self._model.predict_local(x, task_index, temperature)

    def classify(self, x, class_ids, temperature: float = 1.0) -> np.ndarray:
        return self._model.classify(x, class_ids, temperature)

    def param_hash(self) -> str:
        return self._model.param_hash()


CHECKPOINT_VERSION = "1"


def save_checkpoint(model: IncrementalClassifier, path, taxonomy_hash: str = "") -> None:
    """Write a checkpoint: version tag, taxonomy hash, output-group table and a
    flat float64 parameter array (npz; see README for the field list)."""
    np.savez(
        path,
        version=CHECKPOINT_VERSION,
        taxonomy_hash=taxonomy_hash,
        in_dim=model.in_dim,
        hidden=np.array(model.hidden, dtype=np.int64),
        groups=json.dumps(model.output_groups),
        params=model.parameter_vector(),
    )


def load_checkpoint(path) -> tuple[IncrementalClassifier, str]:
    with np.load(path, allow_pickle=False) as data:
        version = str(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        model = IncrementalClassifier(int(data["in_dim"]), tuple(data["hidden"].tolist()))
        for group in json.loads(str(data["groups"])):
            model.expand_head(group)
        model.load_parameter_vector(data["params"])
        return model, str(data["taxonomy_hash"])
