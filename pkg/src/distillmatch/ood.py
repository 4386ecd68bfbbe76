"""Out-of-distribution scoring with decomposed confidence, threshold
calibration to a target true-positive ratio, and AUROC audits.

The detector is a separate classifier whose logits are a quotient: per-class
proximity numerators over a learned embedding (negative squared distance to a
learned class center) divided by a shared positive rescaler (a sigmoid head).
Scoring perturbs the input one sign-gradient step toward a higher raw score
before reading it off, which sharpens the in/out separation. Calibration uses
held-out in-distribution data only.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import ContractError, SplitError
from .model import DTYPE, _init_linear, as_input, weak_augment
from .seeding import derive_rng, derive_seed

DEFAULT_EPSILON = 0.002


class OodDetector(nn.Module):
    """Decomposed-confidence scorer over the classes seen so far."""

    def __init__(self, in_dim: int, n_classes: int, hidden=(64, 64), seed: int = 0,
                 epsilon: float = DEFAULT_EPSILON):
        super().__init__()
        if n_classes < 1:
            raise ValueError("detector needs at least one class")
        self.in_dim = int(in_dim)
        self.n_classes = int(n_classes)
        self.epsilon = float(epsilon)
        self.tau = None
        self.delta = None
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = self.in_dim
        for width in hidden:
            layer = nn.Linear(prev, width, dtype=DTYPE)
            _init_linear(layer, gen)
            layers.append(layer)
            prev = width
        self.trunk = nn.ModuleList(layers)
        bound = 1.0 / math.sqrt(prev)
        centers = torch.empty(self.n_classes, prev, dtype=DTYPE)
        centers.uniform_(-bound, bound, generator=gen)
        self.centers = nn.Parameter(centers)
        self.scale_head = nn.Linear(prev, 1, dtype=DTYPE)
        _init_linear(self.scale_head, gen)

    def features(self, x) -> torch.Tensor:
        h = as_input(x)
        for layer in self.trunk:
            h = torch.relu(layer(h))
        return h

    def decomposed_logits(self, x) -> torch.Tensor:
        """Numerator / denominator logits: -(squared center distance) / g(x)."""
        h = self.features(x)
        sq = (h * h).sum(dim=-1, keepdim=True) - 2.0 * h @ self.centers.T \
            + (self.centers * self.centers).sum(dim=-1)
        g = torch.sigmoid(self.scale_head(h))
        return -sq / g

    def raw_score(self, x) -> torch.Tensor:
        return self.decomposed_logits(x).max(dim=-1).values

    def score(self, x) -> np.ndarray:
        """Confidence score after the sign-gradient input preprocessing step.

        With ``epsilon = 0`` this is exactly the unperturbed raw score.
        """
        xt = as_input(np.asarray(x, dtype=np.float64))
        if self.epsilon != 0.0:
            xt = xt.clone().requires_grad_(True)
            grad, = torch.autograd.grad(self.raw_score(xt).sum(), xt)
            xt = xt.detach() + self.epsilon * grad.sign()
        with torch.no_grad():
            return self.raw_score(xt).numpy().copy()

    def accept(self, x) -> np.ndarray:
        """Boolean in-distribution mask at the calibrated threshold."""
        if self.tau is None:
            raise ContractError("detector threshold not calibrated")
        return self.score(x) >= self.tau


def ood_score(detector: OodDetector, x) -> np.ndarray:
    """Confidence scores for inputs; see :meth:`OodDetector.score`."""
    return detector.score(x)


def train_detector(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config,
    seed: int = 0,
    split_fraction: float = 0.5,
) -> tuple[OodDetector, tuple[np.ndarray, np.ndarray]]:
    """Train the scorer on a stratified half of the labeled data.

    ``labels`` are 0-based class positions. The split is per class and
    deterministic by seed; the untouched holdout half is returned for
    threshold calibration. Training is plain supervised cross-entropy on the
    decomposed logits (no unlabeled losses), with the same optimizer, weak
    augmentation and schedule the main classifier uses.
    """
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie in (0, 1)")
    from .trainer import lr_schedule  # late import; trainer imports this module

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng_split = derive_rng(seed, "ood-split")
    train_idx, hold_idx = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise SplitError(f"class {c} has only {len(idx)} labeled example(s); need >= 2")
        idx = idx[rng_split.permutation(len(idx))]
        n_tr = min(max(int(len(idx) * split_fraction), 1), len(idx) - 1)
        train_idx.append(np.sort(idx[:n_tr]))
        hold_idx.append(np.sort(idx[n_tr:]))
    train_idx = np.concatenate(train_idx)
    hold_idx = np.concatenate(hold_idx)

    detector = OodDetector(
        in_dim=features.shape[1],
        n_classes=n_classes,
        hidden=config.hidden,
        seed=derive_seed(seed, "ood-init"),
        epsilon=config.epsilon_ood,
    )
    x_tr, y_tr = features[train_idx], labels[train_idx]
    rng_batch = derive_rng(seed, "ood-batches")
    rng_aug = derive_rng(seed, "ood-augment")
    optimizer = torch.optim.SGD(
        detector.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(x_tr) / config.batch_size)
    targets_all = torch.as_tensor(y_tr, dtype=torch.long)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            idx = rng_batch.integers(0, len(x_tr), size=config.batch_size)
            xb = weak_augment(x_tr[idx], rng_aug, config.sigma_weak)
            logits = detector.decomposed_logits(xb)
            loss = torch.nn.functional.cross_entropy(logits, targets_all[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return detector, (features[hold_idx], labels[hold_idx])


def calibrate_threshold(detector: OodDetector, holdout_features: np.ndarray, delta: float) -> float:
    """Threshold accepting the smallest holdout fraction >= ``delta``.

    Scores are sorted descending and the threshold is the score at 1-based
    rank ``ceil(delta * len(holdout))``; acceptance uses >=, so tied scores at
    the threshold are all accepted.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    scores = np.sort(detector.score(holdout_features))[::-1]
    if len(scores) == 0:
        raise ValueError("holdout must be nonempty")
    k = math.ceil(delta * len(scores))
    return float(scores[k - 1])


def auroc(id_scores, ood_scores) -> float:
    """Probability a random in-distribution score exceeds a random OoD score.

    Ties count one half; this is the normalized Mann-Whitney U statistic,
    computed from midranks.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if len(id_scores) == 0 or len(ood_scores) == 0:
        raise ValueError("both score sets must be nonempty")
    values = np.concatenate([id_scores, ood_scores])
    order = np.argsort(values, kind="stable")
    svals = values[order]
    n = len(svals)
    starts = np.flatnonzero(np.r_[True, svals[1:] != svals[:-1]])
    ends = np.r_[starts[1:], n]
    mean_ranks = (starts + ends - 1) / 2.0 + 1.0  # 1-based midranks
    ranks = np.empty(n)
    ranks[order] = np.repeat(mean_ranks, ends - starts)
    n_id = len(id_scores)
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * len(ood_scores)))
