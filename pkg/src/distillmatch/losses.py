"""Training-objective components and their balanced combination.

The step objective is
``(l_s + l_pl) / (B + B_pl) + lambda_ucl * l_ul + lambda_dst * l_dst`` where

* ``l_s``   -- class-weighted cross-entropy sum on the labeled batch,
* ``l_pl``  -- class-weighted hard-distillation sum on detector-accepted
  unlabeled examples, pseudo-labeled by the frozen previous-task model,
* ``l_ul``  -- consistency between weak and strong views of unlabeled inputs,
  averaged over the full unlabeled batch,
* ``l_dst`` -- per-past-task KL between the frozen and live model's
  temperature-softened distributions, averaged over batch and past tasks.

Pseudo-label construction never carries gradient: the weak-view predictions
feeding the argmax are detached, and the frozen model contributes constants.

A soft variant of the hard-distillation term (full teacher distributions,
normalized by the accepted count alone) is a documented alternative; the hard
one-hot form with joint ``B + B_pl`` normalization is the operative objective
because it is what the balanced total combines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .model import IncrementalClassifier, Snapshot


@dataclass
class LossBreakdown:
    """Per-step objective components; values are scalars or 0-d tensors."""

    l_s: object
    l_pl: object
    l_ul: object
    l_dst: object
    l_total: object
    b_pl: int
    lambda_ucl: float
    lambda_dst: float

    def floats(self) -> dict:
        def scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return {
            "l_s": scalar(self.l_s),
            "l_pl": scalar(self.l_pl),
            "l_ul": scalar(self.l_ul),
            "l_dst": scalar(self.l_dst),
            "l_total": scalar(self.l_total),
            "b_pl": int(self.b_pl),
        }


def class_balance_weights(labels, pseudo_labels, n_classes: int) -> np.ndarray:
    """Per-class gradient weights equalizing the label + pseudo-label counts.

    ``w[k] = total / (n_classes * count[k])`` so that ``count[k] * w[k]`` is
    the same for every class present in the step. Classes with zero count get
    weight 0; they contribute no loss terms, and the zero entries flag them.
    Labels are 0-based class positions in ``0..n_classes-1``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    combined = np.concatenate([labels, pseudo_labels])
    if combined.size and (combined.min() < 0 or combined.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    counts = np.bincount(combined, minlength=n_classes).astype(np.float64)
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = counts.sum() / (n_classes * counts[present])
    return weights


def supervised_loss(model: IncrementalClassifier, inputs_weak, label_positions, weights) -> torch.Tensor:
    """Weighted cross-entropy sum over the labeled batch (unnormalized).

    Predictions range over every class the head covers; ``label_positions``
    are head positions and must lie inside that range.
    """
    labels = torch.as_tensor(np.asarray(label_positions), dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("labeled batch must be nonempty")
    if int(labels.max()) >= model.n_outputs or int(labels.min()) < 0:
        raise ContractError("label position outside the trained head")
    logp = torch.log_softmax(model.logits(inputs_weak), dim=-1)
    w = torch.as_tensor(weights, dtype=logp.dtype)[labels]
    return -(w * logp[torch.arange(len(labels)), labels]).sum()


def local_distillation_loss(
    current: IncrementalClassifier,
    previous: Snapshot | None,
    inputs_weak,
    temperature: float,
    teacher_temperature: float | None = None,
) -> torch.Tensor:
    """Mean over past tasks of the batch-mean KL from the frozen model's
    per-task distribution to the live model's, at softened temperature.

    Both models must see the same weakly augmented inputs; the caller draws
    one weak view and passes it here. With no previous tasks the loss is 0 by
    definition. ``teacher_temperature`` lets the frozen side use a different
    temperature; by default both sides share ``temperature``.
    """
    if previous is None or previous.trained_through == 0:
        return torch.zeros((), dtype=torch.float64)
    t_teacher = temperature if teacher_temperature is None else teacher_temperature
    total = torch.zeros((), dtype=torch.float64)
    for t in range(previous.trained_through):
        p_prev = previous.predict_local(inputs_weak, t, t_teacher)
        sl = current.group_slice(t)
        h = current.features(inputs_weak)
        logits = h @ current.head_weight[sl].T + current.head_bias[sl]
        logq = torch.log_softmax(logits / temperature, dim=-1)
        kl = (p_prev * (torch.log(p_prev) - logq)).sum(dim=-1)
        total = total + kl.mean()
    return total / previous.trained_through


def consistency_loss(model: IncrementalClassifier, inputs_weak, inputs_strong, tau_fm: float) -> torch.Tensor:
    """Cross-entropy between confident weak-view pseudo-labels and strong-view
    predictions, averaged over the full unlabeled batch.

    The weak-view forward is detached: only the strong branch carries
    gradient. Examples whose weak-view confidence is below ``tau_fm`` are
    masked out; an empty confident set yields 0.
    """
    if tau_fm <= 0:
        raise ValueError("confidence threshold must be positive")
    with torch.no_grad():
        q = model.predict(inputs_weak)
        conf, pseudo = q.max(dim=-1)
        mask = conf >= tau_fm
    n = q.shape[0]
    if not bool(mask.any()):
        return torch.zeros((), dtype=torch.float64)
    logp = torch.log_softmax(model.logits(inputs_strong), dim=-1)
    picked = logp[torch.arange(n), pseudo]
    return -(picked[mask]).sum() / n


def hard_distillation_loss(
    current: IncrementalClassifier,
    previous: Snapshot | None,
    inputs_weak,
    accept_mask,
    weights,
    pseudo_label_positions=None,
) -> tuple[torch.Tensor, int]:
    """Weighted cross-entropy sum on detector-accepted unlabeled examples.

    The frozen previous-task model pseudo-labels each weak view by argmax over
    its own (previous tasks only) range; the live model is trained toward that
    one-hot label over its full range. Returns the unnormalized sum and the
    accepted count; the balanced total divides by ``B + B_pl`` jointly with
    the supervised term. ``pseudo_label_positions`` may pass in the argmax
    labels the caller already computed (e.g. for the balance weights).
    """
    if previous is None or previous.trained_through == 0:
        return torch.zeros((), dtype=torch.float64), 0
    mask = torch.as_tensor(np.asarray(accept_mask), dtype=torch.bool)
    if pseudo_label_positions is None:
        with torch.no_grad():
            pseudo_label_positions = previous.predict(inputs_weak).argmax(dim=-1).numpy()
    pseudo = torch.as_tensor(np.asarray(pseudo_label_positions), dtype=torch.long)
    if mask.numel() != pseudo.numel():
        raise ValueError("accept mask length must match the unlabeled batch")
    b_pl = int(mask.sum())
    if b_pl == 0:
        return torch.zeros((), dtype=torch.float64), 0
    logp = torch.log_softmax(current.logits(inputs_weak), dim=-1)
    w = torch.as_tensor(weights, dtype=logp.dtype)[pseudo]
    terms = -(w * logp[torch.arange(len(pseudo)), pseudo])
    return terms[mask].sum(), b_pl


def total_loss(
    l_s,
    l_pl,
    l_ul,
    l_dst,
    batch_size: int,
    b_pl: int,
    lambda_ucl: float,
    lambda_dst: float,
) -> LossBreakdown:
    """Combine the components into the balanced step objective."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if b_pl < 0 or lambda_ucl < 0 or lambda_dst < 0:
        raise ValueError("b_pl and loss weights must be nonnegative")
    total = (l_s + l_pl) / (batch_size + b_pl) + lambda_ucl * l_ul + lambda_dst * l_dst
    return LossBreakdown(
        l_s=l_s,
        l_pl=l_pl,
        l_ul=l_ul,
        l_dst=l_dst,
        l_total=total,
        b_pl=b_pl,
        lambda_ucl=lambda_ucl,
        lambda_dst=lambda_dst,
    )
