"""Knowledge distillation and plain supervised training.

The KD objective mixes a hard term (cross-entropy of the labels under the
temperature-softened student) and a soft term between softened teacher and
student distributions, weighted by alpha; no temperature-squared rescaling is
applied. Students always start from random initialization; teacher weights
reach them only through the embedding side of the pipeline.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .datasets import ArrayDataset
from .errors import DistilnasError
from .nets import StagedNetwork, build
from .space import ArchConfig, SearchSpaceSpec, config_to_text

TEACHER_TARGETS = "teacher-targets"
STUDENT_TARGETS = "student-targets"


class TrainingError(DistilnasError):
    """Training hit non-finite values or an empty split."""


@dataclass(frozen=True)
class KDConfig:
    """Distillation hyperparameters.

    ``soft_target_order`` picks which softened distribution plays the target
    in the soft cross-entropy: ``teacher-targets`` is the common convention
    -sum p_t log p_s; ``student-targets`` is the transposed -sum p_s log p_t.
    """

    temperature: float = 6.0
    alpha: float = 0.5
    epochs: int = 50
    lr: float = 5e-2
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    soft_target_order: str = TEACHER_TARGETS

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0, lr > 0, batch_size >= 1 required")
        if self.soft_target_order not in (TEACHER_TARGETS, STUDENT_TARGETS):
            raise ValueError(f"unknown soft_target_order {self.soft_target_order!r}")


def soften(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-softened probabilities along the last axis."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if not torch.isfinite(logits).all():
        raise TrainingError("non-finite logits passed to soften")
    z = logits / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    kd: KDConfig,
) -> torch.Tensor:
    """alpha * H(labels, softened student) + (1 - alpha) * soft term."""
    log_ps = F.log_softmax(student_logits / kd.temperature, dim=-1)
    hard = F.nll_loss(log_ps, labels)
    with torch.no_grad():
        pt = soften(teacher_logits, kd.temperature)
    if kd.soft_target_order == TEACHER_TARGETS:
        soft = -(pt * log_ps).sum(dim=-1).mean()
    else:
        ps = soften(student_logits, kd.temperature)
        log_pt = F.log_softmax(teacher_logits / kd.temperature, dim=-1)
        soft = -(ps * log_pt).sum(dim=-1).mean()
    return kd.alpha * hard + (1.0 - kd.alpha) * soft


def evaluate(net: StagedNetwork, split: ArrayDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on a split; the network is left in eval mode."""
    if len(split) == 0:
        raise TrainingError("cannot evaluate on an empty split")
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(split), batch_size):
            x = split.inputs[i : i + batch_size]
            y = split.labels[i : i + batch_size]
            correct += int((net(x).argmax(dim=1) == y).sum())
    return correct / len(split)


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    best_accuracy: float
    best_epoch: int
    history: TrainHistory
    seconds: float


def _epoch_batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _train_loop(
    net: StagedNetwork,
    train: ArrayDataset,
    val: ArrayDataset,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
    loss_fn,
) -> TrainResult:
    """Momentum SGD with cosine-decayed lr; tracks and restores the
    best-validation-epoch weights."""
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("train and val splits must be nonempty")
    t0 = time.monotonic()
    optimizer = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, epochs))
    gen = torch.Generator().manual_seed(seed)
    history = TrainHistory()
    best_acc = evaluate(net, val)
    best_epoch = 0
    best_state = copy.deepcopy(net.state_dict())
    history.val_accuracies.append(best_acc)
    for epoch in range(epochs):
        net.train()
        epoch_loss = 0.0
        nb = 0
        for idx in _epoch_batches(len(train), batch_size, gen):
            x = train.inputs[idx]
            y = train.labels[idx]
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(net, x, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch + 1}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            nb += 1
        scheduler.step()
        acc = evaluate(net, val)
        history.train_losses.append(epoch_loss / max(1, nb))
        history.val_accuracies.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch + 1
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return TrainResult(
        best_accuracy=best_acc,
        best_epoch=best_epoch,
        history=history,
        seconds=time.monotonic() - t0,
    )


def train_supervised(
    net: StagedNetwork,
    train: ArrayDataset,
    val: ArrayDataset,
    epochs: int,
    lr: float = 5e-2,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
) -> TrainResult:
    """Labels-only training (the teacher recipe)."""

    def loss_fn(n, x, y):
        return F.cross_entropy(n(x), y)

    return _train_loop(net, train, val, epochs, lr, momentum, batch_size, seed, loss_fn)


@dataclass
class DistillResult:
    config_text: str
    accuracy: float
    best_epoch: int
    seconds: float


def kd_train(
    spec: SearchSpaceSpec,
    student_config: ArchConfig,
    teacher: StagedNetwork,
    train: ArrayDataset,
    val: ArrayDataset,
    kd: KDConfig,
) -> tuple[StagedNetwork, DistillResult]:
    """Distill a randomly initialized student from a frozen teacher; returns
    the best-epoch student and its record."""
    student = build(spec, student_config, teacher.num_classes, kd.seed)
    teacher.eval()

    def loss_fn(n, x, y):
        with torch.no_grad():
            t_logits = teacher(x)
        return kd_loss(n(x), t_logits, y, kd)

    result = _train_loop(
        student, train, val, kd.epochs, kd.lr, kd.momentum, kd.batch_size, kd.seed, loss_fn
    )
    return student, DistillResult(
        config_text=config_to_text(student_config),
        accuracy=result.best_accuracy,
        best_epoch=result.best_epoch,
        seconds=result.seconds,
    )
