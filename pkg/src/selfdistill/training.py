"""Training loop for the three regimes.

standard    : only the deepest exit's label cross entropy (the plain
              single-classifier baseline; shallow heads stay untrained).
dsn         : every exit trained on labels alone (alpha = lambda = 0).
self_distill: the full three-source objective.

SGD with momentum, step learning-rate decay at fractional milestones, L2
weight decay, optional crop/flip augmentation. Runs are deterministic per
seed in single-threaded mode; metrics stream to CSV and checkpoints use the
binary tensor format.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .checkpoint import save_model
from .data import Dataset, Split, batches
from .losses import DistillConfig, cross_entropy_logits, total_loss
from .models import MultiExitModel

REGIMES = ("standard", "dsn", "self_distill")

METRICS_HEADER = "epoch,exit,split,accuracy,ce,kl,hint,total,lr,wall_s"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainPlan:
    regime: str = "self_distill"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    lr_milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of total epochs
    lr_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment: str = "none"
    checkpoint_every: int = 10
    deterministic: bool = True
    finetune_epochs: int = 0  # optional deepest-only phase after the main run

    def validate(self) -> list[str]:
        errors = []
        if self.regime not in REGIMES:
            errors.append(f"train.regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1:
            errors.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            errors.append(f"train.lr must be > 0, got {self.lr}")
        if self.lr_factor <= 0:
            errors.append(f"train.lr_factor must be > 0, got {self.lr_factor}")
        if any(not 0.0 < m < 1.0 for m in self.lr_milestones):
            errors.append(f"train.lr_milestones must lie in (0,1), got {self.lr_milestones}")
        if self.weight_decay < 0:
            errors.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            errors.append(f"train.momentum must be in [0,1), got {self.momentum}")
        if self.augment not in ("none", "crop_flip"):
            errors.append(f"train.augment must be none or crop_flip, got {self.augment!r}")
        if self.checkpoint_every < 1:
            errors.append(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.finetune_epochs < 0:
            errors.append(f"train.finetune_epochs must be >= 0, got {self.finetune_epochs}")
        errors.extend(self.distill.validate())
        return errors

    def check(self) -> "TrainPlan":
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def effective_distill(self) -> DistillConfig:
        if self.regime == "dsn":
            return replace(self.distill, alpha=0.0, lam=0.0)
        return self.distill

    def lr_at(self, epoch: int) -> float:
        # epoch is 1-based; decay kicks in after each fractional milestone
        passed = sum(epoch > math.floor(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_factor ** passed


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    train_acc: list[float]          # per exit, from training batches (nan if not computed)
    test_acc: list[float]           # per exit, eval mode on the test split
    ensemble_acc: float
    ce: list[float]                 # per exit, train means
    kl: list[float]
    hint: list[float]
    total: float
    wall_s: float
    grad_norms: list[tuple[str, float]] | None = None


class SGD:
    """SGD with momentum; decoupled nothing: decay folds into the gradient."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + weight_decay * p.data if weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: list[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: list[np.ndarray] | None = None):
    """One in-place SGD update of `params` from their .grad buffers.

    Returns the velocity buffers so callers looping over steps can thread
    them through; passing velocity=None starts from rest.
    """
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v *= momentum
        v += g
        p.data = p.data - lr * v
    return velocity


def evaluate(model: MultiExitModel, split: Split, batch_size: int = 256,
             ensemble_weights=None) -> tuple[list[float], float]:
    """Per-exit top-1 accuracy (%) and uniform-ensemble accuracy on a split."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    n_exits = model.num_exits
    correct = np.zeros(n_exits, dtype=np.int64)
    ens_correct = 0
    weights = np.ones(n_exits) if ensemble_weights is None else np.asarray(ensemble_weights, float)
    try:
        with T.no_grad():
            for xb, yb in batches(split, batch_size):
                outs = model.forward(xb)
                combined = None
                for i, z in enumerate(outs.logits):
                    p = T.softmax(z, t=1.0).data
                    correct[i] += int((p.argmax(axis=1) == yb).sum())
                    combined = weights[i] * p if combined is None else combined + weights[i] * p
                ens_correct += int((combined.argmax(axis=1) == yb).sum())
    finally:
        model.train(was_training)
    n = len(split)
    return [100.0 * c / n for c in correct], 100.0 * ens_correct / n


def _append_metrics(path: str, record: TrainRecord, n_exits: int, deterministic: bool) -> None:
    new = not os.path.exists(path)
    wall = 0.0 if deterministic else record.wall_s
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        if new:
            f.write(METRICS_HEADER + "\n")
        for i in range(n_exits):
            for split_name, acc in (("train", record.train_acc[i]), ("test", record.test_acc[i])):
                f.write(f"{record.epoch},{i + 1},{split_name},{acc:.6f},"
                        f"{record.ce[i]:.6f},{record.kl[i]:.6f},{record.hint[i]:.6f},"
                        f"{record.total:.6f},{record.lr:.6g},{wall:.3f}\n")


def train(model: MultiExitModel, dataset: Dataset, plan: TrainPlan,
          out_dir: str | None = None, log=None) -> tuple[MultiExitModel, list[TrainRecord]]:
    """Run the plan; returns the trained model and one record per epoch."""
    plan.check()
    if plan.regime != "standard" and model.num_exits < 2:
        raise ValueError(f"regime {plan.regime} needs at least 2 exits")
    config = plan.effective_distill()
    opt = SGD(model.parameters(), momentum=plan.momentum)
    records: list[TrainRecord] = []
    n_exits = model.num_exits
    deepest = model.exit_indices[-1]
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        lr = plan.lr_at(epoch)
        model.train(True)
        seen = 0
        correct = np.zeros(n_exits, dtype=np.int64)
        term_sums = np.zeros((n_exits, 3))
        total_sum = 0.0
        n_batches = 0
        for step_idx, (xb, yb) in enumerate(
                batches(dataset.train, plan.batch_size, shuffle_seed=plan.seed,
                        augment=plan.augment, epoch=epoch)):
            x = Tensor(xb)
            if plan.regime == "standard":
                z, _ = model.forward_to_exit(x, deepest)
                loss = cross_entropy_logits(z, yb)
                term_sums[-1, 0] += loss.item()
                correct[-1] += int((z.data.argmax(axis=1) == yb).sum())
                for i in range(n_exits - 1):
                    correct[i] = -1  # sentinel: not computed this regime
            else:
                outs = model.forward(x)
                breakdown = total_loss(outs, yb, config)
                loss = breakdown.total
                for i, (ce, kl, hint) in enumerate(breakdown.per_exit):
                    term_sums[i] += (ce.item(), kl.item(), hint.item())
                for i, z in enumerate(outs.logits):
                    correct[i] += int((z.data.argmax(axis=1) == yb).sum())
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step_idx}")
            total_sum += lval
            n_batches += 1
            seen += len(yb)
            T.backward(loss)
            opt.step(lr, plan.weight_decay)
            opt.zero_grad()

        train_acc = [100.0 * c / seen if c >= 0 else float("nan") for c in correct]
        test_acc, ens_acc = evaluate(model, dataset.test, max(plan.batch_size, 256))
        record = TrainRecord(
            epoch=epoch, lr=lr,
            train_acc=train_acc, test_acc=test_acc, ensemble_acc=ens_acc,
            ce=list(term_sums[:, 0] / n_batches),
            kl=list(term_sums[:, 1] / n_batches),
            hint=list(term_sums[:, 2] / n_batches),
            total=total_sum / n_batches,
            wall_s=time.perf_counter() - t0,
        )
        records.append(record)
        if metrics_path:
            _append_metrics(metrics_path, record, n_exits, plan.deterministic)
        if log:
            log(f"epoch {epoch:3d}/{plan.epochs}  lr {lr:.4g}  loss {record.total:.4f}  "
                f"test {['%.1f' % a for a in test_acc]}  ens {ens_acc:.1f}  "
                f"({record.wall_s:.1f}s)")
        if out_dir and (epoch % plan.checkpoint_every == 0 or epoch == plan.epochs):
            save_model(model, os.path.join(out_dir, f"checkpoint_ep{epoch}.sdck"))

    if plan.finetune_epochs:
        _finetune_deepest(model, dataset, plan, opt, records, metrics_path, log)
    if out_dir:
        save_model(model, os.path.join(out_dir, "checkpoint_final.sdck"))
    return model, records


def _finetune_deepest(model, dataset, plan, opt, records, metrics_path, log) -> None:
    """Optional post-convergence phase: keep training only the deepest exit's CE."""
    deepest = model.exit_indices[-1]
    lr = plan.lr_at(plan.epochs)
    n_exits = model.num_exits
    for extra in range(1, plan.finetune_epochs + 1):
        epoch = plan.epochs + extra
        t0 = time.perf_counter()
        model.train(True)
        seen, correct, total_sum, n_batches = 0, 0, 0.0, 0
        for step_idx, (xb, yb) in enumerate(
                batches(dataset.train, plan.batch_size, shuffle_seed=plan.seed,
                        augment=plan.augment, epoch=epoch)):
            z, _ = model.forward_to_exit(Tensor(xb), deepest)
            loss = cross_entropy_logits(z, yb)
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step_idx}")
            total_sum += lval
            n_batches += 1
            correct += int((z.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
            T.backward(loss)
            opt.step(lr, plan.weight_decay)
            opt.zero_grad()
        test_acc, ens_acc = evaluate(model, dataset.test, max(plan.batch_size, 256))
        train_acc = [float("nan")] * (n_exits - 1) + [100.0 * correct / seen]
        record = TrainRecord(epoch=epoch, lr=lr, train_acc=train_acc, test_acc=test_acc,
                             ensemble_acc=ens_acc,
                             ce=[float("nan")] * (n_exits - 1) + [total_sum / n_batches],
                             kl=[0.0] * n_exits, hint=[0.0] * n_exits,
                             total=total_sum / n_batches, wall_s=time.perf_counter() - t0)
        records.append(record)
        if metrics_path:
            _append_metrics(metrics_path, record, n_exits, plan.deterministic)
        if log:
            log(f"finetune epoch {epoch}  loss {record.total:.4f}  "
                f"test {['%.1f' % a for a in test_acc]}")
