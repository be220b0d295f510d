"""The three-source training objective for multi-exit models.

Every shallow exit is supervised by (1) label cross entropy, (2) KL
divergence against the deepest exit's softened distribution, and (3) a
squared-L2 feature hint against the deepest features. The deepest exit is
trained from labels alone: its alpha and lambda are forced to zero, so with
detached teacher signals its gradient is independent of the distillation
knobs. Temperature applies to the KL term; label cross entropy always uses
the T=1 distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .models import ExitOutputs

KL_DIRECTIONS = ("teacher_as_target", "student_as_first_arg")


@dataclass
class DistillConfig:
    """Knobs of the per-exit loss mix.

    alpha weighs KL against label cross entropy, lam weighs the feature
    hint, temperature softens the distributions compared by KL.
    `teacher_as_target` fits the shallow distribution to the deepest one
    (forward KL from the teacher); `student_as_first_arg` is the literal
    KL(student, teacher) reading.
    """

    alpha: float = 0.3
    lam: float = 0.03
    temperature: float = 1.0
    detach_teacher: bool = True
    t_squared_scaling: bool = False
    kl_direction: str = "teacher_as_target"

    def validate(self) -> list[str]:
        errors = []
        if not 0.0 <= self.alpha <= 1.0:
            errors.append(f"distill.alpha must be in [0,1], got {self.alpha}")
        if self.lam < 0.0:
            errors.append(f"distill.lambda must be >= 0, got {self.lam}")
        if self.temperature <= 0.0:
            errors.append(f"distill.temperature must be > 0, got {self.temperature}")
        if self.kl_direction not in KL_DIRECTIONS:
            errors.append(f"distill.kl_direction must be one of {KL_DIRECTIONS}, "
                          f"got {self.kl_direction!r}")
        return errors

    def check(self) -> "DistillConfig":
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        return self


@dataclass
class LossBreakdown:
    """Per-exit (ce, kl, hint) scalar tensors plus the combined total.

    total == sum_i [(1-alpha)*ce_i + alpha*kl_i + lam*hint_i], with alpha
    and lam treated as zero for the deepest exit.
    """

    per_exit: list[tuple[Tensor, Tensor, Tensor]]
    total: Tensor

    def values(self) -> list[tuple[float, float, float]]:
        return [(ce.item(), kl.item(), h.item()) for ce, kl, h in self.per_exit]


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise temperature softmax of B x M logits."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return T.softmax(logits, t=temperature, axis=1)


def _onehot(labels, m: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    eye = np.zeros((labels.size, m), dtype=dtype)
    eye[np.arange(labels.size), labels] = 1.0
    return eye

def cross_entropy(q: Tensor, labels) -> Tensor:
    """Mean over the batch of -log q[label], with q already a distribution."""
    mask = Tensor(_onehot(labels, q.shape[1], q.dtype))
    picked = T.tsum(T.mul(T.log(q), mask), axis=1)
    return T.mul(T.tmean(picked), -1.0)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Label cross entropy straight from logits (log-softmax path, T=1)."""
    mask = Tensor(_onehot(labels, logits.shape[1], logits.dtype))
    picked = T.tsum(T.mul(T.log_softmax(logits, t=1.0), mask), axis=1)
    return T.mul(T.tmean(picked), -1.0)


def kl_divergence(q_student: Tensor, q_teacher: Tensor, config: DistillConfig | None = None) -> Tensor:
    """Mean over the batch of KL(target || other) between probability rows."""
    config = config or DistillConfig()
    if q_student.shape != q_teacher.shape:
        raise T.ShapeError(f"kl_divergence: {q_student.shape} vs {q_teacher.shape}")
    if config.detach_teacher:
        q_teacher = q_teacher.detach()
    if config.kl_direction == "teacher_as_target":
        target, other = q_teacher, q_student
    else:
        target, other = q_student, q_teacher
    per_row = T.tsum(T.mul(target, T.add(T.log(target), T.mul(T.log(other), -1.0))), axis=1)
    return T.tmean(per_row)


def kl_from_logits(z_student: Tensor, z_teacher: Tensor, config: DistillConfig) -> Tensor:
    """KL between softened distributions, computed in log space from logits."""
    t = config.temperature
    if config.detach_teacher:
        z_teacher = z_teacher.detach()
    lp_s = T.log_softmax(z_student, t=t)
    lp_t = T.log_softmax(z_teacher, t=t)
    if config.kl_direction == "teacher_as_target":
        lp_target, lp_other = lp_t, lp_s
    else:
        lp_target, lp_other = lp_s, lp_t
    p_target = T.exp(lp_target)
    per_row = T.tsum(T.mul(p_target, T.add(lp_target, T.mul(lp_other, -1.0))), axis=1)
    kl = T.tmean(per_row)
    if config.t_squared_scaling:
        kl = T.mul(kl, t * t)
    return kl


def hint_loss(f_student: Tensor, f_teacher: Tensor, detach_teacher: bool = True) -> Tensor:
    """Mean over the batch of the squared L2 distance between feature tensors."""
    if f_student.shape != f_teacher.shape:
        raise T.ShapeError(f"hint_loss: {f_student.shape} vs {f_teacher.shape}")
    if detach_teacher:
        f_teacher = f_teacher.detach()
    diff = T.add(f_student, T.mul(f_teacher, -1.0))
    batch = f_student.shape[0]
    per_sample = T.tsum(T.reshape(T.mul(diff, diff), (batch, -1)), axis=1)
    return T.tmean(per_sample)


def total_loss(outputs: ExitOutputs, labels, config: DistillConfig) -> LossBreakdown:
    """Combined objective over all exits; the deepest exit sees only its label term."""
    c = len(outputs.logits)
    if c < 2:
        raise ValueError(f"need at least 2 exits, got {c}")
    config.check()
    z_deep = outputs.logits[-1]
    f_deep = outputs.features[-1]
    per_exit: list[tuple[Tensor, Tensor, Tensor]] = []
    total: Tensor | None = None
    zero = Tensor(np.zeros((), dtype=z_deep.dtype))
    for i in range(c):
        ce = cross_entropy_logits(outputs.logits[i], labels)
        if i < c - 1:
            kl = kl_from_logits(outputs.logits[i], z_deep, config)
            hint = hint_loss(outputs.features[i], f_deep, config.detach_teacher)
            term = T.add(T.add(T.mul(ce, 1.0 - config.alpha), T.mul(kl, config.alpha)),
                         T.mul(hint, config.lam))
        else:
            kl, hint = zero, zero
            term = ce
        per_exit.append((ce, kl, hint))
        total = term if total is None else T.add(total, term)
    return LossBreakdown(per_exit, total)
