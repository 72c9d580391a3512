"""Nearest-neighbor distillation and the two baseline distillation losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, EmptyFilterError, ParameterError, ProtocolError
from .snn import DEFAULT_TAU, SupportSet, snn_classify

DEFAULT_LAMBDA_NND = 0.2
DEFAULT_KD_TEMPERATURE = 2.0


@dataclass(frozen=True)
class DistillBatch:
    student_proj: ad.Tensor
    teacher_proj: np.ndarray
    student_support: SupportSet
    teacher_support: SupportSet
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        s, t = self.student_support, self.teacher_support
        if len(s) == 0 or len(t) == 0:
            raise EmptyFilterError("distillation needs previous-class support samples")
        if len(s) != len(t):
            raise ProtocolError(f"student support has {len(s)} rows, teacher support {len(t)}")
        aligned = np.array_equal(s.class_tags, t.class_tags) and np.array_equal(
            s.task_tags, t.task_tags
        )
        if s.sample_ids is not None and t.sample_ids is not None:
            aligned = aligned and np.array_equal(s.sample_ids, t.sample_ids)
        if not aligned or not np.array_equal(s.targets, t.targets):
            raise ProtocolError("student and teacher supports must index the same samples in order")


def nnd_loss(b):
    """Cross-entropy between student and (detached) teacher neighbor assignments.

    Both sides use the same temperature; the teacher output is not sharpened.
    """
    student = snn_classify(b.student_proj, b.student_support, b.temperature)
    with ad.no_grad():
        teacher = snn_classify(
            ad.as_tensor(b.teacher_proj).detach(), b.teacher_support.detach(), b.temperature
        )
    return ad.cross_entropy(student.distribution, teacher.rows)


def loss_nncsl(csl, nnd, lambda_nnd=DEFAULT_LAMBDA_NND):
    if lambda_nnd < 0:
        raise ParameterError(f"lambda_nnd must be non-negative, got {lambda_nnd}")
    return ad.as_tensor(csl) + lambda_nnd * ad.as_tensor(nnd)


def kd_loss(student_logits, teacher_logits, seen_prev, temp=DEFAULT_KD_TEMPERATURE):
    """Softened class-distribution distillation restricted to previous classes."""
    seen_prev = np.asarray(seen_prev, dtype=bool)
    if not seen_prev.any():
        return ad.Tensor(0.0)
    teacher = ad.as_tensor(teacher_logits).data
    with ad.no_grad():
        target = ad.softmax_t(teacher, temp, seen_prev).data
    pred = ad.softmax_t(student_logits, temp, seen_prev)
    return ad.cross_entropy(pred, target)


def feature_distill_loss(student_proj, teacher_proj):
    """Mean ``1 - cos`` between matching student and detached teacher rows."""
    student_proj = ad.as_tensor(student_proj)
    teacher = ad.as_tensor(teacher_proj).data
    if student_proj.shape != teacher.shape:
        raise DimensionError(f"shape mismatch: {student_proj.shape} vs {teacher.shape}")
    with ad.no_grad():
        t_unit = ad.l2_normalize(teacher).data
    cos = ad.tsum(ad.l2_normalize(student_proj) * t_unit, axis=1)
    return 1.0 - ad.mean(cos)
