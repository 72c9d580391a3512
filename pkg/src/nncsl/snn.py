"""Soft nearest-neighbor pseudo-labeling and the base continual learner losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateSupportError, DimensionError, EmptyFilterError, ParameterError

DEFAULT_EPS = 0.025
DEFAULT_TAU = 0.1
DEFAULT_LAMBDA_MEM = 1.0
DEFAULT_LAMBDA_LIN = 0.005
DEFAULT_SMOOTHING = 0.1


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def smooth_labels(labels, num_classes, classes, smoothing=DEFAULT_SMOOTHING):
    """One-hot rows with ``smoothing`` mass spread uniformly over ``classes``.

    Columns outside ``classes`` stay exactly zero so the rows remain valid
    targets for a masked softmax.
    """
    if not 0 <= smoothing < 1:
        raise ParameterError(f"smoothing must be in [0, 1), got {smoothing}")
    classes = np.asarray(classes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isin(labels, classes).all():
        raise ParameterError("label outside the smoothing class set")
    out = (1.0 - smoothing) * one_hot(labels, num_classes)
    out[:, classes] += smoothing / len(classes)
    return out


@dataclass(frozen=True)
class SupportSet:
    features: ad.Tensor
    targets: np.ndarray
    task_tags: np.ndarray
    class_tags: np.ndarray
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", ad.as_tensor(self.features))
        targets = np.asarray(self.targets, dtype=np.float64)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "task_tags", np.asarray(self.task_tags, dtype=np.int64))
        object.__setattr__(self, "class_tags", np.asarray(self.class_tags, dtype=np.int64))
        k = self.features.shape[0]
        if targets.ndim != 2 or len(targets) != k:
            raise DimensionError(f"{len(targets)} target rows for {k} support features")
        if len(self.task_tags) != k or len(self.class_tags) != k:
            raise DimensionError("tag vectors must have one entry per support row")
        if k and not np.allclose(targets.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("support target rows must sum to 1")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return SupportSet(
            ad.take_rows(self.features, rows),
            self.targets[rows],
            self.task_tags[rows],
            self.class_tags[rows],
            None if self.sample_ids is None else np.asarray(self.sample_ids)[rows],
        )

    def detach(self):
        return SupportSet(
            self.features.detach(), self.targets, self.task_tags, self.class_tags, self.sample_ids
        )


@dataclass(frozen=True)
class PseudoLabel:
    distribution: ad.Tensor
    temperature: float

    @property
    def rows(self):
        return self.distribution.data


def snn_classify(h_u, support, temp):
    """Similarity-weighted vote of support targets for every query row."""
    if not temp > 0:
        raise ParameterError(f"temperature must be positive, got {temp}")
    if len(support) == 0:
        raise DegenerateSupportError("soft nearest-neighbor classifier needs a non-empty support")
    return PseudoLabel(ad.snn(h_u, support.features, support.targets, temp), temp)


def directed_snn_loss(pred_view, target_view, support, eps=DEFAULT_EPS, tau=DEFAULT_TAU):
    """Cross-entropy of the gentle (``tau``) prediction against the sharp (``eps``) target.

    The target branch is computed on detached inputs.
    """
    target = snn_classify(ad.as_tensor(target_view).detach(), support.detach(), eps)
    pred = snn_classify(pred_view, support, tau)
    return ad.cross_entropy(pred.distribution, target.rows)


def loss_snn(view_a, view_b, support, eps=DEFAULT_EPS, tau=DEFAULT_TAU, local_views=(),
             return_targets=False):
    """Multi-view consistency loss.

    The two global views target each other; every local view targets both
    global views. The result is the mean over all directed pairs. With
    ``return_targets`` the live (non-detached) sharp assignments of both
    global views are also returned, for the mean-entropy regularizer.
    """
    if not 0 < eps < tau:
        raise ParameterError(f"need 0 < eps < tau, got eps={eps}, tau={tau}")
    sharp_a = snn_classify(view_a, support, eps)
    sharp_b = snn_classify(view_b, support, eps)
    ta, tb = sharp_a.rows.copy(), sharp_b.rows.copy()
    terms = [
        ad.cross_entropy(snn_classify(view_a, support, tau).distribution, tb),
        ad.cross_entropy(snn_classify(view_b, support, tau).distribution, ta),
    ]
    for local in local_views:
        pred = snn_classify(local, support, tau).distribution
        terms.append(ad.cross_entropy(pred, ta))
        terms.append(ad.cross_entropy(pred, tb))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    loss = total * (1.0 / len(terms))
    if return_targets:
        both = ad.concat_rows([sharp_a.distribution, sharp_b.distribution])
        return loss, PseudoLabel(both, eps)
    return loss


def loss_mem(pseudo):
    """Negative entropy of the batch-mean assignment; minimal when the mean is uniform."""
    dist = pseudo.distribution if isinstance(pseudo, PseudoLabel) else ad.as_tensor(pseudo)
    if dist.shape[0] < 1:
        raise ParameterError("mean-entropy loss needs at least one row")
    return -ad.entropy(ad.mean(dist, axis=0))


def filter_support(support, current_task, mode="current_only"):
    if mode == "current_only":
        rows = np.flatnonzero(support.task_tags == current_task)
    elif mode == "previous_only":
        rows = np.flatnonzero(support.task_tags < current_task)
    else:
        raise ParameterError(f"unknown filter mode {mode!r}")
    if len(rows) == 0:
        raise EmptyFilterError(f"{mode} filter at task {current_task} left no support rows")
    if len(rows) == len(support):
        return support
    return support.subset(rows)


def loss_lin(logits, targets, seen=None):
    """Mean cross-entropy of the (masked) linear head over all labeled rows."""
    logits = ad.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape[0] < 1:
        raise ParameterError("linear loss needs at least one labeled row")
    probs = ad.softmax_t(logits, 1.0, seen)
    return ad.cross_entropy(probs, targets)


def loss_csl(l_snn, l_mem, l_lin, lambda_mem=DEFAULT_LAMBDA_MEM, lambda_lin=DEFAULT_LAMBDA_LIN):
    if lambda_mem < 0 or lambda_lin < 0:
        raise ParameterError("loss weights must be non-negative")
    return ad.as_tensor(l_snn) + lambda_mem * ad.as_tensor(l_mem) + lambda_lin * ad.as_tensor(l_lin)
