"""Task-wise training loop, replay buffer, schedule and baseline learners."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .data import AugmentConfig, augment_views
from .distill import DistillBatch, feature_distill_loss, kd_loss, loss_nncsl, nnd_loss
from .errors import DivergenceError, EmptyFilterError, ParameterError, ProtocolError
from .metrics import ResultMatrix
from .model import Architecture, ModelState, mask_logits, snapshot_teacher
from .snn import (
    SupportSet,
    directed_snn_loss,
    filter_support,
    loss_csl,
    loss_lin,
    loss_mem,
    loss_snn,
    smooth_labels,
)

log = logging.getLogger(__name__)

METHODS = ("finetune", "er", "paws", "csl", "nncsl", "csl+kd", "csl+fd")
SEMI_SUPERVISED = ("paws", "csl", "nncsl", "csl+kd", "csl+fd")
DISTILLING = ("nncsl", "csl+kd", "csl+fd")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "nncsl"
    lambda_lin: float = 0.005
    lambda_nnd: float = 0.2
    lambda_mem: float = 1.0
    label_smoothing: float = 0.1
    eps: float = 0.025
    tau: float = 0.1
    kd_temperature: float = 2.0
    epochs_per_task: int = 10
    warmup_epochs: float | None = None
    base_lr: float = 0.02
    peak_lr: float = 0.1
    final_lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 1e-5
    labeled_batch: int = 8
    buffer_batch: int = 8
    unlabeled_batch: int = 32
    buffer_size: int = 50
    unlabeled_buffer_size: int = 0
    teacher_feature_bank: bool = False
    decouple_head: bool = True
    hidden: tuple = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 16
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0 < self.eps < self.tau:
            raise ParameterError(f"need 0 < eps < tau, got eps={self.eps}, tau={self.tau}")
        for name in ("lambda_lin", "lambda_nnd", "lambda_mem", "weight_decay", "momentum",
                     "base_lr", "peak_lr", "final_lr"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be finite and non-negative, got {value}")
        if self.epochs_per_task < 1:
            raise ParameterError("epochs_per_task must be at least 1")
        for name in ("labeled_batch", "unlabeled_batch"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1")
        if self.buffer_size < 0 or self.buffer_batch < 0 or self.unlabeled_buffer_size < 0:
            raise ParameterError("buffer sizes must be non-negative")
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def warmup(self):
        """Warm-up length in epochs: 10 for long budgets, else 20% of the budget."""
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        if self.epochs_per_task >= 50:
            return 10
        return 0.2 * self.epochs_per_task

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ParameterError(f"unknown training options {sorted(unknown)}")
        return cls(**values)

    def with_(self, **changes):
        return replace(self, **changes)


def lr_schedule(step, total_steps, warmup_steps, base_lr, peak_lr, final_lr):
    """Linear warm-up ``base -> peak`` then cosine decay ``peak -> final``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr + (peak_lr - base_lr) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


class ReplayBuffer:
    """Reservoir sample over the stream of inserted items; deterministic given the seed."""

    def __init__(self, capacity, seed=0, dim=None):
        if capacity < 0:
            raise ParameterError("buffer capacity must be non-negative")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.seen = 0
        self.x = []
        self.labels = []
        self.tasks = []
        self.ids = []

    def __len__(self):
        return len(self.ids)

    def add(self, x, label, task, sample_id):
        self.seen += 1
        if self.capacity == 0:
            return
        if len(self.ids) < self.capacity:
            slot = len(self.ids)
            self.x.append(None)
            self.labels.append(None)
            self.tasks.append(None)
            self.ids.append(None)
        else:
            slot = int(self.rng.integers(0, self.seen))
            if slot >= self.capacity:
                return
        self.x[slot] = np.array(x, dtype=np.float64)
        self.labels[slot] = int(label)
        self.tasks[slot] = int(task)
        self.ids[slot] = int(sample_id)

    def sample(self, n, rng):
        n = min(n, len(self))
        if n == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(rng.choice(len(self), size=n, replace=False))

    def arrays(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) == 0:
            return np.empty((0, 0)), np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64)
        return (
            np.stack([self.x[i] for i in rows]),
            np.array([self.labels[i] for i in rows]),
            np.array([self.tasks[i] for i in rows]),
            np.array([self.ids[i] for i in rows]),
        )


def update_buffer(buf, features, labels, task, sample_ids):
    """Reservoir insertion of one task's labeled samples (in the given order)."""
    for x, y, sid in zip(features, labels, sample_ids):
        buf.add(x, y, task, sid)
    return buf


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``grad_scales`` optionally multiplies each parameter's gradient before the
    update (one float per parameter).
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-5, grad_scales=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_scales = [1.0] * len(params) if grad_scales is None else list(grad_scales)
        if len(self.grad_scales) != len(params):
            raise ParameterError("one gradient scale per parameter is required")
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        for p, v, scale in zip(self.params, self.velocity, self.grad_scales):
            if p.grad is None:
                continue
            g = scale * p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def head_grad_scales(model, cfg):
    """Per-parameter gradient scales for the optimiser.

    The classifier head only ever receives gradient through ``lambda_lin *
    L_LIN``. With ``decouple_head`` its gradient is divided by that weight so
    the head trains at the same pace whatever ``lambda_lin`` is, while the
    backbone still sees the weighted term. A layer-wise trust-ratio optimiser
    has this property built in; plain SGD needs it spelled out.
    """
    weight = 1.0 if cfg.method in ("finetune", "er") else cfg.lambda_lin
    scale = 1.0 / weight if cfg.decouple_head and weight > 0 else 1.0
    return [scale if name.startswith("classifier.") else 1.0 for name in model.params]


def compose_batch(stream, t, buf, cfg, rng, unlabeled_rows=None, unlabeled_buf=None):
    """Draw K current labeled, a buffer replay and N unlabeled current-task samples."""
    task = stream[t]
    ds = stream.dataset
    k = min(cfg.labeled_batch, len(task.labeled))
    current = np.sort(rng.choice(task.labeled, size=k, replace=False))
    xs = [ds.features[current]]
    ys = [ds.labels[current]]
    tags = [np.full(k, t)]
    ids = [current]
    use_buffer = cfg.method != "finetune" and buf is not None
    if use_buffer and cfg.buffer_batch and len(buf):
        bx, by, bt, bid = buf.arrays(buf.sample(cfg.buffer_batch, rng))
        xs.append(bx)
        ys.append(by)
        tags.append(bt)
        ids.append(bid)
    if unlabeled_rows is None:
        unlabeled_rows = np.empty(0, dtype=np.int64)
    unlabeled_x = ds.features[unlabeled_rows]
    if unlabeled_buf is not None and len(unlabeled_buf) and cfg.unlabeled_batch:
        ux, _, _, _ = unlabeled_buf.arrays(unlabeled_buf.sample(cfg.unlabeled_batch // 2, rng))
        replayed = ux
    else:
        replayed = np.empty((0, ds.dim))
    batch = augment_views(
        unlabeled_x,
        np.concatenate(xs),
        np.concatenate(ys),
        np.concatenate(tags),
        k,
        cfg.augment,
        rng,
    )
    return batch, np.concatenate(ids), replayed


def _support_targets(labels, num_classes, classes, smoothing):
    return smooth_labels(labels, num_classes, np.unique(classes), smoothing)


def batch_losses(model, teacher, batch, sample_ids, t, cfg, replayed=None, feature_bank=None):
    """Forward one batch and return ``(total_loss, parts)`` for ``cfg.method``."""
    C = model.arch.num_classes
    J, K, N = batch.n_labeled, batch.n_current, batch.n_unlabeled
    seen = model.seen_classes
    n_views = 2 + len(batch.locals) if N else 0
    if replayed is None:
        replayed = np.empty((0, batch.labeled_x.shape[1] if J else model.arch.input_dim))
    R = len(replayed)
    blocks = [batch.labeled_x]
    if N:
        blocks += [batch.view_a, batch.view_b, *batch.locals]
    if R:
        blocks.append(replayed)
    x = np.concatenate(blocks)
    _, proj, logits = model.forward(x)
    if not (np.isfinite(proj.data).all() and np.isfinite(logits.data).all()):
        raise DivergenceError("non-finite activations")
    parts = {}

    lin_rows = slice(0, J) if cfg.method != "finetune" else slice(0, K)
    lin_labels = batch.labeled_y[lin_rows]
    lin_targets = smooth_labels(lin_labels, C, np.flatnonzero(seen), cfg.label_smoothing)
    l_lin = loss_lin(logits[lin_rows], lin_targets, seen)
    parts["lin"] = l_lin.item()

    if cfg.method in ("finetune", "er") or N == 0:
        weight = 1.0 if cfg.method in ("finetune", "er") else cfg.lambda_lin
        total = weight * l_lin
        parts["total"] = total.item()
        return total, parts

    labeled_proj = proj[slice(0, J)]
    targets = _support_targets(batch.labeled_y, C, batch.labeled_y, cfg.label_smoothing)
    support = SupportSet(labeled_proj, targets, batch.labeled_tasks, batch.labeled_y, sample_ids)
    if cfg.method != "paws":
        current = filter_support(support, t, "current_only")
        targets = _support_targets(current.class_tags, C, current.class_tags, cfg.label_smoothing)
        current = SupportSet(current.features, targets, current.task_tags, current.class_tags,
                             current.sample_ids)
    else:
        current = support

    view = lambda i: proj[slice(J + i * N, J + (i + 1) * N)]  # noqa: E731
    locals_ = [view(2 + i) for i in range(len(batch.locals))]
    l_snn, sharp = loss_snn(view(0), view(1), current, cfg.eps, cfg.tau, locals_, return_targets=True)
    if R:
        replay_proj = proj[slice(J + n_views * N, J + n_views * N + R)]
        replay_term = directed_snn_loss(replay_proj, replay_proj, support, cfg.eps, cfg.tau)
        l_snn = 0.5 * (l_snn + replay_term)
    l_mem = loss_mem(sharp)
    total = loss_csl(l_snn, l_mem, l_lin, cfg.lambda_mem, cfg.lambda_lin)
    parts["snn"] = l_snn.item()
    parts["mem"] = l_mem.item()

    if cfg.method in DISTILLING and teacher is not None and t > 0:
        unl = ad.concat_rows([view(0), view(1)])
        teacher_x = np.concatenate([batch.view_a, batch.view_b])
        if cfg.method == "nncsl":
            try:
                previous = filter_support(support, t, "previous_only")
            except EmptyFilterError:
                previous = None
            if previous is not None:
                prev_rows = np.flatnonzero(support.task_tags < t)
                if feature_bank is not None:
                    prev_teacher = np.stack([feature_bank[i] for i in previous.sample_ids])
                    t_unl = teacher(teacher_x)[1].data
                else:
                    _, t_proj, _ = teacher(np.concatenate([batch.labeled_x[prev_rows], teacher_x]))
                    prev_teacher = t_proj.data[: len(prev_rows)]
                    t_unl = t_proj.data[len(prev_rows):]
                prev_targets = _support_targets(
                    previous.class_tags, C, previous.class_tags, cfg.label_smoothing
                )
                student_support = SupportSet(previous.features, prev_targets, previous.task_tags,
                                             previous.class_tags, previous.sample_ids)
                teacher_support = SupportSet(prev_teacher, prev_targets, previous.task_tags,
                                             previous.class_tags, previous.sample_ids)
                l_d = nnd_loss(DistillBatch(unl, t_unl, student_support, teacher_support, cfg.tau))
            else:
                l_d = ad.Tensor(0.0)
        elif cfg.method == "csl+kd":
            _, _, t_logits = teacher(teacher_x)
            s_logits = logits[slice(J, J + 2 * N)]
            l_d = kd_loss(s_logits, t_logits, teacher.seen_classes, cfg.kd_temperature)
        else:
            _, t_proj, _ = teacher(teacher_x)
            l_d = feature_distill_loss(unl, t_proj)
        parts["distill"] = l_d.item()
        total = loss_nncsl(total, l_d, cfg.lambda_nnd)
    parts["total"] = total.item()
    return total, parts


def accuracy(model, x, y, mask):
    if len(y) == 0:
        return float("nan")
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        _, _, logits = model.forward(x)
    if not np.all(np.isfinite(logits.data)):
        raise DivergenceError("non-finite logits during evaluation")
    return float(np.mean(np.argmax(mask_logits(logits.data, mask), axis=1) == y))


def eval_mask(model, task):
    mask = model.seen_classes.copy()
    mask[list(task.classes)] = True
    return mask


class StreamState:
    """Mutable state carried across task boundaries."""

    def __init__(self, stream, cfg):
        self.cfg = cfg
        arch = Architecture(
            stream.dataset.dim, stream.class_count, cfg.hidden, cfg.proj_hidden, cfg.proj_dim
        )
        self.model = ModelState(arch, seed=cfg.seed)
        self.buffer = ReplayBuffer(cfg.buffer_size, seed=cfg.seed + 1)
        self.unlabeled_buffer = (
            ReplayBuffer(cfg.unlabeled_buffer_size, seed=cfg.seed + 2)
            if cfg.unlabeled_buffer_size
            else None
        )
        self.teacher = None
        self.feature_bank = None
        self.next_task = 0
        self.rng = np.random.default_rng(cfg.seed + 3)


def _epoch_batches(task, cfg, rng):
    if len(task.unlabeled) == 0:
        steps = max(1, math.ceil(len(task.labeled) / cfg.labeled_batch))
        return [None] * steps
    order = rng.permutation(task.unlabeled)
    n = cfg.unlabeled_batch
    return [np.sort(order[i : i + n]) for i in range(0, len(order), n)]


def train_task(state, stream, t, on_epoch=None):
    """Train task ``t``; returns a list of per-step log records."""
    cfg = state.cfg
    model = state.model
    if t != state.next_task:
        raise ProtocolError(f"tasks must be trained in order: expected {state.next_task}, got {t}")
    if cfg.method in DISTILLING and t > 0 and state.teacher is None:
        raise ProtocolError(f"{cfg.method} needs a teacher snapshot at task {t}")
    task = stream[t]
    ds = stream.dataset
    model.mark_seen(task.classes)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay, head_grad_scales(model, cfg))
    rng = state.rng
    semi = cfg.method in SEMI_SUPERVISED
    steps_per_epoch = len(_epoch_batches(task, cfg, np.random.default_rng(0))) if semi else max(
        1, math.ceil(len(task.labeled) / cfg.labeled_batch)
    )
    total_steps = steps_per_epoch * cfg.epochs_per_task
    warmup_steps = int(round(cfg.warmup * steps_per_epoch))
    logs = []
    step = 0
    for epoch in range(cfg.epochs_per_task):
        batches = _epoch_batches(task, cfg, rng) if semi else [None] * steps_per_epoch
        for rows in batches:
            batch, ids, replayed = compose_batch(
                stream, t, state.buffer, cfg, rng, rows,
                state.unlabeled_buffer if semi else None,
            )
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr, cfg.peak_lr, cfg.final_lr)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, parts = batch_losses(
                        model, state.teacher, batch, ids, t, cfg, replayed if len(replayed) else None,
                        state.feature_bank,
                    )
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at task {t} step {step}", task=t, step=step) from exc
            if not np.isfinite(parts["total"]):
                raise DivergenceError(
                    f"non-finite loss at task {t} step {step}: {parts}", task=t, step=step, parts=parts
                )
            opt.zero_grad()
            with np.errstate(over="ignore", invalid="ignore"):  # caught by the checks above next step
                ad.backward(loss)
                opt.step(lr)
            record = {"task": t, "epoch": epoch, "step": step, "lr": lr, **parts}
            log.debug("step %(step)d lr %(lr).5f total %(total).6f", record)
            logs.append(record)
            step += 1
        # the last update of an epoch is not followed by a forward pass that would catch it
        bad = [name for name, p in model.params.items() if not np.all(np.isfinite(p.data))]
        if bad:
            raise DivergenceError(
                f"non-finite parameters {bad} at task {t} step {step}", task=t, step=step
            )
        if on_epoch is not None:
            try:
                on_epoch(t, epoch, model)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at task {t} epoch {epoch}", task=t, step=step) from exc

    if cfg.method != "finetune":
        update_buffer(state.buffer, ds.features[task.labeled], ds.labels[task.labeled], t, task.labeled)
    if state.unlabeled_buffer is not None:
        update_buffer(
            state.unlabeled_buffer, ds.features[task.unlabeled], ds.labels[task.unlabeled], t,
            task.unlabeled,
        )
    state.teacher = snapshot_teacher(model, t)
    if cfg.teacher_feature_bank and len(state.buffer):
        bx, _, _, bid = state.buffer.arrays(np.arange(len(state.buffer)))
        proj = state.teacher(bx)[1].data
        state.feature_bank = dict(zip(bid.tolist(), proj))
    state.next_task = t + 1
    return logs


@dataclass
class RunResult:
    """``labeled_train_acc[t]`` is accuracy on task ``t``'s labeled samples right after task ``t``."""

    matrix: ResultMatrix
    logs: list
    learning_curve: list
    labeled_train_acc: list
    state: StreamState


def run_stream(cfg, stream, learning_curve=True, on_task_end=None):
    """Train every task in order and fill the accuracy matrix after each one.

    ``on_task_end(t, state)`` runs after task ``t`` has been evaluated.
    """
    state = StreamState(stream, cfg)
    T = len(stream)
    rm = ResultMatrix(T)
    ds = stream.dataset
    for j, task in enumerate(stream.tasks):
        rm.set_random(j, accuracy(state.model, ds.features[task.test], ds.labels[task.test],
                                  eval_mask(state.model, task)))
    curve = []

    def on_epoch(t, epoch, model):
        task = stream[t]
        rows = task.unlabeled if len(task.unlabeled) else task.labeled
        curve.append({"task": t, "epoch": epoch,
                      "accuracy": accuracy(model, ds.features[rows], ds.labels[rows], model.seen_classes)})

    logs = []
    labeled_acc = []
    for t in range(T):
        try:
            logs.extend(train_task(state, stream, t, on_epoch if learning_curve else None))
        except Exception:
            log.error("training failed at task %d", t)
            raise
        current = stream[t].labeled
        try:
            labeled_acc.append(accuracy(state.model, ds.features[current], ds.labels[current],
                                        eval_mask(state.model, stream[t])))
            for j, task in enumerate(stream.tasks):
                rm.set(t, j, accuracy(state.model, ds.features[task.test], ds.labels[task.test],
                                      eval_mask(state.model, task)))
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} after task {t}", task=t) from exc
        if on_task_end is not None:
            on_task_end(t, state)
    return RunResult(rm, logs, curve, labeled_acc, state)
