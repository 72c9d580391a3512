"""Datasets, class-incremental task streams and multi-view augmentation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import IngestionError, ParameterError, ProtocolError, SplitError

VARIANCE_FLOOR = 1e-12


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) == 0:
            raise ParameterError("dataset needs a non-empty 2-D feature matrix")
        if labels.shape != (len(features),):
            raise ParameterError(f"{len(labels)} labels for {len(features)} samples")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ParameterError(f"labels must lie in [0, {self.class_count})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]


def make_synthetic(kind, classes, per_class, dim, seed=0, noise=0.1, spread=1.0, modes=1):
    """Balanced synthetic classification data.

    ``gaussian_blobs`` draws ``modes`` means per class from ``N(0, spread^2 I)``
    and adds isotropic noise; samples are dealt round-robin over a class's
    modes, so ``modes > 1`` gives classes that are not linearly separable. ``concentric_rings`` puts class ``c`` on a circle of
    radius ``spread * (c + 1)`` in the first two coordinates; the remaining
    coordinates carry only noise.
    """
    if classes < 2 or per_class < 4 or dim < 2:
        raise ParameterError("need classes >= 2, per_class >= 4 and dim >= 2")
    if noise < 0:
        raise ParameterError("noise must be non-negative")
    if modes < 1:
        raise ParameterError("modes must be at least 1")
    rng = as_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    if kind == "gaussian_blobs":
        means = rng.normal(scale=spread, size=(classes * modes, dim))
        mode = labels * modes + np.tile(np.arange(per_class) % modes, classes)
        features = means[mode] + noise * rng.normal(size=(len(labels), dim))
    elif kind == "concentric_rings":
        angles = rng.uniform(0.0, 2 * np.pi, size=len(labels))
        radii = spread * (labels + 1.0)
        features = noise * rng.normal(size=(len(labels), dim))
        features[:, 0] += radii * np.cos(angles)
        features[:, 1] += radii * np.sin(angles)
    else:
        raise ParameterError(f"unknown synthetic kind {kind!r}")
    return Dataset(features, labels, classes)


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple
    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


@dataclass(frozen=True)
class TaskStream:
    dataset: Dataset
    tasks: tuple
    label_ratio: float

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, t):
        return self.tasks[t]

    @property
    def class_count(self):
        return self.dataset.class_count

    def task_of_class(self):
        owner = np.full(self.class_count, -1, dtype=np.int64)
        for task in self.tasks:
            owner[list(task.classes)] = task.index
        return owner


def split_stream(d, num_tasks, label_ratio, seed=0, test_fraction=0.0):
    """Partition classes into ``num_tasks`` equal disjoint tasks.

    Within each class a ``test_fraction`` is held out first; of the remaining
    training samples ``round(label_ratio * n)`` are labeled, chosen uniformly
    at random, and the rest are unlabeled.
    """
    if num_tasks < 1 or d.class_count % num_tasks:
        raise ProtocolError(
            f"{d.class_count} classes cannot be divided into {num_tasks} equal tasks"
        )
    if not 0 < label_ratio <= 1:
        raise ParameterError(f"label_ratio must be in (0, 1], got {label_ratio}")
    if not 0 <= test_fraction < 1:
        raise ParameterError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = as_rng(seed)
    per_task = d.class_count // num_tasks
    tasks = []
    for t in range(num_tasks):
        classes = tuple(range(t * per_task, (t + 1) * per_task))
        labeled, unlabeled, test = [], [], []
        for c in classes:
            members = rng.permutation(np.flatnonzero(d.labels == c))
            n_test = int(np.floor(test_fraction * len(members) + 0.5))
            train = members[n_test:]
            n_labeled = int(np.floor(label_ratio * len(train) + 0.5))
            if n_labeled < 1:
                raise SplitError(
                    f"label_ratio {label_ratio} leaves class {c} with no labeled samples "
                    f"({len(train)} training samples)"
                )
            test.append(members[:n_test])
            labeled.append(train[:n_labeled])
            unlabeled.append(train[n_labeled:])
        tasks.append(
            Task(
                index=t,
                classes=classes,
                labeled=np.sort(np.concatenate(labeled)),
                unlabeled=np.sort(np.concatenate(unlabeled)),
                test=np.sort(np.concatenate(test)),
            )
        )
    return TaskStream(d, tuple(tasks), label_ratio)


@dataclass(frozen=True)
class AugmentConfig:
    jitter: float = 0.1
    dropout: float = 0.1
    n_local: int = 2
    local_jitter: float = 0.1
    local_dropout: float = 0.3
    augment_labeled: bool = True

    def __post_init__(self):
        for name in ("dropout", "local_dropout"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ParameterError(f"{name} must be in [0, 1), got {p}")
        if self.jitter < 0 or self.local_jitter < 0 or self.n_local < 0:
            raise ParameterError("jitter and n_local must be non-negative")


@dataclass(frozen=True)
class ViewBatch:
    """One training batch.

    ``labeled_x`` holds the ``n_current`` current-task samples first and the
    replayed buffer samples after them.
    """

    view_a: np.ndarray
    view_b: np.ndarray
    locals: tuple
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    labeled_tasks: np.ndarray
    n_current: int
    unlabeled_x: np.ndarray

    @property
    def n_labeled(self):
        return len(self.labeled_y)

    @property
    def n_unlabeled(self):
        return len(self.view_a)


def _perturb(x, jitter, dropout, rng):
    out = x + jitter * rng.normal(size=x.shape) if jitter else x.copy()
    if dropout:
        out = out * (rng.random(size=x.shape) >= dropout)
    return out


def augment_views(unlabeled_x, labeled_x, labeled_y, labeled_tasks, n_current, cfg, seed):
    """Two global views (and ``cfg.n_local`` local views) per unlabeled row."""
    rng = as_rng(seed)
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    labeled_x = np.asarray(labeled_x, dtype=np.float64)
    view_a = _perturb(unlabeled_x, cfg.jitter, cfg.dropout, rng)
    view_b = _perturb(unlabeled_x, cfg.jitter, cfg.dropout, rng)
    local_views = tuple(
        _perturb(unlabeled_x, cfg.local_jitter, cfg.local_dropout, rng)
        for _ in range(cfg.n_local)
    )
    if cfg.augment_labeled and len(labeled_x):
        labeled_x = _perturb(labeled_x, cfg.jitter, cfg.dropout, rng)
    return ViewBatch(
        view_a=view_a,
        view_b=view_b,
        locals=local_views,
        labeled_x=labeled_x,
        labeled_y=np.asarray(labeled_y, dtype=np.int64),
        labeled_tasks=np.asarray(labeled_tasks, dtype=np.int64),
        n_current=int(n_current),
        unlabeled_x=unlabeled_x,
    )


def standardize(features):
    mean = features.mean(axis=0)
    std = np.sqrt(np.maximum(features.var(axis=0), VARIANCE_FLOOR))
    out = (features - mean) / std
    out[:, features.var(axis=0) <= VARIANCE_FLOOR] = 0.0
    return out


def load_csv(path, has_header=True, label_column=-1, standardize_features=True):
    """Read a comma-separated file into a :class:`Dataset`.

    ``label_column`` is a header name or a zero-based (possibly negative)
    index. Labels are coded to ``0..C-1`` in sorted order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if has_header:
        if not rows:
            raise IngestionError("empty file", row=1)
        header, rows = rows[0], rows[1:]
    else:
        header = None
    if not rows:
        raise IngestionError("no data rows")
    width = len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise IngestionError(f"unknown label column {label_column!r}")
        col = header.index(label_column)
    else:
        col = label_column + width if label_column < 0 else label_column
        if not 0 <= col < width:
            raise IngestionError(f"label column {label_column} out of range for {width} columns")

    first_line = 2 if has_header else 1
    features, raw_labels = [], []
    for offset, row in enumerate(rows):
        line = first_line + offset
        if len(row) != width:
            raise IngestionError(f"expected {width} fields, found {len(row)}", row=line)
        values = []
        for j, cell in enumerate(row):
            if j == col:
                continue
            try:
                values.append(float(cell))
            except ValueError:
                raise IngestionError(f"non-numeric feature {cell!r} in column {j}", row=line) from None
        features.append(values)
        raw_labels.append(row[col].strip())

    try:
        keys = sorted(set(raw_labels), key=lambda s: (0, int(s), s))
    except ValueError:
        keys = sorted(set(raw_labels))
    codes = {k: i for i, k in enumerate(keys)}
    x = np.array(features, dtype=np.float64)
    if x.shape[1] == 0:
        raise IngestionError("no feature columns")
    if standardize_features:
        x = standardize(x)
    return Dataset(x, np.array([codes[s] for s in raw_labels]), len(keys))


def save_csv(d, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d.dim)] + ["label"])
        for x, y in zip(d.features, d.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
