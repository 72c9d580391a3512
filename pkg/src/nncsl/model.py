"""Backbone / projector / classifier network and teacher snapshots."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ProtocolError

CHECKPOINT_FORMAT = "nncsl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden: tuple = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 16

    @property
    def feature_dim(self):
        return self.hidden[-1]

    def layer_shapes(self):
        shapes = {}
        widths = (self.input_dim,) + tuple(self.hidden)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"backbone.{i}.weight"] = (fan_in, fan_out)
            shapes[f"backbone.{i}.bias"] = (fan_out,)
        shapes["projector.0.weight"] = (self.feature_dim, self.proj_hidden)
        shapes["projector.0.bias"] = (self.proj_hidden,)
        shapes["projector.1.weight"] = (self.proj_hidden, self.proj_dim)
        shapes["projector.1.bias"] = (self.proj_dim,)
        shapes["classifier.weight"] = (self.feature_dim, self.num_classes)
        shapes["classifier.bias"] = (self.num_classes,)
        return shapes


def init_params(arch, seed):
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith("bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.parameter(data, name=name)
    return params


class ModelState:
    def __init__(self, arch, seed=0, params=None, seen_classes=None):
        self.arch = arch
        self.params = params if params is not None else init_params(arch, seed)
        if seen_classes is None:
            seen_classes = np.zeros(arch.num_classes, dtype=bool)
        self.seen_classes = np.array(seen_classes, dtype=bool)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def mark_seen(self, classes):
        self.seen_classes[list(classes)] = True

    def backbone(self, x):
        h = ad.as_tensor(x)
        for i in range(len(self.arch.hidden)):
            h = ad.relu(ad.linear(h, self.params[f"backbone.{i}.weight"], self.params[f"backbone.{i}.bias"]))
        return h

    def project(self, z):
        p = self.params
        hidden = ad.relu(ad.linear(z, p["projector.0.weight"], p["projector.0.bias"]))
        return ad.linear(hidden, p["projector.1.weight"], p["projector.1.bias"])

    def classify(self, z):
        return ad.linear(z, self.params["classifier.weight"], self.params["classifier.bias"])

    def forward(self, x):
        """Returns ``(features, projections, logits)``.

        Projections are left unnormalized; cosine similarity normalizes them.
        """
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise DimensionError(
                f"input shape {x.shape} does not match backbone width {self.arch.input_dim}"
            )
        z = self.backbone(x)
        return z, self.project(z), self.classify(z)

    __call__ = forward

    def predict(self, x, mask=None):
        with ad.no_grad():
            _, _, logits = self.forward(x)
        mask = self.seen_classes if mask is None else mask
        return np.argmax(mask_logits(logits.data, mask), axis=1)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        for name, value in state.items():
            if self.params[name].shape != np.shape(value):
                raise DimensionError(f"{name}: expected {self.params[name].shape}, got {np.shape(value)}")
            self.params[name].data = np.array(value, dtype=np.float64)


def mask_logits(logits, seen):
    """Replace unseen-class columns with ``-inf`` (numpy arrays only)."""
    seen = np.asarray(seen, dtype=bool)
    if not seen.any():
        raise ProtocolError("no seen classes to predict from")
    if logits.shape[-1] != seen.shape[0]:
        raise DimensionError(f"{logits.shape[-1]} logits for a {seen.shape[0]}-class mask")
    return np.where(seen, logits, -np.inf)


class TeacherSnapshot:
    """Frozen deep copy of a model taken at a task boundary."""

    def __init__(self, model, task_index):
        params = {}
        for name, p in model.params.items():
            data = p.data.copy()
            data.setflags(write=False)
            params[name] = ad.Tensor(data, name=name)
        self.model = ModelState(model.arch, params=params, seen_classes=model.seen_classes.copy())
        self.model.seen_classes.setflags(write=False)
        self.task_index = task_index

    def forward(self, x):
        with ad.no_grad():
            z, h, p = self.model.forward(x)
        return z.detach(), h.detach(), p.detach()

    __call__ = forward

    @property
    def seen_classes(self):
        return self.model.seen_classes


def snapshot_teacher(model, task_index):
    return TeacherSnapshot(model, task_index)


def save_checkpoint(model, path, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "input_dim": model.arch.input_dim,
            "num_classes": model.arch.num_classes,
            "hidden": list(model.arch.hidden),
            "proj_hidden": model.arch.proj_hidden,
            "proj_dim": model.arch.proj_dim,
        },
        "seen_classes": model.seen_classes.tolist(),
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in model.params.items()
        ],
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    a = payload["architecture"]
    arch = Architecture(a["input_dim"], a["num_classes"], tuple(a["hidden"]), a["proj_hidden"], a["proj_dim"])
    model = ModelState(arch, seed=0, seen_classes=payload["seen_classes"])
    model.load_state_dict(
        {e["name"]: np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for e in payload["params"]}
    )
    return model


def clone(model):
    return copy.deepcopy(model)
