import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncsl import autodiff as ad
from nncsl import trainer
from nncsl.data import AugmentConfig, make_synthetic, split_stream
from nncsl.errors import DivergenceError, ParameterError, ProtocolError
from nncsl.model import Architecture, ModelState
from nncsl.snn import filter_support
from nncsl.trainer import (
    SGD,
    ReplayBuffer,
    StreamState,
    TrainConfig,
    batch_losses,
    compose_batch,
    head_grad_scales,
    lr_schedule,
    run_stream,
    train_task,
    update_buffer,
)

FAST = dict(epochs_per_task=2, hidden=(16, 16), proj_hidden=16, proj_dim=8, unlabeled_batch=16)


def small_stream(tasks=2, classes=4, per_class=24, seed=0, ratio=0.25, noise=0.1, dim=6):
    d = make_synthetic("gaussian_blobs", classes, per_class, dim, seed=seed, noise=noise, spread=2.0)
    return split_stream(d, tasks, ratio, seed=seed, test_fraction=0.25)


# replay buffer


def test_buffer_capacity_zero_stays_empty():
    buf = update_buffer(ReplayBuffer(0), np.ones((5, 2)), range(5), 0, range(5))
    assert len(buf) == 0
    assert buf.sample(3, np.random.default_rng(0)).size == 0


def test_buffer_without_eviction_holds_everything():
    buf = update_buffer(ReplayBuffer(10), np.arange(14.0).reshape(7, 2), range(7), 3, range(7))
    x, y, tags, ids = buf.arrays(np.arange(len(buf)))
    assert ids.tolist() == list(range(7)) and set(tags) == {3}
    np.testing.assert_array_equal(x, np.arange(14.0).reshape(7, 2))


def test_buffer_retention_is_uniform():
    # 200 buffers of capacity 50 over 10k insertions each: every item is kept
    # with probability 50/10000, checked per decile of insertion order
    n, M, runs = 10_000, 50, 200
    kept = np.zeros(n)
    for seed in range(runs):
        buf = ReplayBuffer(M, seed=seed)
        for i in range(n):
            buf.add((0.0,), 0, 0, i)
        kept[buf.ids] += 1
    p = M / n
    per_decile = kept.reshape(10, -1).sum(1)
    expected = runs * (n // 10) * p
    sigma = math.sqrt(runs * (n // 10) * p * (1 - p))
    assert np.all(np.abs(per_decile - expected) < 3 * sigma), per_decile


@settings(max_examples=25, deadline=None)
@given(capacity=st.integers(0, 12), sizes=st.lists(st.integers(0, 15), min_size=1, max_size=4))
def test_buffer_capacity_and_survival(capacity, sizes):
    buf = ReplayBuffer(capacity, seed=1)
    next_id = 0
    for t, n in enumerate(sizes):
        before = dict(zip(buf.ids, buf.tasks))
        update_buffer(buf, np.zeros((n, 1)), [0] * n, t, range(next_id, next_id + n))
        next_id += n
        assert len(buf) <= capacity
        # surviving entries keep their tags; new entries carry the new task
        for sid, tag in zip(buf.ids, buf.tasks):
            assert before.get(sid, t) == tag


def test_buffer_is_deterministic():
    a, b = ReplayBuffer(5, seed=4), ReplayBuffer(5, seed=4)
    for buf in (a, b):
        update_buffer(buf, np.zeros((40, 1)), [0] * 40, 0, range(40))
    assert a.ids == b.ids


# schedule


def test_lr_schedule_landmarks():
    base, peak, final = 0.08, 0.4, 0.032
    assert lr_schedule(0, 100, 20, base, peak, final) == base
    assert lr_schedule(20, 100, 20, base, peak, final) == pytest.approx(peak, abs=1e-15)
    assert lr_schedule(60, 100, 20, base, peak, final) == pytest.approx((peak + final) / 2, abs=1e-9)
    assert lr_schedule(100, 100, 20, base, peak, final) == pytest.approx(final, abs=1e-15)
    assert lr_schedule(0, 100, 0, base, peak, final) == peak


def test_warmup_rule():
    assert TrainConfig(epochs_per_task=10).warmup == 2
    assert TrainConfig(epochs_per_task=250).warmup == 10
    assert TrainConfig(epochs_per_task=10, warmup_epochs=3).warmup == 3


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(eps=0.1, tau=0.1)
    with pytest.raises(ParameterError):
        TrainConfig(lambda_nnd=-1)
    with pytest.raises(ParameterError):
        TrainConfig(method="lars")
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(augment={"jitter": 0.2})
    assert cfg.augment.jitter == 0.2
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# batch composition


def test_first_task_batch_has_no_history():
    stream = small_stream()
    cfg = TrainConfig(**FAST)
    rng = np.random.default_rng(0)
    batch, ids, _ = compose_batch(stream, 0, ReplayBuffer(10), cfg, rng, stream[0].unlabeled[:4])
    assert batch.n_labeled == batch.n_current
    assert set(batch.labeled_tasks) == {0}


def test_batch_arithmetic_and_tag_census():
    stream = small_stream(per_class=40)
    buf = ReplayBuffer(20, seed=0)
    t0 = stream[0]
    update_buffer(buf, stream.dataset.features[t0.labeled], stream.dataset.labels[t0.labeled], 0, t0.labeled)
    cfg = TrainConfig(labeled_batch=3, buffer_batch=3, unlabeled_batch=8, **{k: v for k, v in FAST.items() if k != "unlabeled_batch"})
    batch, ids, _ = compose_batch(stream, 1, buf, cfg, np.random.default_rng(1), stream[1].unlabeled[:8])
    assert batch.n_labeled == 6
    assert len(batch.view_a) + len(batch.view_b) == 16
    assert batch.labeled_tasks.tolist() == [1, 1, 1, 0, 0, 0]
    model = ModelState(Architecture(stream.dataset.dim, 4, (8,), 8, 4), seed=0)
    from nncsl.snn import SupportSet, one_hot

    sup = SupportSet(model.forward(batch.labeled_x)[1], one_hot(batch.labeled_y, 4), batch.labeled_tasks, batch.labeled_y, ids)
    current = filter_support(sup, 1, "current_only")
    assert set(current.class_tags.tolist()) <= set(stream[1].classes)


def test_head_gradient_scaling():
    model = ModelState(Architecture(4, 4, (8,), 8, 4), seed=0)
    scales = dict(zip(model.params, head_grad_scales(model, TrainConfig(lambda_lin=0.005))))
    assert scales["classifier.weight"] == pytest.approx(200.0)
    assert scales["backbone.0.weight"] == 1.0
    assert set(head_grad_scales(model, TrainConfig(method="er"))) == {1.0}
    assert set(head_grad_scales(model, TrainConfig(decouple_head=False))) == {1.0}


# optimisation


def test_small_step_decreases_fixed_batch_loss():
    stream = small_stream()
    for method in ("nncsl", "er"):
        cfg = TrainConfig(method=method, **FAST)
        state = StreamState(stream, cfg)
        state.model.mark_seen(stream[0].classes)
        batch, ids, _ = compose_batch(stream, 0, state.buffer, cfg, np.random.default_rng(2), stream[0].unlabeled[:8])
        opt = SGD(state.model.parameters(), cfg.momentum, 0.0)
        loss, _ = batch_losses(state.model, None, batch, ids, 0, cfg)
        ad.backward(loss)
        opt.step(1e-4)
        after, _ = batch_losses(state.model, None, batch, ids, 0, cfg)
        assert after.item() < loss.item(), method


def test_out_of_order_task_rejected():
    stream = small_stream()
    state = StreamState(stream, TrainConfig(**FAST))
    with pytest.raises(ProtocolError):
        train_task(state, stream, 1)


def test_blow_up_on_the_last_step_of_an_epoch_is_caught_before_evaluation(monkeypatch):
    stream = small_stream()
    state = StreamState(stream, TrainConfig(**{**FAST, "epochs_per_task": 1}))
    steps = len(train_task(StreamState(stream, state.cfg), stream, 0))
    real_step, calls = trainer.SGD.step, []

    def poisoning_step(self, lr):
        real_step(self, lr)
        calls.append(lr)
        if len(calls) == steps:
            self.params[0].data[0, 0] = np.inf

    monkeypatch.setattr(trainer.SGD, "step", poisoning_step)
    seen = []
    with pytest.raises(DivergenceError, match="non-finite parameters") as info:
        train_task(state, stream, 0, on_epoch=lambda *a: seen.append(a))
    assert info.value.task == 0 and info.value.step == steps
    assert seen == [] and len(state.buffer) == 0


@pytest.mark.parametrize("field, value", [("peak_lr", math.inf), ("base_lr", -0.1), ("lambda_nnd", math.nan)])
def test_rates_and_weights_must_be_finite(field, value):
    with pytest.raises(ParameterError, match=field):
        TrainConfig(**{field: value})


def test_seen_classes_only_grow_and_buffer_is_labeled_only():
    stream = small_stream(tasks=2)
    state = StreamState(stream, TrainConfig(**FAST))
    seen = []
    for t in range(2):
        train_task(state, stream, t)
        seen.append(state.model.seen_classes.copy())
        labeled = set(np.concatenate([stream[i].labeled for i in range(t + 1)]).tolist())
        assert set(state.buffer.ids) <= labeled
    assert np.all(seen[1] >= seen[0]) and seen[1].sum() > seen[0].sum()


def test_data_hygiene(monkeypatch):
    # record every unlabeled row handed to the batch composer
    stream = small_stream(tasks=2)
    import nncsl.trainer as trainer_mod

    touched = []
    original = trainer_mod.compose_batch

    def spy(stream_, t, buf, cfg, rng, unlabeled_rows=None, unlabeled_buf=None):
        touched.append((t, np.asarray(unlabeled_rows)))
        return original(stream_, t, buf, cfg, rng, unlabeled_rows, unlabeled_buf)

    monkeypatch.setattr(trainer_mod, "compose_batch", spy)
    run_stream(TrainConfig(**FAST), stream, learning_curve=False)
    for t, rows in touched:
        assert set(rows.tolist()) <= set(stream[t].unlabeled.tolist())


def test_identical_runs_are_bitwise_equal():
    stream = small_stream()
    a = run_stream(TrainConfig(**FAST), stream)
    b = run_stream(TrainConfig(**FAST), stream)
    for name in a.state.model.params:
        assert a.state.model.params[name].data.tobytes() == b.state.model.params[name].data.tobytes()
    np.testing.assert_array_equal(a.matrix.R, b.matrix.R)


def test_single_task_stream_gives_one_by_one_matrix():
    d = make_synthetic("gaussian_blobs", 2, 20, 4, seed=0, noise=0.1)
    rm = run_stream(TrainConfig(**FAST), split_stream(d, 1, 0.25, test_fraction=0.25)).matrix
    assert rm.R.shape == (1, 1) and np.isfinite(rm.R[0, 0])


def test_finetune_and_er_use_only_labels():
    stream = small_stream()
    for method in ("finetune", "er"):
        cfg = TrainConfig(method=method, **FAST)
        state = StreamState(stream, cfg)
        logs = train_task(state, stream, 0)
        assert all(set(rec) >= {"lin", "total"} and "snn" not in rec for rec in logs)
        assert len(state.buffer) == (0 if method == "finetune" else len(stream[0].labeled))


def test_semi_supervised_methods_log_their_parts():
    stream = small_stream()
    for method, key in (("nncsl", "distill"), ("csl+kd", "distill"), ("csl+fd", "distill"), ("paws", "mem")):
        state = StreamState(stream, TrainConfig(method=method, **FAST))
        train_task(state, stream, 0)
        logs = train_task(state, stream, 1)
        assert all(key in rec and np.isfinite(rec["total"]) for rec in logs), method


def test_teacher_feature_bank_and_unlabeled_buffer_options():
    stream = small_stream()
    cfg = TrainConfig(teacher_feature_bank=True, unlabeled_buffer_size=10, **FAST)
    result = run_stream(cfg, stream, learning_curve=False)
    assert set(result.state.feature_bank) == set(result.state.buffer.ids)
    assert len(result.state.unlabeled_buffer) == 10


def test_finetune_forgets_first_task():
    rows = []
    for seed in range(3):
        stream = small_stream(tasks=2, per_class=40, seed=seed, noise=0.3, ratio=1.0)
        cfg = TrainConfig(method="finetune", seed=seed, **{**FAST, "epochs_per_task": 10})
        rows.append(run_stream(cfg, stream, learning_curve=False).matrix.R[-1])
    last = np.mean(rows, axis=0)
    # two classes per task: chance on the old task is 0.25 under the 4-class mask
    assert last[1] > 0.9
    assert last[0] < 0.35


def test_learning_curve_has_one_point_per_epoch():
    stream = small_stream()
    curve = run_stream(TrainConfig(**FAST), stream).learning_curve
    assert [(c["task"], c["epoch"]) for c in curve] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert all(0 <= c["accuracy"] <= 1 for c in curve)


def test_augment_config_flows_through():
    stream = small_stream()
    cfg = TrainConfig(augment=AugmentConfig(n_local=0), **FAST)
    batch, _, _ = compose_batch(stream, 0, None, cfg, np.random.default_rng(0), stream[0].unlabeled[:4])
    assert batch.locals == ()
