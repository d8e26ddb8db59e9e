import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplee import trainer as trainer_mod
from triplee.config import RunConfig
from triplee.datakit import ConfigError, make_split
from triplee.nn import init_params, predict_proba
from triplee.core import RngStream
from triplee.trainer import (EnsembleModel, TrainingDiverged, accuracy, ensemble_predict, lr_at, partition,
                             partition_plans, sgd_step, train, train_traditional_ensemble)

QUICK = dict(classes=3, image_size=16, channels=(4, 4, 8, 8), proj_dim=8, b=4, r=2, m=3, epochs=2)


@pytest.fixture(scope="module")
def split(small_dataset):
    return make_split(small_dataset, 0, 0.1, 0)


def quick(**changes):
    return RunConfig(seed=5, **{**QUICK, **changes})


# -- partitions ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(10, 500), st.integers(1, 5), st.integers(0, 2**31), st.integers(0, 4))
def test_partition_laws(n, m, seed, epoch):
    ids = np.arange(1000, 1000 + n)
    plan = partition(ids, m, seed, epoch)
    subsets = plan.subsets()
    joined = np.concatenate(subsets)
    assert len(joined) == n and np.array_equal(np.sort(joined), ids)
    sizes = plan.sizes()
    assert max(sizes) - min(sizes) <= 1
    again = partition(ids, m, seed, epoch)
    assert np.array_equal(again.assignment, plan.assignment)
    if m > 1:
        assert not np.array_equal(partition(ids, m, seed, epoch + 1).assignment, plan.assignment)


def test_partition_sizes_100_by_3():
    assert sorted(partition(np.arange(100), 3, 0, 0).sizes(), reverse=True) == [34, 33, 33]


def test_partition_m1_is_the_pool():
    ids = np.arange(37)
    plan = partition(ids, 1, 9, 3)
    assert np.array_equal(plan.subset(0), ids)


def test_partition_rejects_too_many_parts():
    with pytest.raises(ConfigError):
        partition(np.arange(3), 4, 0, 0)


def test_partition_coverage_over_50_epochs():
    seen = np.zeros((99, 3), dtype=bool)
    for plan in partition_plans(np.arange(99), 3, 123):
        seen[plan.ids, plan.assignment] = True
        if plan.epoch == 49:
            break
    assert seen.all()


def test_resplit_rate_over_seeds():
    differ = 0
    for seed in range(1000):
        plans = partition_plans(np.arange(4), 3, seed)
        a, b = next(plans), next(plans)
        differ += not np.array_equal(a.assignment, b.assignment)
    assert differ / 1000 > 0.999


def test_partition_is_pure_per_epoch():
    ids = np.arange(50)
    sequential = [p.assignment for _, p in zip(range(4), partition_plans(ids, 3, 8))]
    assert np.array_equal(partition(ids, 3, 8, 3).assignment, sequential[3])
    assert not np.array_equal(partition(ids, 3, 9, 3).assignment, sequential[3])


# -- schedule and optimizer --------------------------------------------------------------

def test_lr_schedule():
    cfg = RunConfig(seed=0)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(29, cfg) == 0.01
    assert lr_at(30, cfg) == 0.005
    assert lr_at(95, cfg) == pytest.approx(0.00125, abs=1e-15)


def test_sgd_zero_lr_and_quadratic():
    theta = np.array([1.0])
    sgd_step(theta, np.array([5.0]), 0.0)
    assert theta[0] == 1.0
    sgd_step(theta, 2 * theta, 0.1)
    assert theta[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_convex_quadratic_trajectory():
    a = np.array([[3.0, 0.5], [0.5, 1.0]])
    theta = np.array([1.0, -2.0])
    x, y = 1.0, -2.0
    losses = []
    for _ in range(10):
        losses.append(0.5 * theta @ a @ theta)
        sgd_step(theta, a @ theta, 0.1)
        gx, gy = 3.0 * x + 0.5 * y, 0.5 * x + 1.0 * y
        x, y = x - 0.1 * gx, y - 0.1 * gy
        assert abs(theta[0] - x) < 1e-12 and abs(theta[1] - y) < 1e-12
    assert all(l1 < l0 for l0, l1 in zip(losses, losses[1:]))


def test_sgd_momentum():
    theta, v = np.array([1.0]), np.zeros(1)
    sgd_step(theta, np.array([1.0]), 0.1, v, 0.9)
    sgd_step(theta, np.array([1.0]), 0.1, v, 0.9)
    assert v[0] == pytest.approx(1.9) and theta[0] == pytest.approx(1 - 0.1 - 0.19)


def test_sgd_rejects_non_finite():
    with pytest.raises(TrainingDiverged):
        sgd_step(np.zeros(2), np.array([0.0, np.nan]), 0.1)
    with pytest.raises(ValueError):
        sgd_step(np.zeros(2), np.zeros(3), 0.1)


# -- ensembles ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def members():
    cfg = quick()
    arch = cfg.arch()
    return [init_params(RngStream(1), arch, i) for i in range(3)]


def test_ensemble_single_member(members, small_dataset):
    x = small_dataset.images[:7]
    assert np.array_equal(ensemble_predict([members[0]], x), predict_proba(members[0], x))


def test_ensemble_identical_members(members, small_dataset):
    x = small_dataset.images[:7]
    probs = ensemble_predict([members[1]] * 3, x)
    assert np.allclose(probs, predict_proba(members[1], x), rtol=0, atol=1e-15)


def test_ensemble_matches_hand_average(members, small_dataset):
    x = small_dataset.images[10:11]
    raw = [predict_proba(p, x)[0] for p in members]
    expected = [(raw[0][k] + raw[1][k] + raw[2][k]) / 3 for k in range(3)]
    got = ensemble_predict(EnsembleModel(members, [0.0] * 3, [0] * 3), x)[0]
    assert np.max(np.abs(got - expected)) < 1e-12


def test_ensemble_outputs_stay_on_simplex(members, small_dataset):
    probs = ensemble_predict(members, small_dataset.images)
    assert probs.min() >= 0
    assert np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-12


def test_accuracy_arithmetic():
    probs = np.eye(3)[[0, 1, 2, 0]]
    assert accuracy(probs, np.array([0, 1, 1, 0])) == 75.0
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 3)), np.array([], dtype=int))


# -- training loop ------------------------------------------------------------------------

def test_zero_epochs_returns_initial_params(small_dataset, split):
    cfg = quick(epochs=0)
    result = train(cfg, small_dataset, split)
    assert result.log == [] and result.trace == []
    root = RngStream(cfg.seed, ("train",))
    for i, member in enumerate(result.ensemble.members):
        assert np.array_equal(member.flat, init_params(root, cfg.arch(), i).flat)


def test_missing_seed_is_rejected(small_dataset, split):
    with pytest.raises(ConfigError):
        train(RunConfig(**QUICK), small_dataset, split)


@pytest.fixture(scope="module")
def run_pair(small_dataset, split):
    return train(quick(), small_dataset, split), train(quick(), small_dataset, split)


def test_training_is_deterministic(run_pair):
    a, b = run_pair
    assert a.log == b.log
    for p, q in zip(a.ensemble.members, b.ensemble.members):
        assert p.flat.tobytes() == q.flat.tobytes()
        assert all(np.array_equal(p.buffers[k], q.buffers[k]) for k in p.buffers)
    assert a.trace == b.trace


def test_log_layout_and_selection(run_pair):
    result = run_pair[0]
    assert len(result.log) == 2 * 3 * 2
    assert {tuple(sorted(row)) for row in result.log} == {("acc", "epoch", "loss_ce", "loss_sup", "lr", "model", "split")}
    for i in range(3):
        vals = [row["acc"] for row in result.log if row["model"] == i and row["split"] == "val"]
        running = np.maximum.accumulate(vals)
        assert np.all(np.diff(running) >= 0)
        assert result.ensemble.best_val_acc[i] == running[-1]
        assert vals[result.ensemble.best_epoch[i]] == running[-1]


def test_partition_routing_in_trace(run_pair, split):
    result = run_pair[0]
    pool = set(split.train_ids.tolist())
    for epoch in range(2):
        anchors = [a for s in result.trace if s.epoch == epoch for a in s.anchors]
        assert sorted(anchors) == sorted(pool)
        per_model = [{a for s in result.trace if s.epoch == epoch and s.model == i for a in s.anchors}
                     for i in range(3)]
        assert not (per_model[0] & per_model[1]) and not (per_model[1] & per_model[2])


def test_no_target_ids_touched(run_pair, small_dataset):
    target = set(small_dataset.domain_indices(0).tolist())
    result = run_pair[0]
    assert result.touched and not (result.touched & target)
    assert all(not (set(s.anchors + s.partners) & target) for s in result.trace)


def test_traditional_ensemble_differs_only_in_routing(small_dataset, split):
    cfg = quick(epochs=1)
    part = train(cfg, small_dataset, split)
    trad = train_traditional_ensemble(cfg, small_dataset, split)
    pool = sorted(split.train_ids.tolist())
    for i in range(3):
        anchors = [a for s in trad.trace if s.model == i for a in s.anchors]
        assert sorted(anchors) == pool
    routed = [{a for s in part.trace if s.model == i for a in s.anchors} for i in range(3)]
    assert sum(len(r) for r in routed) == len(pool)
    # same initial members: with zero epochs the two constructions coincide
    zero_p = train(cfg.replace(epochs=0), small_dataset, split).ensemble.members
    zero_t = train_traditional_ensemble(cfg.replace(epochs=0), small_dataset, split).ensemble.members
    assert all(np.array_equal(p.flat, q.flat) for p, q in zip(zero_p, zero_t))


def test_traditional_equals_partition_when_m_is_one(small_dataset, split):
    cfg = quick(m=1, epochs=1)
    a = train(cfg, small_dataset, split)
    b = train_traditional_ensemble(cfg, small_dataset, split)
    assert a.log == b.log
    assert a.ensemble.members[0].flat.tobytes() == b.ensemble.members[0].flat.tobytes()


def test_flags_off_is_single_model_baseline(small_dataset, split):
    cfg = quick(ereplay_b=False, esaug=False, ereplay_d=False, epochs=1)
    assert cfg.models == 1 and cfg.replays == 1 and cfg.augment_mode == "baseline"
    result = train(cfg, small_dataset, split)
    assert result.ensemble.m == 1
    assert all(len(s.partners) == 0 for s in result.trace)
    assert sorted(a for s in result.trace for a in s.anchors) == sorted(split.train_ids.tolist())


def test_non_finite_loss_aborts_with_location(small_dataset, split, monkeypatch):
    real = trainer_mod.loss_and_grad

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out.total = float("nan")
        return out

    monkeypatch.setattr(trainer_mod, "loss_and_grad", poisoned)
    with pytest.raises(TrainingDiverged, match="epoch 0, model 0, step 0"):
        train(quick(epochs=1), small_dataset, split)
