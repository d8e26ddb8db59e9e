import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplee.core import RngStream
from triplee.datakit import ConfigError
from triplee.esaug import AugPolicy, sample_singular
from triplee.replay import TrainingPool, build_replay_batch, epoch_batches, positives, sample_base_batch


def brute_positives(labels):
    out = []
    for i in range(len(labels)):
        out.append([j for j in range(len(labels)) if j != i and labels[j] == labels[i]])
    return out


@pytest.fixture(scope="module")
def pool(small_dataset):
    return TrainingPool(small_dataset, np.arange(len(small_dataset)))


def test_sample_base_batch():
    ids = sample_base_batch(np.arange(100), 4, np.random.default_rng(0))
    assert len(ids) == 4 and len(set(ids.tolist())) == 4
    with pytest.raises(ConfigError):
        sample_base_batch(np.arange(3), 4, np.random.default_rng(0))


def test_epoch_covers_pool_once():
    batches = epoch_batches(np.arange(100), 4, np.random.default_rng(0))
    assert len(batches) == 25
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(100))


def test_epoch_order_depends_on_seed_only():
    a = epoch_batches(np.arange(100), 4, np.random.default_rng(1))
    b = epoch_batches(np.arange(100), 4, np.random.default_rng(2))
    assert not np.array_equal(np.concatenate(a), np.concatenate(b))
    assert np.array_equal(np.sort(np.concatenate(a)), np.sort(np.concatenate(b)))


def test_replay_batch_b4_r4(pool):
    batch = build_replay_batch(np.array([0, 5, 9, 17]), 4, AugPolicy("fourier"), pool, RngStream(0))
    assert len(batch) == 16
    assert all(len(p) >= 3 for p in positives(batch))
    # anchor-major order, labels carried over unchanged
    assert np.array_equal(batch.anchor_ids, np.repeat([0, 5, 9, 17], 4))
    assert np.array_equal(batch.labels, pool.dataset.labels[batch.anchor_ids])
    assert batch.images.min() >= 0 and batch.images.max() <= 1


def test_replay_draws_are_independent_per_replica(pool):
    batch = build_replay_batch(np.arange(8), 4, AugPolicy("fourier"), pool, RngStream(3))
    per_anchor = [set(zip(batch.op_names[a * 4:(a + 1) * 4], batch.strengths[a * 4:(a + 1) * 4]))
                  for a in range(8)]
    assert sum(len(s) > 1 for s in per_anchor) >= 7


def test_degenerate_replay_with_identity_draws(pool):
    base = np.array([2, 7])
    policy = AugPolicy("none")
    for seed in range(10_000):
        stream = RngStream(seed)
        ops = {sample_singular(policy, stream.fork(a, 0).generator()).op.name for a in range(2)}
        if ops == {"Identity"}:
            break
    else:
        pytest.fail("no all-Identity stream found")
    batch = build_replay_batch(base, 1, policy, pool, stream)
    assert batch.op_names == ("Identity", "Identity")
    assert np.array_equal(batch.images, pool.dataset.images[base])


def test_two_equal_labels_two_replays(small_dataset, pool):
    same = np.flatnonzero(small_dataset.labels == 1)[:2]
    batch = build_replay_batch(same, 2, AugPolicy("style"), pool, RngStream(0))
    assert [len(p) for p in positives(batch)] == [3, 3, 3, 3]


def test_positives_distinct_and_equal_labels():
    labels = np.repeat([0, 1, 2, 3], 2)
    assert [p.tolist() for p in positives(labels)] == [[1], [0], [3], [2], [5], [4], [7], [6]]
    same = np.zeros(12, dtype=int)
    assert all(len(p) == 11 for p in positives(same))


def test_positives_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = rng.integers(0, rng.integers(1, 6), size=rng.integers(1, 17))
        got = [p.tolist() for p in positives(labels)]
        assert got == brute_positives(labels.tolist())


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**32 - 1))
def test_size_law_and_positive_bound(b, r, seed):
    rng = np.random.default_rng(seed)
    base = np.arange(b)
    labels = np.repeat(rng.integers(0, 5, size=b), r)
    n = r * b
    assert len(labels) == n
    pos = positives(labels)
    for i, p in enumerate(pos):
        assert len(p) >= r - 1 and i not in p
        for j in p:
            assert i in pos[j]
    assert len(base) == b


@pytest.mark.parametrize("b", [1, 2, 4, 8])
@pytest.mark.parametrize("r", [1, 2, 4, 8])
def test_size_law_on_built_batches(pool, b, r):
    base = np.arange(0, 3 * b, 3)
    batch = build_replay_batch(base, r, AugPolicy("fourier"), pool, RngStream(b * 10 + r))
    assert len(batch) == r * b
    assert all(len(p) >= r - 1 for p in positives(batch))
    counts = np.bincount(batch.anchor_ids)
    assert set(counts[counts > 0].tolist()) == {r}


def test_replica_collision_rate_matches_analytic():
    policy = AugPolicy("fourier", exclude=("Identity",))
    n_ops = len(policy.ops)
    trials = 100_000
    root = RngStream(99)
    hits = 0
    for t in range(trials):
        d0 = sample_singular(policy, root.fork(t, 0).generator())
        d1 = sample_singular(policy, root.fork(t, 1).generator())
        hits += (d0.op is d1.op) and d0.strength == d1.strength
    p = 1.0 / (n_ops * 31)
    sigma = np.sqrt(p * (1 - p) / trials)
    assert abs(hits / trials - p) < 3 * sigma


def test_partners_come_from_pool(small_dataset):
    ids = np.flatnonzero(small_dataset.domains != 2)
    pool = TrainingPool(small_dataset, ids)
    batch = build_replay_batch(ids[:8], 8, AugPolicy("both", cross_prob=1.0), pool, RngStream(1))
    used = batch.partner_ids[batch.partner_ids >= 0]
    assert len(used) == 64
    assert set(used.tolist()) <= set(ids.tolist())
    style = np.array([name == "StyleMix" for name in batch.op_names])
    assert np.array_equal(small_dataset.labels[batch.partner_ids[style]], batch.labels[style])
    assert set(batch.touched_ids().tolist()) <= set(ids.tolist())


def test_baseline_and_none_modes(pool):
    base = np.array([1, 2, 3])
    plain = build_replay_batch(base, 2, AugPolicy(), pool, RngStream(0), augment="none")
    assert np.array_equal(plain.images, pool.dataset.images[np.repeat(base, 2)])
    jittered = build_replay_batch(base, 2, AugPolicy(), pool, RngStream(0), augment="baseline")
    assert jittered.op_names == ("Baseline",) * 6
    with pytest.raises(ConfigError):
        build_replay_batch(base, 0, AugPolicy(), pool, RngStream(0))


def test_batch_is_reproducible(pool):
    a = build_replay_batch(np.array([4, 8]), 4, AugPolicy("both"), pool, RngStream(5, ("x",)))
    b = build_replay_batch(np.array([4, 8]), 4, AugPolicy("both"), pool, RngStream(5, ("x",)))
    assert a.images.tobytes() == b.images.tobytes()
    assert a.op_names == b.op_names
