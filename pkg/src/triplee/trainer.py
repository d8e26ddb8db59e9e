"""Dataset replay and the full training loop: per-epoch partitions, SGD, selection, ensembling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .config import RunConfig
from .core import RngStream
from .datakit import ConfigError, MultiDomainDataset, SplitSpec
from .nn import (
    ModelParams, cross_entropy, forward, init_params, loss_and_grad, predict_proba, softmax,
    update_running_stats,
)
from .replay import TrainingPool, build_replay_batch, epoch_batches


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# partitions

@dataclass(frozen=True)
class PartitionPlan:
    epoch: int
    ids: np.ndarray  # pool ids in the order given
    assignment: np.ndarray  # sub-dataset index per id
    m: int

    def subset(self, k: int) -> np.ndarray:
        return self.ids[self.assignment == k]

    def subsets(self) -> list[np.ndarray]:
        return [self.subset(k) for k in range(self.m)]

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.m).tolist()


def _balanced_assignment(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    assignment = np.empty(n, dtype=np.int64)
    assignment[rng.permutation(n)] = np.arange(n) % m
    return assignment


def partition_plans(pool_ids, m: int, seed: int) -> Iterator[PartitionPlan]:
    """Yield the plans for epochs 0, 1, 2, ...

    Each epoch draws a fresh balanced random split; if it happens to repeat
    the previous epoch's assignment it is redrawn, so consecutive plans
    always differ whenever a different plan exists.
    """
    ids = np.asarray(pool_ids, dtype=np.int64)
    n = len(ids)
    if m < 1 or m > n:
        raise ConfigError(f"cannot split {n} samples into {m} sub-datasets")
    root = RngStream(seed, ("partition",))
    can_change = m > 1 and n > 1
    prev = None
    epoch = 0
    while True:
        attempt = 0
        while True:
            assignment = _balanced_assignment(n, m, root.fork(epoch, attempt).generator())
            if prev is None or not can_change or not np.array_equal(assignment, prev):
                break
            attempt += 1
        prev = assignment
        yield PartitionPlan(epoch, ids, assignment, m)
        epoch += 1


def partition(pool_ids, m: int, seed: int, epoch: int) -> PartitionPlan:
    for plan in partition_plans(pool_ids, m, seed):
        if plan.epoch == epoch:
            return plan
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# optimisation

def lr_at(epoch: int, config: RunConfig) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_period)


def sgd_step(flat: np.ndarray, grad: np.ndarray, lr: float, velocity: np.ndarray | None = None,
             momentum: float = 0.0) -> np.ndarray:
    """In-place SGD update ``v = momentum * v + g; theta -= lr * v``; returns ``flat``."""
    if grad.shape != flat.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient")
    if momentum and velocity is not None:
        velocity *= momentum
        velocity += grad
        flat -= lr * velocity
    else:
        flat -= lr * grad
    return flat


# ---------------------------------------------------------------------------
# ensembles

@dataclass
class EnsembleModel:
    members: list[ModelParams]
    best_val_acc: list[float]
    best_epoch: list[int]

    @property
    def m(self) -> int:
        return len(self.members)


def ensemble_predict(ensemble: EnsembleModel | list[ModelParams], images: np.ndarray) -> np.ndarray:
    """Mean of the members' softmax distributions (eval mode)."""
    members = ensemble.members if isinstance(ensemble, EnsembleModel) else ensemble
    probs = [predict_proba(p, images) for p in members]
    return np.mean(probs, axis=0)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("no samples to score")
    return 100.0 * int(np.sum(np.argmax(probs, axis=1) == labels)) / len(labels)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class StepTrace:
    epoch: int
    model: int
    step: int
    anchors: tuple[int, ...]
    partners: tuple[int, ...]


@dataclass
class TrainResult:
    ensemble: EnsembleModel
    log: list[dict]
    trace: list[StepTrace] = field(default_factory=list)
    touched: set[int] = field(default_factory=set)


def _evaluate_member(params: ModelParams, dataset: MultiDomainDataset, ids: np.ndarray) -> tuple[float, float]:
    logits = np.concatenate([forward(params, dataset.images[ids[i:i + 256]]).logits
                             for i in range(0, len(ids), 256)])
    ce, _ = cross_entropy(logits, dataset.labels[ids])
    return accuracy(softmax(logits), dataset.labels[ids]), ce


def train(config: RunConfig, dataset: MultiDomainDataset, split: SplitSpec,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``config.models`` networks and keep each one's best source-validation snapshot.

    With dataset replay on, each epoch re-partitions the training pool and
    model ``i`` only sees sub-dataset ``i``. With ``ensemble="traditional"``
    every model sees the whole pool. Domain tags are never read here.
    """
    config.validate()
    arch = config.arch(dataset.image_shape[0])
    root = RngStream(config.seed, ("train",))
    m = config.models
    train_ids = split.train_ids
    val_ids = split.val_ids
    if len(train_ids) < m:
        raise ConfigError(f"m={m} exceeds the training pool of {len(train_ids)}")

    models = [init_params(root, arch, model_index=i) for i in range(m)]
    velocity = [np.zeros(p.size) for p in models]
    best = [p.copy() for p in models]
    best_acc = [-np.inf] * m
    best_epoch = [-1] * m
    log: list[dict] = []
    trace: list[StepTrace] = []
    touched: set[int] = set()
    policy = config.policy()
    use_partition = config.ereplay_d and config.ensemble == "partition" and m > 1
    plans = partition_plans(train_ids, m, config.seed) if use_partition else None

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        subsets = next(plans).subsets() if plans is not None else [train_ids] * m
        for i, params in enumerate(models):
            pool = TrainingPool(dataset, subsets[i])
            stream = root.fork("epoch", epoch, "model", i)
            batches = epoch_batches(pool.ids, min(config.base_batch, len(pool)), stream.fork("shuffle").generator())
            sums = np.zeros(3)
            for step, base in enumerate(batches):
                batch = build_replay_batch(base, config.replays, policy, pool, stream.fork("step", step),
                                           augment=config.augment_mode, jitter=config.color_jitter)
                loss = loss_and_grad(params, batch.images, batch.labels, config.tau, use_supcon=config.supcon,
                                     supcon_reduction=config.supcon_reduction)
                if not np.isfinite(loss.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, model {i}, step {step}")
                try:
                    sgd_step(params.flat, loss.grad, lr, velocity[i], config.momentum)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"{exc} at epoch {epoch}, model {i}, step {step}") from None
                update_running_stats(params, loss.forward)
                correct = np.sum(np.argmax(loss.forward.logits, axis=1) == batch.labels)
                sums += (loss.ce * len(batch), loss.sup, correct)
                ids = batch.touched_ids()
                touched.update(ids.tolist())
                if config.record_trace:
                    partners = np.setdiff1d(ids, base)
                    trace.append(StepTrace(epoch, i, step, tuple(base.tolist()), tuple(partners.tolist())))
            seen = config.replays * len(pool)
            log.append({"epoch": epoch, "model": i, "split": "train", "loss_ce": sums[0] / seen,
                        "loss_sup": sums[1] / len(batches), "acc": 100.0 * sums[2] / seen, "lr": lr})

            val_acc, val_ce = _evaluate_member(params, dataset, val_ids)
            log.append({"epoch": epoch, "model": i, "split": "val", "loss_ce": val_ce, "loss_sup": None,
                        "acc": val_acc, "lr": lr})
            if val_acc > best_acc[i]:
                best_acc[i], best_epoch[i] = val_acc, epoch
                best[i] = params.copy()
            if progress is not None:
                progress(log[-1])

    best_acc = [float(a) if np.isfinite(a) else float("nan") for a in best_acc]
    return TrainResult(EnsembleModel(best, best_acc, best_epoch), log, trace, touched)


def train_traditional_ensemble(config: RunConfig, dataset: MultiDomainDataset, split: SplitSpec,
                               progress: Callable[[dict], None] | None = None) -> TrainResult:
    """``m`` independently initialised models, each trained on the whole pool every epoch."""
    return train(config.replace(ensemble="traditional"), dataset, split, progress)
