"""Batch replay: every sampled image appears r times, each under its own augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .datakit import ConfigError, MultiDomainDataset
from .esaug import AugDraw, AugPolicy, FOURIER_MIX, STYLE_MIX, apply_draw, baseline_augment, sample_singular

AUGMENT_MODES = ("esaug", "baseline", "none")


class TrainingPool:
    """The ids a model may draw from, with a per-label index for style partners."""

    def __init__(self, dataset: MultiDomainDataset, ids):
        self.dataset = dataset
        self.ids = np.asarray(ids, dtype=np.int64)
        labels = dataset.labels[self.ids]
        self.by_label = {int(c): self.ids[labels == c] for c in np.unique(labels)}

    def __len__(self) -> int:
        return len(self.ids)

    def partner(self, draw: AugDraw, label: int, rng: np.random.Generator) -> int | None:
        if draw.op is FOURIER_MIX:
            return int(self.ids[rng.integers(len(self.ids))])
        if draw.op is STYLE_MIX:
            same = self.by_label.get(label)
            choices = same if same is not None and len(same) else self.ids
            return int(choices[rng.integers(len(choices))])
        return None


def sample_base_batch(pool_ids, b: int, rng: np.random.Generator) -> np.ndarray:
    pool_ids = np.asarray(pool_ids)
    if len(pool_ids) < b:
        raise ConfigError(f"pool of {len(pool_ids)} is smaller than batch size {b}")
    return rng.choice(pool_ids, size=b, replace=False)


def epoch_batches(pool_ids, b: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle the pool once and cut it into steps of ``b`` (the last may be short)."""
    pool_ids = np.asarray(pool_ids)
    if len(pool_ids) < b:
        raise ConfigError(f"pool of {len(pool_ids)} is smaller than batch size {b}")
    order = rng.permutation(pool_ids)
    return [order[i:i + b] for i in range(0, len(order), b)]


@dataclass(frozen=True)
class ReplayBatch:
    """``r * b`` entries, anchor-major: entry ``a * r + k`` is replica ``k`` of anchor ``a``."""

    images: np.ndarray
    labels: np.ndarray
    anchor_ids: np.ndarray
    partner_ids: np.ndarray  # -1 where the op used no partner
    op_names: tuple[str, ...]
    strengths: np.ndarray
    r: int
    b: int
    extra_partner_ids: tuple[int, ...] = ()  # later partners of cascaded draws

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def entries(self) -> list[tuple[np.ndarray, int, int]]:
        return [(self.images[i], int(self.labels[i]), int(self.anchor_ids[i])) for i in range(len(self))]

    def touched_ids(self) -> np.ndarray:
        """Every sample id whose pixels entered this batch."""
        partners = self.partner_ids[self.partner_ids >= 0]
        extra = np.asarray(self.extra_partner_ids, dtype=np.int64)
        return np.unique(np.concatenate([self.anchor_ids, partners, extra]))


def _cascade(policy: AugPolicy, image, label, pool, rng):
    partners = []
    for _ in range(policy.cascade):
        draw = sample_singular(policy, rng)
        partner = pool.partner(draw, label, rng)
        src = pool.dataset.images[partner] if partner is not None else None
        image = apply_draw(draw, image, rng, src, policy.phase_source)
        if partner is not None:
            partners.append(partner)
    return image, partners


def build_replay_batch(base_ids, r: int, policy: AugPolicy, pool: TrainingPool, stream: RngStream,
                       augment: str = "esaug", jitter: float = 0.4) -> ReplayBatch:
    """Augment each base sample ``r`` times with independent draws.

    Replica ``k`` of anchor position ``a`` uses the stream ``stream.fork(a, k)``,
    so any single entry can be regenerated on its own.
    """
    if r < 1:
        raise ConfigError("r must be >= 1")
    if augment not in AUGMENT_MODES:
        raise ConfigError(f"augment must be one of {AUGMENT_MODES}")
    ds = pool.dataset
    base_ids = np.asarray(base_ids, dtype=np.int64)
    b = len(base_ids)
    n = r * b
    images = np.empty((n,) + ds.image_shape)
    labels = np.repeat(ds.labels[base_ids], r)
    anchors = np.repeat(base_ids, r)
    partners = np.full(n, -1, dtype=np.int64)
    strengths = np.zeros(n, dtype=np.int64)
    names = []
    extra: list[int] = []
    for a, sid in enumerate(base_ids):
        src = ds.images[sid]
        label = int(ds.labels[sid])
        for k in range(r):
            idx = a * r + k
            rng = stream.fork(a, k).generator()
            if augment == "none":
                images[idx] = src
                names.append("Identity")
            elif augment == "baseline":
                images[idx] = baseline_augment(src, rng, jitter=jitter)
                names.append("Baseline")
            elif policy.cascade > 1:
                images[idx], used = _cascade(policy, src, label, pool, rng)
                if used:
                    partners[idx] = used[0]
                    extra.extend(used[1:])
                names.append("Cascade")
            else:
                draw = sample_singular(policy, rng)
                partner = pool.partner(draw, label, rng)
                other = ds.images[partner] if partner is not None else None
                images[idx] = apply_draw(draw, src, rng, other, policy.phase_source)
                if partner is not None:
                    partners[idx] = partner
                strengths[idx] = draw.strength
                names.append(draw.op.name)
    return ReplayBatch(images, labels, anchors, partners, tuple(names), strengths, r, b, tuple(extra))


def positives(labels) -> list[np.ndarray]:
    """For each entry, the sorted indices of other entries sharing its label."""
    if isinstance(labels, ReplayBatch):
        labels = labels.labels
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return [np.flatnonzero(row) for row in same]
