"""Seeded synthetic shopping world with multi-interest users.

Each archetype owns a disjoint block of categories, entities, shops and
brands.  Users mix a few archetypes, often pairing an archetype with its
fixed partner so that co-occurrence ("bought together") structure exists
next to the attribute similarity inside an archetype.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, LabeledExample
from .features import BehaviorSequence, ItemRecord


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_items: int = 400
    n_categories: int = 16
    n_shops: int = 40
    n_brands: int = 40
    n_entities: int = 40
    n_contexts: int = 4
    archetypes: int = 4
    users: int = 2000
    seq_len: int = 20
    examples_per_user: int = 40
    test_fraction: float = 0.2
    min_interests: int = 1
    max_interests: int = 3
    combo_rate: float = 0.5
    positive_rate: float = 0.5
    noise_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        counts = {k: v for k, v in asdict(self).items() if k.startswith("n_") or k in ("archetypes", "users", "seq_len", "examples_per_user", "min_interests", "max_interests")}
        low = [k for k, v in counts.items() if v < 1]
        if low:
            raise WorldConfigError(f"counts must be >= 1: {low}")
        if self.min_interests > self.max_interests:
            raise WorldConfigError("min_interests exceeds max_interests")
        for k in ("test_fraction", "combo_rate", "positive_rate", "noise_rate"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise WorldConfigError(f"{k} must lie in [0, 1]")
        G = self.archetypes
        for k in ("n_items", "n_categories", "n_shops", "n_brands", "n_entities"):
            if getattr(self, k) < G:
                raise WorldConfigError(f"{k}={getattr(self, k)} too small for {G} archetypes")

    @property
    def vocab(self) -> dict[str, int]:
        return {
            "iid": self.n_items,
            "cid": self.n_categories,
            "sid": self.n_shops,
            "bid": self.n_brands,
            "entities": self.n_entities,
        }


@dataclass
class Catalog:
    items: list[ItemRecord]
    item_arch: np.ndarray
    arch_items: list[np.ndarray]
    arch_categories: list[np.ndarray]
    arch_entities: list[np.ndarray]
    partner: np.ndarray

    def archetype_of(self, item: ItemRecord) -> int:
        return int(self.item_arch[item.iid])


@dataclass
class LatentUser:
    user_id: int
    mixture: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.mixture > 0)


def _blocks(rng: np.random.Generator, n: int, G: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(b) for b in np.array_split(perm, G)]


def generate_world(config: WorldConfig) -> tuple[Catalog, list[LatentUser]]:
    config.validate()
    G = config.archetypes
    rng = np.random.default_rng([config.seed, 101])
    cats = _blocks(rng, config.n_categories, G)
    ents = _blocks(rng, config.n_entities, G)
    shops = _blocks(rng, config.n_shops, G)
    brands = _blocks(rng, config.n_brands, G)
    item_blocks = _blocks(rng, config.n_items, G)
    item_arch = np.empty(config.n_items, dtype=np.int64)
    for g, block in enumerate(item_blocks):
        item_arch[block] = g

    items = []
    for iid in range(config.n_items):
        g = item_arch[iid]
        n_ent = int(rng.integers(1, min(3, len(ents[g])) + 1))
        entities = tuple(int(e) for e in np.sort(rng.choice(ents[g], size=n_ent, replace=False)))
        # a fifth of shops/brands are drawn from the whole catalog
        sid = int(rng.choice(shops[g])) if rng.random() < 0.8 else int(rng.integers(config.n_shops))
        bid = int(rng.choice(brands[g])) if rng.random() < 0.8 else int(rng.integers(config.n_brands))
        items.append(ItemRecord(iid, int(rng.choice(cats[g])), sid, bid, entities))

    partner = np.arange(G)
    if G > 1:
        order = rng.permutation(G)
        for a, b in zip(order[0::2], order[1::2]):
            partner[a], partner[b] = b, a

    users = []
    for u in range(config.users):
        cap = 1 if G == 1 else min(config.max_interests, G - 1)
        k = int(rng.integers(min(config.min_interests, cap), cap + 1))
        chosen = [int(rng.integers(G))]
        while len(chosen) < k:
            p = int(partner[chosen[0]])
            if p not in chosen and rng.random() < config.combo_rate:
                chosen.append(p)
            else:
                rest = [g for g in range(G) if g not in chosen]
                chosen.append(int(rng.choice(rest)))
        mixture = np.zeros(G)
        mixture[chosen] = rng.dirichlet(np.full(len(chosen), 2.0)) if len(chosen) > 1 else 1.0
        users.append(LatentUser(u, mixture))

    catalog = Catalog(items, item_arch, item_blocks, cats, ents, partner)
    return catalog, users


def generate_dataset(catalog: Catalog, users: Sequence[LatentUser], config: WorldConfig) -> tuple[Dataset, Dataset]:
    """Per-user behavior sequence plus disjoint train/test candidate sets."""
    rng = np.random.default_rng([config.seed, 202])
    G = config.archetypes
    n_test = int(round(config.examples_per_user * config.test_fraction))
    train, test = [], []
    for user in users:
        arch = rng.choice(G, size=config.seq_len, p=user.mixture)
        seq_items = tuple(catalog.items[int(rng.choice(catalog.arch_items[a]))] for a in arch)
        seq = BehaviorSequence(seq_items, tuple(int(a) for a in arch))
        support = user.support
        outside = np.setdiff1d(np.arange(G), support)
        used: set[int] = set()
        for e in range(config.examples_per_user):
            positive = rng.random() < config.positive_rate or len(outside) == 0
            if positive:
                g = int(rng.choice(G, p=user.mixture))
            else:
                g = int(rng.choice(outside))
            pool = [i for i in catalog.arch_items[g] if i not in used]
            if not pool:
                pool = [i for i in range(len(catalog.items)) if i not in used and (catalog.item_arch[i] in support) == positive]
            if not pool:
                break
            iid = int(rng.choice(pool))
            used.add(iid)
            label = int(positive)
            if rng.random() < config.noise_rate:
                label = 1 - label
            ex = LabeledExample(user.user_id, seq, catalog.items[iid], int(rng.integers(config.n_contexts)), label)
            (test if e >= config.examples_per_user - n_test else train).append(ex)
    return Dataset(train), Dataset(test)


def oracle_scores(dataset: Dataset, catalog: Catalog, users: Sequence[LatentUser]) -> np.ndarray:
    """Mixture weight of each candidate's archetype for its user."""
    return np.array([users[ex.user].mixture[catalog.archetype_of(ex.cand)] for ex in dataset])


def gaussian_item_table(catalog: Catalog, dim: int, radius: float = 3.0, spread: float = 0.3, seed: int = 0) -> np.ndarray:
    """Item embeddings scattered around one random mean per archetype."""
    rng = np.random.default_rng([seed, 303])
    G = len(catalog.arch_items)
    means = rng.normal(size=(G, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    return means[catalog.item_arch] + spread * rng.normal(size=(len(catalog.items), dim))


def archetype_separation(embeddings, labels) -> float:
    """Mean pairwise distance of archetype centroids over mean within-archetype RMS spread."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ValueError("need at least two archetypes")
    centroids = np.stack([embeddings[labels == g].mean(axis=0) for g in groups])
    spread = np.mean([np.sqrt(((embeddings[labels == g] - centroids[i]) ** 2).sum(axis=1).mean()) for i, g in enumerate(groups)])
    diffs = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=-1))[np.triu_indices(len(groups), 1)]
    return float(dist.mean() / spread)
