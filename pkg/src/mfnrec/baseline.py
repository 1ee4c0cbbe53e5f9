"""Mean-pooling Embedding&MLP model, used as the Base row and for pretraining
the fixed embedding tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Batch, Dataset
from .diffcore import Tensor, adam_step, backward, tape
from .features import ALL_FIELDS, ITEM_FIELDS, EmbeddingBundle
from .nets import CTRModel


class MeanPoolModel(CTRModel):
    """Average of the behavior embeddings (all item fields summed) fed to the head."""

    kind = "base"

    def __init__(self, bundle: EmbeddingBundle, n_users: int, n_contexts: int,
                 head_hidden: Sequence[int] = (64, 32), seed: int = 0, use_profile: bool = True):
        super().__init__(bundle, n_users, n_contexts, bundle.dim, head_hidden, seed, use_profile=use_profile)

    def interest_blocks(self, batch: Batch, trace: dict | None = None) -> list[Tensor]:
        seq = self.bundle.embed(batch.seq, ALL_FIELDS, "trainable")
        return [seq.mean(axis=-2)]


@dataclass
class VanillaConfig:
    dim: int = 16
    steps: int = 2000
    batch_size: int = 256
    lr: float = 3e-3
    hidden: int = 64
    seed: int = 0
    vocab: dict | None = None


def fit_vanilla(corpus: Dataset, config: VanillaConfig, history: list | None = None) -> MeanPoolModel:
    """Train mean-pool + candidate -> 2-layer MLP on the CTR task.

    Vocabulary sizes come from ``config.vocab``, grown to cover the corpus ids.
    """
    if len(corpus) == 0:
        raise ValueError("cannot pretrain embeddings on an empty corpus")
    vocab = vocab_of(corpus, config.vocab)
    bundle = EmbeddingBundle.create(vocab, config.dim, config.seed)
    model = MeanPoolModel(bundle, n_users=1, n_contexts=1, head_hidden=(config.hidden,),
                          seed=config.seed, use_profile=False)
    rng = np.random.default_rng([config.seed, 17])
    order = rng.permutation(len(corpus))
    pos = 0
    for step in range(config.steps):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(corpus)), 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        with tape():
            loss = model.batch_loss([corpus[i] for i in idx])
            backward(loss)
        adam_step(model.parameters(), lr=config.lr)
        if history is not None:
            history.append(loss.item())
    return model


def pretrain_vanilla(corpus: Dataset, config: VanillaConfig, history: list | None = None) -> dict[str, np.ndarray]:
    """Item tables of the fitted vanilla model; zero steps give the seeded init."""
    model = fit_vanilla(corpus, config, history)
    return {f: model.bundle.trainable[f].data.copy() for f in ITEM_FIELDS}


def vocab_of(corpus: Dataset, at_least: dict[str, int] | None = None) -> dict[str, int]:
    """Smallest vocabulary sizes covering every id in the corpus."""
    top = dict.fromkeys(ITEM_FIELDS, 0)
    if at_least:
        top.update({k: v - 1 for k, v in at_least.items() if k in top})
    for ex in corpus:
        for it in (*ex.seq.items, ex.cand):
            top["iid"] = max(top["iid"], it.iid)
            top["cid"] = max(top["cid"], it.cid)
            top["sid"] = max(top["sid"], it.sid)
            top["bid"] = max(top["bid"], it.bid)
            if it.entities:
                top["entities"] = max(top["entities"], max(it.entities))
    return {k: v + 1 for k, v in top.items()}
