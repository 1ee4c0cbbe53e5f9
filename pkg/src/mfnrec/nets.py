"""Dense layers, the prediction head and the shared CTR model plumbing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Batch, LabeledExample, collate, length_groups
from .diffcore import Parameter, Tensor, as_tensor, clamp, concat, gather, glorot, log, matmul, sigmoid, swish
from .features import ALL_FIELDS, EmbeddingBundle

PROB_FLOOR = 1e-12


class Dense:
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, name: str, bias: bool = True):
        self.W = Parameter(glorot(rng, fan_in, fan_out), name=f"{name}.W")
        self.b = Parameter(np.zeros(fan_out), name=f"{name}.b") if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.W)
        return y + self.b if self.b is not None else y

    def parameters(self) -> list[Parameter]:
        return [self.W] + ([self.b] if self.b is not None else [])


class MLP:
    """Swish hidden layers followed by a linear output."""

    def __init__(self, rng: np.random.Generator, sizes: Sequence[int], name: str, out_bias: bool = True):
        self.layers = [
            Dense(rng, a, b, f"{name}.{i}", bias=(i < len(sizes) - 2 or out_bias))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = swish(layer(x))
        return self.layers[-1](x)

    @property
    def final(self) -> Dense:
        return self.layers[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def bce(prob: Tensor, labels: np.ndarray) -> Tensor:
    """Summed binary cross-entropy with probabilities clamped away from 0 and 1."""
    p = clamp(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    return -((log(p) * y) + (log(1.0 - p) * (1.0 - y))).sum()


class CTRModel:
    """Common parts: embeddings, user/context profile blocks, head MLP and loss.

    Subclasses provide ``interest_blocks(batch, trace)`` returning a list of
    (B, width) tensors placed before the profile blocks in the head input.
    """

    kind = "ctr"

    def __init__(self, bundle: EmbeddingBundle, n_users: int, n_contexts: int, interest_width: int,
                 head_hidden: Sequence[int], seed: int, use_profile: bool = True):
        self.bundle = bundle
        self.dim = bundle.dim
        self.n_users = n_users
        self.n_contexts = n_contexts
        self.use_profile = use_profile
        rng = np.random.default_rng([seed, 11])
        bound = 1.0 / np.sqrt(self.dim)
        self.user_table = Parameter(rng.uniform(-bound, bound, size=(n_users, self.dim)), name="emb.user")
        width = interest_width + (2 * self.dim + n_contexts if use_profile else self.dim)
        self.head = MLP(rng, [width, *head_hidden, 1], "head")
        self.aux_weight = 0.0

    # -- subclasses -------------------------------------------------------
    def interest_blocks(self, batch: Batch, trace: dict | None = None) -> list[Tensor]:
        raise NotImplementedError

    def own_parameters(self) -> list[Parameter]:
        return []

    def aux_loss(self, batch: Batch) -> Tensor | None:
        return None

    # -- shared -----------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        params = self.bundle.parameters() + self.own_parameters() + self.head.parameters()
        if self.use_profile:
            params.insert(len(self.bundle.parameters()), self.user_table)
        return params

    def profile_blocks(self, batch: Batch) -> list[Tensor]:
        cand = self.bundle.embed(batch.cand, ALL_FIELDS, "trainable")
        if not self.use_profile:
            return [cand]
        if batch.user.size and (batch.user.min() < 0 or batch.user.max() >= self.n_users):
            raise LookupError(f"user id outside vocabulary of size {self.n_users}")
        if batch.ctx.size and (batch.ctx.min() < 0 or batch.ctx.max() >= self.n_contexts):
            raise LookupError(f"context id outside vocabulary of size {self.n_contexts}")
        ctx = np.eye(self.n_contexts)[batch.ctx]
        return [gather(self.user_table, batch.user), cand, as_tensor(ctx)]

    def logits(self, batch: Batch, trace: dict | None = None) -> Tensor:
        x = concat(self.interest_blocks(batch, trace) + self.profile_blocks(batch), axis=-1)
        return self.head(x).reshape(len(batch))

    def probabilities(self, batch: Batch, trace: dict | None = None) -> Tensor:
        return sigmoid(self.logits(batch, trace))

    def batch_loss(self, examples: Sequence[LabeledExample]) -> Tensor:
        """Mean cross-entropy over the examples, plus the weighted auxiliary term."""
        if not examples:
            raise ValueError("empty batch")
        total = None
        aux = None
        for idx in length_groups(examples):
            batch = collate([examples[i] for i in idx])
            part = bce(self.probabilities(batch), batch.label)
            total = part if total is None else total + part
            if self.aux_weight:
                extra = self.aux_loss(batch)
                if extra is not None:
                    aux = extra if aux is None else aux + extra
        loss = total * (1.0 / len(examples))
        if aux is not None:
            loss = loss + aux * (self.aux_weight / len(examples))
        return loss

    def predict(self, examples: Sequence[LabeledExample], chunk: int = 1024) -> np.ndarray:
        """Click probabilities in input order."""
        out = np.empty(len(examples))
        for idx in length_groups(examples):
            for lo in range(0, len(idx), chunk):
                part = idx[lo:lo + chunk]
                out[part] = self.probabilities(collate([examples[i] for i in part])).data
        return out


def forward(example: LabeledExample, model: CTRModel) -> float:
    """Click probability for one example."""
    return float(model.probabilities(collate([example])).data[0])


def batch_loss(batch: Sequence[LabeledExample], model: CTRModel) -> Tensor:
    return model.batch_loss(batch)
