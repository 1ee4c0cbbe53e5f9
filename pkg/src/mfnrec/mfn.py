"""Multi-interest network: similarity interests, combination interests,
candidate-aware aggregation and the CTR head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .centers import InterestCenters, assignment_probs, entropy_loss_terms
from .data import Batch
from .diffcore import DimensionError, Parameter, Tensor, as_tensor, concat, glorot, matmul, softmax, swish
from .features import ChannelFieldSpec, EmbeddingBundle
from .nets import CTRModel, MLP

DEFAULT_CHANNELS = (ChannelFieldSpec(("cid",)), ChannelFieldSpec(("entities",)))


class ConfigError(ValueError):
    pass


class MsaParams:
    """Query/key/value/output projections of multi-head self-attention."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, name: str = "msa"):
        if heads < 1 or dim % heads:
            raise ConfigError(f"{heads} heads do not divide dimension {dim}")
        self.heads = heads
        self.dim = dim
        self.wq, self.wk, self.wv, self.wo = (
            Parameter(glorot(rng, dim, dim), name=f"{name}.{k}") for k in ("wq", "wk", "wv", "wo")
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nl = len(lead)
    return x.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, h * dh)


def msa(x, params: MsaParams, trace: dict | None = None) -> Tensor:
    """Scaled dot-product self-attention over the sequence axis, no positions."""
    x = as_tensor(x)
    if x.shape[-1] != params.dim:
        raise DimensionError(f"input width {x.shape[-1]} does not match attention dim {params.dim}")
    h = params.heads
    q = _split_heads(matmul(x, params.wq), h)
    k = _split_heads(matmul(x, params.wk), h)
    v = _split_heads(matmul(x, params.wv), h)
    scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(params.dim // h))
    attn = softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("msa", []).append(attn.data)
    return matmul(_merge_heads(matmul(attn, v)), params.wo)


class ChannelParams:
    """Everything one channel owns: centers, attention, combination and aggregation weights."""

    def __init__(self, rng: np.random.Generator, spec: ChannelFieldSpec, centers: InterestCenters,
                 dim: int, hidden: int, heads: int, name: str):
        if centers.dim != dim:
            raise DimensionError(f"centers have width {centers.dim}, channel dim is {dim}")
        self.spec = spec
        self.centers = centers
        self.name = name
        self.msa = MsaParams(rng, dim, heads, name=f"{name}.msa")
        self.W1 = Parameter(glorot(rng, hidden, dim), name=f"{name}.W1")
        self.W2 = Parameter(glorot(rng, hidden, centers.K), name=f"{name}.W2")
        self.agg_sim = MLP(rng, [2 * dim, hidden, 1], f"{name}.agg_sim", out_bias=False)
        self.agg_comb = MLP(rng, [2 * dim, hidden, 1], f"{name}.agg_comb", out_bias=False)

    @property
    def K(self) -> int:
        return self.centers.K

    def parameters(self, combination: bool = True) -> list[Parameter]:
        params = [self.centers.C]
        if combination:
            params += self.msa.parameters() + [self.W1, self.W2]
        params += self.agg_sim.parameters()
        if combination:
            params += self.agg_comb.parameters()
        return params


@dataclass
class InterestMatrix:
    R_s: Tensor
    R_c: Tensor | None

    @property
    def stacked(self) -> Tensor:
        return self.R_s if self.R_c is None else concat([self.R_s, self.R_c], axis=-2)


def similarity_interests(seq_fixed, seq_trainable, centers: InterestCenters, trace: dict | None = None) -> Tensor:
    """R_s = P^T E_trainable, with P from the frozen embeddings and the centers."""
    seq_fixed, seq_trainable = as_tensor(seq_fixed), as_tensor(seq_trainable)
    if seq_fixed.shape != seq_trainable.shape:
        raise DimensionError(f"fixed {seq_fixed.shape} and trainable {seq_trainable.shape} sequences differ")
    P = assignment_probs(seq_fixed, centers)
    if trace is not None:
        trace.setdefault("P", []).append(P.data)
    return matmul(P.transpose(), seq_trainable)


def combination_weights(seq_trainable, params: ChannelParams, trace: dict | None = None) -> Tensor:
    """K x N matrix whose rows are distributions over the behaviors."""
    H = msa(seq_trainable, params.msa, trace)
    hidden = swish(matmul(H, params.W1.transpose()))
    return softmax(matmul(hidden, params.W2).transpose(), axis=-1)


def combination_interests(seq_trainable, params: ChannelParams, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    seq_trainable = as_tensor(seq_trainable)
    A = combination_weights(seq_trainable, params, trace)
    if trace is not None:
        trace.setdefault("A", []).append(A.data)
    return matmul(A, seq_trainable), A


def _group_weights(ffn: MLP, rows: Tensor, candidate: Tensor) -> Tensor:
    k = rows.shape[-2]
    cand = candidate.reshape(*candidate.shape[:-1], 1, candidate.shape[-1]) * np.ones((k, 1))
    logits = ffn(concat([rows, cand], axis=-1))
    return softmax(logits.reshape(*logits.shape[:-1]), axis=-1)


def aggregate(interests: InterestMatrix, candidate, params: ChannelParams, trace: dict | None = None) -> Tensor:
    """Candidate-aware pooling; each interest group gets its own softmax weights."""
    candidate = as_tensor(candidate)
    w1 = _group_weights(params.agg_sim, interests.R_s, candidate)
    out = matmul(w1.reshape(*w1.shape[:-1], 1, w1.shape[-1]), interests.R_s)
    if trace is not None:
        trace.setdefault("w1", []).append(w1.data)
    if interests.R_c is not None:
        w2 = _group_weights(params.agg_comb, interests.R_c, candidate)
        out = out + matmul(w2.reshape(*w2.shape[:-1], 1, w2.shape[-1]), interests.R_c)
        if trace is not None:
            trace.setdefault("w2", []).append(w2.data)
    return out.reshape(*out.shape[:-2], out.shape[-1])


class MFNModel(CTRModel):
    kind = "mfn"

    def __init__(self, bundle: EmbeddingBundle, channel_centers: Sequence[InterestCenters], n_users: int,
                 n_contexts: int, channels: Sequence[ChannelFieldSpec] = DEFAULT_CHANNELS, hidden: int = 32,
                 heads: int = 2, head_hidden: Sequence[int] = (64, 32), combination: bool = True,
                 aux_weight: float = 0.0, seed: int = 0):
        if len(channel_centers) != len(channels):
            raise ConfigError(f"{len(channels)} channels but {len(channel_centers)} center sets")
        super().__init__(bundle, n_users, n_contexts, len(channels) * bundle.dim, head_hidden, seed)
        rng = np.random.default_rng([seed, 13])
        self.combination = combination
        self.aux_weight = aux_weight
        self.hidden = hidden
        self.heads = heads
        self.channels = [
            ChannelParams(rng, spec, c, bundle.dim, hidden, heads, name=f"ch{i}")
            for i, (spec, c) in enumerate(zip(channels, channel_centers))
        ]

    def own_parameters(self) -> list[Parameter]:
        return [p for ch in self.channels for p in ch.parameters(self.combination)]

    def channel_interests(self, ch: ChannelParams, batch: Batch, trace: dict | None = None) -> tuple[InterestMatrix, Tensor]:
        fixed = self.bundle.embed(batch.seq, ch.spec, "fixed")
        trainable = self.bundle.embed(batch.seq, ch.spec, "trainable")
        R_s = similarity_interests(fixed, trainable, ch.centers, trace)
        R_c = combination_interests(trainable, ch, trace)[0] if self.combination else None
        return InterestMatrix(R_s, R_c), trainable

    def interest_blocks(self, batch: Batch, trace: dict | None = None) -> list[Tensor]:
        out = []
        for ch in self.channels:
            interests, _ = self.channel_interests(ch, batch, trace)
            cand = self.bundle.embed(batch.cand, ch.spec, "trainable")
            out.append(aggregate(interests, cand, ch, trace))
        return out

    def aux_loss(self, batch: Batch) -> Tensor | None:
        """Summed entropy loss of the assignment matrices over the batch and channels."""
        total = None
        for ch in self.channels:
            fixed = self.bundle.embed(batch.seq, ch.spec, "fixed")
            part = entropy_loss_terms(assignment_probs(fixed, ch.centers))[2].sum()
            total = part if total is None else total + part
        return total

    def freeze_centers(self, frozen: bool = True) -> None:
        for ch in self.channels:
            ch.centers.C.freeze(frozen)
