"""Interest centers trained by entropy regularization over soft assignments."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    clamp,
    log,
    matmul,
    sgd_step,
    softmax_rows,
    tape,
)

log_ = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class InterestCenters:
    C: Parameter
    history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.C.shape[0]

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    @classmethod
    def from_array(cls, values, frozen: bool = True, name: str = "centers") -> "InterestCenters":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"centers need shape (K>=1, d), got {values.shape}")
        return cls(Parameter(values, name=name, frozen=frozen))


@dataclass(frozen=True)
class EntropyLossParts:
    l_se: float
    l_me: float
    l_e: float


def assignment_probs(seq_fixed, centers: InterestCenters | Parameter | Tensor) -> Tensor:
    """Soft assignment of each behavior to each center, rows summing to one."""
    C = centers.C if isinstance(centers, InterestCenters) else as_tensor(centers)
    seq_fixed = as_tensor(seq_fixed)
    if seq_fixed.shape[-1] != C.shape[-1]:
        raise DimensionError(f"behavior dim {seq_fixed.shape} does not match centers {C.shape}")
    return softmax_rows(matmul(seq_fixed, C.transpose()))


def entropy_loss_terms(P) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable (l_se, l_me, l_e) for P of shape (..., N, K)."""
    P = as_tensor(P)
    N, K = P.shape[-2], P.shape[-1]
    row_err = np.abs(P.data.sum(axis=-1) - 1.0).max()
    if row_err > 1e-6:
        raise ContractError(f"rows of P must sum to 1 (max deviation {row_err:.3g})")
    cell = P * log(clamp(P, LOG_FLOOR, np.inf))
    l_se = cell.sum(axis=(-2, -1)) * (-1.0 / (K * N))
    m = P.sum(axis=-2) * (1.0 / N)
    l_me = (m * log(clamp(m, LOG_FLOOR, np.inf))).sum(axis=-1) * (-1.0 / K)
    return l_se, l_me, l_se - l_me


def entropy_losses(P) -> EntropyLossParts:
    """Entropy parts for a single N x K assignment matrix."""
    P = as_tensor(P)
    if P.ndim != 2:
        raise DimensionError(f"expected an N x K matrix, got shape {P.shape}")
    l_se, l_me, l_e = entropy_loss_terms(P)
    return EntropyLossParts(l_se.item(), l_me.item(), l_e.item())


def _stack_corpus(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray):
        if corpus.ndim != 3:
            raise DimensionError(f"corpus array must be (M, N, d), got {corpus.shape}")
        return list(corpus)
    return [np.asarray(s, dtype=np.float64) for s in corpus]


def batch_entropy_loss(seqs: Sequence[np.ndarray], C) -> Tensor:
    """Mean l_e over a list of sequences, grouped by length for batching."""
    total = None
    by_len: dict[int, list[np.ndarray]] = {}
    for s in seqs:
        by_len.setdefault(s.shape[0], []).append(s)
    for n in sorted(by_len):
        P = assignment_probs(np.stack(by_len[n]), C)
        part = entropy_loss_terms(P)[2].sum()
        total = part if total is None else total + part
    return total * (1.0 / len(seqs))


def init_centers(corpus, K: int, seed: int, method: str = "sample") -> np.ndarray:
    """Initial center rows: distinct behaviors sampled from the corpus, or Gaussian noise."""
    seqs = _stack_corpus(corpus)
    rows = np.concatenate(seqs, axis=0)
    rng = np.random.default_rng(seed)
    if method == "random":
        scale = float(np.sqrt(np.mean(rows**2)))
        return rng.normal(0.0, scale, size=(K, rows.shape[1]))
    if method != "sample":
        raise ValueError(f"unknown center init {method!r}")
    uniq = np.unique(rows, axis=0)
    if len(uniq) < K:
        extra = uniq[rng.integers(len(uniq), size=K - len(uniq))]
        return np.concatenate([uniq, extra + rng.normal(0.0, 1e-3, size=extra.shape)])
    # D^2-weighted draws without replacement: duplicates in one cluster stall training
    chosen = [int(rng.integers(len(uniq)))]
    d2 = ((uniq - uniq[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(K - 1):
        total = d2.sum()
        probs = d2 / total if total > 0 else None
        j = int(rng.choice(len(uniq), p=probs))
        chosen.append(j)
        d2 = np.minimum(d2, ((uniq - uniq[j]) ** 2).sum(axis=1))
    return uniq[chosen].copy()


def pretrain_centers(
    corpus,
    K: int,
    lr: float = 1e-4,
    batch_size: int = 64,
    max_iters: int = 1000,
    seed: int = 0,
    optimizer: str = "adam",
    init: str = "sample",
    eval_every: int = 0,
    eval_size: int = 256,
) -> InterestCenters:
    """Fit a global K x d center matrix by minimizing l_e over user mini-batches.

    Each iteration samples ``batch_size`` users uniformly without replacement,
    averages l_e over them and takes one optimizer step on the centers.  When
    ``eval_every`` is positive the mean l_e on a fixed evaluation sample is
    recorded in ``history`` at iteration 0, every ``eval_every`` iterations
    and at the end.
    """
    seqs = _stack_corpus(corpus)
    if not seqs:
        raise ValueError("center pretraining needs a nonempty corpus")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    M = len(seqs)
    if batch_size > M:
        log_.warning("batch size %d exceeds %d users; clamping", batch_size, M)
        batch_size = M
    rng = np.random.default_rng([seed, 7])
    centers = InterestCenters.from_array(init_centers(seqs, K, seed, init), frozen=False)
    eval_idx = np.sort(rng.choice(M, size=min(eval_size, M), replace=False))
    eval_seqs = [seqs[i] for i in eval_idx]

    def record(it):
        value = batch_entropy_loss(eval_seqs, centers.C).item()
        centers.history.append((it, value))

    if eval_every:
        record(0)
    for it in range(1, max_iters + 1):
        batch = rng.choice(M, size=batch_size, replace=False)
        with tape():
            loss = batch_entropy_loss([seqs[i] for i in batch], centers.C)
            backward(loss)
        if optimizer == "adam":
            adam_step([centers.C], lr=lr)
        elif optimizer == "sgd":
            sgd_step([centers.C], lr=lr)
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        if eval_every and (it % eval_every == 0 or it == max_iters):
            if centers.history[-1][0] != it:
                record(it)
    centers.C.freeze(True)
    return centers


def hard_assign(centers: InterestCenters, behaviors) -> np.ndarray:
    behaviors = np.asarray(behaviors, dtype=np.float64)
    return np.argmax(assignment_probs(behaviors, centers).data, axis=-1)


def purity(centers: InterestCenters, embedded_behaviors, labels) -> float:
    """Share of behaviors matching the majority true label of their assigned center."""
    labels = np.asarray(labels).reshape(-1)
    behaviors = np.asarray(embedded_behaviors, dtype=np.float64).reshape(-1, centers.dim)
    if len(labels) != len(behaviors):
        raise DimensionError(f"{len(behaviors)} behaviors but {len(labels)} labels")
    if len(labels) == 0:
        return 0.0
    assigned = hard_assign(centers, behaviors)
    hits = 0
    for j in np.unique(assigned):
        _, counts = np.unique(labels[assigned == j], return_counts=True)
        hits += int(counts.max())
    return hits / len(labels)


def max_entropy_bound(K: int) -> float:
    return math.log(K) / K
