"""Training loop, AUC / RelaImpr metrics, and the Base-vs-variants comparison."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baseline import MeanPoolModel, VanillaConfig, pretrain_vanilla
from .centers import InterestCenters, init_centers, pretrain_centers
from .data import Dataset
from .diffcore import adam_step, backward, tape
from .features import ChannelFieldSpec, EmbeddingBundle, encode_items
from .mfn import MFNModel
from .nets import CTRModel

log = logging.getLogger(__name__)

VARIANTS = ("base", "mfn", "mfn-no-pretrain", "mfn-no-combination")
METRICS_HEADER = ("variant", "seed", "auc", "logloss", "rela_impr_pct")


class UndefinedMetricError(ValueError):
    """The metric has no value for the given input."""


class RelaImprError(ZeroDivisionError):
    """RelaImpr is undefined when the base AUC equals 0.5."""


@dataclass(frozen=True)
class Metrics:
    auc: float
    logloss: float
    n_examples: int


@dataclass(frozen=True)
class Comparison:
    base_auc: float
    test_auc: float
    rela_impr_percent: float


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for tied scores, O(n log n)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # tie groups: boundaries where the sorted score changes
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_in_group = np.add.reduceat(y, starts)
    size = np.diff(np.r_[starts, len(s)])
    neg_in_group = size - pos_in_group
    neg_below = np.cumsum(neg_in_group) - neg_in_group
    concordant = int((pos_in_group * neg_below).sum())
    tied = int((pos_in_group * neg_in_group).sum())
    return (concordant + 0.5 * tied) / (n_pos * n_neg)


def rela_impr(auc_test: float, auc_base: float) -> float:
    """Relative AUC lift over a base model above the 0.5 floor, in percent."""
    if auc_base == 0.5:
        raise RelaImprError("RelaImpr undefined: base AUC is exactly 0.5")
    return ((auc_test - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def logloss(probs, labels, floor: float = 1e-12) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), floor, 1.0 - floor)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def compare_pair(auc_test: float, auc_base: float) -> Comparison:
    return Comparison(auc_base, auc_test, rela_impr(auc_test, auc_base))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0


def train_model(model: CTRModel, train_set: Dataset, config: TrainConfig) -> list[float]:
    """Shuffled mini-batch Adam; returns the per-step training loss.

    ``max_steps`` > 0 caps the number of updates.
    """
    rng = np.random.default_rng([config.seed, 23])
    params = model.parameters()
    losses: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), config.batch_size):
            if config.max_steps and len(losses) >= config.max_steps:
                return losses
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            with tape():
                loss = model.batch_loss(batch)
                backward(loss)
            adam_step(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
            losses.append(loss.item())
    return losses


def evaluate(model: CTRModel, test_set: Dataset) -> Metrics:
    probs = model.predict(test_set.examples)
    labels = test_set.labels
    return Metrics(auc(probs, labels), logloss(probs, labels), len(labels))


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model skeleton before loading weights."""

    kind: str = "mfn"
    dim: int = 16
    hidden: int = 32
    K: int = 4
    heads: int = 2
    channels: tuple[str, ...] = ("cid", "entities")
    head_hidden: tuple[int, ...] = (64, 32)
    aux_weight: float = 0.0
    finetune_centers: bool = False
    n_users: int = 1
    n_contexts: int = 1
    vocab: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def combination(self) -> bool:
        return self.kind != "mfn-no-combination"

    @property
    def channel_specs(self) -> list[ChannelFieldSpec]:
        return [ChannelFieldSpec.parse(c) for c in self.channels]


def build_model(spec: ModelSpec, fixed: dict[str, np.ndarray] | None, centers: Sequence[InterestCenters] | None) -> CTRModel:
    if spec.kind not in VARIANTS:
        raise ValueError(f"unknown model kind {spec.kind!r}; choose from {VARIANTS}")
    bundle = EmbeddingBundle.create(spec.vocab, spec.dim, spec.seed, fixed=fixed)
    if spec.kind == "base":
        return MeanPoolModel(bundle, spec.n_users, spec.n_contexts, spec.head_hidden, seed=spec.seed)
    if centers is None:
        raise ValueError(f"model {spec.kind!r} needs interest centers (pretrain them or pass a checkpoint)")
    model = MFNModel(bundle, list(centers), spec.n_users, spec.n_contexts, spec.channel_specs, spec.hidden,
                     spec.heads, spec.head_hidden, combination=spec.combination, aux_weight=spec.aux_weight,
                     seed=spec.seed)
    for i, ch in enumerate(model.channels):
        ch.centers.C.name = f"ch{i}.centers"
    model.freeze_centers(not spec.finetune_centers)
    return model


def user_sequences(dataset: Dataset) -> list:
    """One behavior sequence per user (first occurrence), ordered by user id."""
    seen = {}
    for ex in dataset:
        seen.setdefault(ex.user, ex.seq)
    return [seen[u] for u in sorted(seen)]


def embed_user_sequences(bundle: EmbeddingBundle, seqs, spec: ChannelFieldSpec) -> list[np.ndarray]:
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    out: list[np.ndarray] = [None] * len(seqs)  # type: ignore[list-item]
    for n, idx in by_len.items():
        enc = encode_items([it for i in idx for it in seqs[i].items], (len(idx), n))
        emb = bundle.embed(enc, spec, "fixed").data
        for row, i in enumerate(idx):
            out[i] = emb[row]
    return out


@dataclass
class CenterConfig:
    lr: float = 1e-2
    batch_size: int = 64
    max_iters: int = 300
    optimizer: str = "adam"
    init: str = "sample"


def fit_channel_centers(fixed: dict[str, np.ndarray], dataset: Dataset, spec: ModelSpec, config: CenterConfig,
                        random_init: bool = False) -> list[InterestCenters]:
    """Centers per channel from the fixed-embedded user sequences.

    ``random_init`` returns seeded Gaussian centers without any training.
    """
    bundle = EmbeddingBundle.create(spec.vocab, spec.dim, spec.seed, fixed=fixed)
    seqs = user_sequences(dataset)
    out = []
    for i, ch in enumerate(spec.channel_specs):
        corpus = embed_user_sequences(bundle, seqs, ch)
        seed = spec.seed * 1000 + i
        if random_init:
            c = InterestCenters.from_array(init_centers(corpus, spec.K, seed, "random"))
        else:
            c = pretrain_centers(corpus, spec.K, lr=config.lr, batch_size=config.batch_size, max_iters=config.max_iters,
                                 seed=seed, optimizer=config.optimizer, init=config.init, eval_every=50)
        c.C.name = f"ch{i}.centers"
        out.append(c)
    return out


# ---------------------------------------------------------------------------
# comparison protocol


@dataclass
class CompareRow:
    variant: str
    seed: int
    auc: float
    logloss: float
    rela_impr_pct: float


def run_seed(variants: Sequence[str], train_set: Dataset, test_set: Dataset, spec: ModelSpec, seed: int,
             train_cfg: TrainConfig, vanilla_cfg: VanillaConfig, center_cfg: CenterConfig,
             curves: dict | None = None) -> list[CompareRow]:
    """Base first, then each MFN variant, all on one seed."""
    spec = ModelSpec(**{**spec.__dict__, "seed": seed})
    needs_mfn = any(v != "base" for v in variants)
    fixed = None
    pretrained = random_c = None
    if needs_mfn:
        fixed = pretrain_vanilla(train_set, VanillaConfig(**{**vanilla_cfg.__dict__, "seed": seed, "vocab": spec.vocab, "dim": spec.dim}))
        if any(v in ("mfn", "mfn-no-combination") for v in variants):
            pretrained = fit_channel_centers(fixed, train_set, spec, center_cfg)
        if "mfn-no-pretrain" in variants:
            random_c = fit_channel_centers(fixed, train_set, spec, center_cfg, random_init=True)

    results: dict[str, Metrics] = {}
    order = ["base"] + [v for v in variants if v != "base"]
    cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
    for variant in order:
        vspec = ModelSpec(**{**spec.__dict__, "kind": variant})
        if variant == "base":
            model = build_model(vspec, fixed, None)
        else:
            source = random_c if variant == "mfn-no-pretrain" else pretrained
            model = build_model(vspec, fixed, [InterestCenters.from_array(c.C.data) for c in source])
        losses = train_model(model, train_set, cfg)
        if curves is not None:
            curves[(variant, seed)] = losses
        results[variant] = evaluate(model, test_set)
        log.info("seed %d %s auc=%.4f", seed, variant, results[variant].auc)
    base_auc = results["base"].auc
    return [
        CompareRow(v, seed, results[v].auc, results[v].logloss, rela_impr(results[v].auc, base_auc))
        for v in order
        if v in variants or v == "base"
    ]


def compare(variants: Sequence[str], train_set: Dataset, test_set: Dataset, seeds: Sequence[int], spec: ModelSpec,
            train_cfg: TrainConfig, vanilla_cfg: VanillaConfig, center_cfg: CenterConfig,
            curves: dict | None = None) -> list[CompareRow]:
    if not seeds:
        raise ValueError("compare needs at least one seed")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")
    rows: list[CompareRow] = []
    for seed in seeds:
        rows.extend(run_seed(variants, train_set, test_set, spec, seed, train_cfg, vanilla_cfg, center_cfg, curves))
    return rows


def summarize(rows: Sequence[CompareRow]) -> list[tuple[str, float, float]]:
    """(variant, mean AUC, mean RelaImpr) in first-seen order."""
    out = []
    for v in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == v]
        out.append((v, float(np.mean([r.auc for r in sel])), float(np.mean([r.rela_impr_pct for r in sel]))))
    return out


def write_metrics_csv(rows: Sequence[CompareRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.variant, r.seed, repr(r.auc), repr(r.logloss), repr(r.rela_impr_pct)])


def write_loss_curve(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def format_table(rows: Sequence[CompareRow]) -> str:
    w = max([len(r.variant) + 7 for r in rows] + [22])
    lines = [f"{'variant':<{w}}{'seed':>6}{'auc':>10}{'logloss':>10}{'RelaImpr':>11}"]
    for r in rows:
        lines.append(f"{r.variant:<{w}}{r.seed:>6}{r.auc:>10.4f}{r.logloss:>10.4f}{r.rela_impr_pct:>10.2f}%")
    if len({r.seed for r in rows}) > 1:
        lines.append("")
        for v, a, ri in summarize(rows):
            lines.append(f"{v + ' (mean)':<{w}}{'':>6}{a:>10.4f}{'':>10}{ri:>10.2f}%")
    return "\n".join(lines)
