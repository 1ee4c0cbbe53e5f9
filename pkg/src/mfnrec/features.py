"""Item fields, the fixed/trainable embedding pair and the embedding text format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffcore import Parameter, Tensor, as_tensor, gather

ITEM_FIELDS = ("iid", "cid", "sid", "bid", "entities")
ID_FIELDS = ("iid", "cid", "sid", "bid")


class VocabularyError(LookupError):
    """An id falls outside its field's vocabulary."""

    def __init__(self, field_name: str, value: int, size: int):
        super().__init__(f"{field_name} id {value} outside vocabulary of size {size}")
        self.field_name = field_name
        self.value = value


class EmbeddingFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class ItemRecord:
    iid: int
    cid: int
    sid: int
    bid: int
    entities: tuple[int, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "ItemRecord":
        return cls(int(d["iid"]), int(d["cid"]), int(d["sid"]), int(d["bid"]), tuple(int(e) for e in d["entities"]))

    def to_dict(self) -> dict:
        return {"iid": self.iid, "cid": self.cid, "sid": self.sid, "bid": self.bid, "entities": list(self.entities)}


@dataclass(frozen=True)
class BehaviorSequence:
    items: tuple[ItemRecord, ...]
    archetypes: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.items:
            raise ValueError("behavior sequence must hold at least one item")
        if self.archetypes is not None and len(self.archetypes) != len(self.items):
            raise ValueError("one archetype tag per item required")

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class ChannelFieldSpec:
    fields: tuple[str, ...]

    def __post_init__(self):
        if not self.fields:
            raise ValueError("a channel must embed at least one field")
        bad = [f for f in self.fields if f not in ITEM_FIELDS]
        if bad:
            raise ValueError(f"unknown item fields {bad}; choose from {ITEM_FIELDS}")
        # canonical order keeps the summation order fixed
        object.__setattr__(self, "fields", tuple(f for f in ITEM_FIELDS if f in self.fields))

    @classmethod
    def parse(cls, text: str) -> "ChannelFieldSpec":
        return cls(tuple(t.strip() for t in text.split("+") if t.strip()))

    def __str__(self):
        return "+".join(self.fields)


ALL_FIELDS = ChannelFieldSpec(ITEM_FIELDS)


@dataclass
class EncodedItems:
    """Integer index arrays for a block of items of any leading shape."""

    ids: dict[str, np.ndarray]
    ent_idx: np.ndarray
    ent_weight: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ids["iid"].shape


def encode_items(items, shape: tuple[int, ...] | None = None) -> EncodedItems:
    """Pack a flat iterable of ItemRecord into index arrays, reshaped to ``shape``."""
    items = list(items)
    shape = (len(items),) if shape is None else tuple(shape)
    ids = {f: np.array([getattr(it, f) for it in items], dtype=np.int64).reshape(shape) for f in ID_FIELDS}
    width = max((len(it.entities) for it in items), default=0)
    ent_idx = np.zeros((len(items), width), dtype=np.int64)
    ent_w = np.zeros((len(items), width))
    for r, it in enumerate(items):
        n = len(it.entities)
        if n:
            ent_idx[r, :n] = it.entities
            ent_w[r, :n] = 1.0 / n
    return EncodedItems(ids, ent_idx.reshape(shape + (width,)), ent_w.reshape(shape + (width,)))


def init_table(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=(rows, dim))


@dataclass
class EmbeddingBundle:
    """Frozen pretrained tables next to trainable tables over the same vocabularies."""

    fixed: dict[str, np.ndarray]
    trainable: dict[str, Parameter]
    dim: int

    def __post_init__(self):
        if set(self.fixed) != set(self.trainable):
            raise ValueError("fixed and trainable tables must cover the same fields")
        for name, table in self.fixed.items():
            if table.shape != self.trainable[name].shape or table.shape[1] != self.dim:
                raise ValueError(f"table {name!r} shape mismatch")
            table.flags.writeable = False

    @classmethod
    def create(cls, vocab: Mapping[str, int], dim: int, seed: int, fixed: Mapping[str, np.ndarray] | None = None):
        """Seeded uniform trainable tables; fixed tables default to another seeded draw."""
        rng = np.random.default_rng(seed)
        trainable = {f: Parameter(init_table(rng, vocab[f], dim), name=f"emb.{f}") for f in ITEM_FIELDS}
        if fixed is None:
            frng = np.random.default_rng([seed, 1])
            fixed = {f: init_table(frng, vocab[f], dim) for f in ITEM_FIELDS}
        fixed = {f: np.array(fixed[f], dtype=np.float64, copy=True) for f in ITEM_FIELDS}
        return cls(fixed, trainable, dim)

    @property
    def vocab(self) -> dict[str, int]:
        return {f: t.shape[0] for f, t in self.fixed.items()}

    def parameters(self) -> list[Parameter]:
        return [self.trainable[f] for f in ITEM_FIELDS]

    def check(self, enc: EncodedItems, spec: ChannelFieldSpec) -> None:
        for f in spec.fields:
            arr = enc.ent_idx[enc.ent_weight > 0] if f == "entities" else enc.ids[f]
            size = self.fixed[f].shape[0]
            if arr.size and (arr.min() < 0 or arr.max() >= size):
                bad = int(arr[(arr < 0) | (arr >= size)].flat[0])
                raise VocabularyError(f, bad, size)

    def embed(self, enc: EncodedItems, spec: ChannelFieldSpec, which: str = "trainable") -> Tensor:
        """Sum of selected field embeddings; entities contribute their mean."""
        if which not in ("fixed", "trainable"):
            raise ValueError(f"which must be 'fixed' or 'trainable', got {which!r}")
        self.check(enc, spec)
        tables = self.fixed if which == "fixed" else self.trainable
        out = None
        for f in spec.fields:
            if f == "entities":
                if enc.ent_idx.shape[-1] == 0:
                    part = as_tensor(np.zeros(enc.shape + (self.dim,)))
                else:
                    rows = gather(tables[f], enc.ent_idx)
                    part = (rows * enc.ent_weight[..., None]).sum(axis=-2)
            else:
                part = gather(tables[f], enc.ids[f])
            out = part if out is None else out + part
        return out

    def embed_item(self, item: ItemRecord, spec: ChannelFieldSpec, which: str = "trainable") -> np.ndarray:
        return self.embed(encode_items([item]), spec, which).data[0]

    def embed_sequence(self, seq: BehaviorSequence | Sequence[ItemRecord], spec: ChannelFieldSpec, which: str = "trainable") -> np.ndarray:
        items = seq.items if isinstance(seq, BehaviorSequence) else tuple(seq)
        if not items:
            raise ValueError("empty behavior sequence")
        return self.embed(encode_items(items), spec, which).data


# ---------------------------------------------------------------------------
# embedding text format


def _fmt(row: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in row)


def format_embedding_block(rows: Sequence[tuple[str, np.ndarray]], dim: int) -> list[str]:
    lines = [f"{len(rows)} {dim}"]
    lines.extend(f"{tok} {_fmt(vec)}" for tok, vec in rows)
    return lines


def tables_to_rows(tables: Mapping[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    rows = []
    for name, table in tables.items():
        table = np.asarray(table)
        rows.extend((f"{name}:{i}", table[i]) for i in range(table.shape[0]))
    return rows


def parse_embedding_block(lines: Sequence[str], first_lineno: int = 1) -> tuple[list[tuple[str, np.ndarray]], int]:
    """Parse one header-plus-rows block; returns the rows and lines consumed.

    Lines past the declared row count are left for the caller.
    """
    if not lines:
        raise EmbeddingFormatError(first_lineno, "missing header")
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise EmbeddingFormatError(first_lineno, f"malformed header {lines[0]!r}")
    count, dim = int(header[0]), int(header[1])
    rows: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for k in range(count):
        lineno = first_lineno + 1 + k
        if k + 1 >= len(lines):
            raise EmbeddingFormatError(lineno, f"expected {count} rows, file ended after {k}")
        parts = lines[k + 1].split()
        if not parts:
            raise EmbeddingFormatError(lineno, "blank row")
        tok, vals = parts[0], parts[1:]
        if len(vals) != dim:
            raise EmbeddingFormatError(lineno, f"token {tok!r} has {len(vals)} values, header says {dim}")
        if tok in seen:
            raise EmbeddingFormatError(lineno, f"duplicate token {tok!r}")
        seen.add(tok)
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError:
            raise EmbeddingFormatError(lineno, f"non-numeric value in row {tok!r}") from None
        rows.append((tok, vec))
    return rows, count + 1


def rows_to_tables(rows: Sequence[tuple[str, np.ndarray]], dim: int, lineno: int = 1) -> dict[str, np.ndarray]:
    grouped: dict[str, dict[int, np.ndarray]] = {}
    for k, (tok, vec) in enumerate(rows):
        name, sep, idx = tok.rpartition(":")
        if not sep or not idx.isdigit():
            raise EmbeddingFormatError(lineno + 1 + k, f"token {tok!r} is not '<field>:<id>'")
        grouped.setdefault(name, {})[int(idx)] = vec
    tables = {}
    for name, by_id in grouped.items():
        n = max(by_id) + 1
        if len(by_id) != n:
            missing = sorted(set(range(n)) - set(by_id))[0]
            raise EmbeddingFormatError(lineno, f"field {name!r} is missing id {missing}")
        tables[name] = np.stack([by_id[i] for i in range(n)]) if n else np.zeros((0, dim))
    return tables


def save_embeddings(tables: Mapping[str, np.ndarray], path) -> None:
    tables = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in tables.items()}
    dims = {t.shape[1] for t in tables.values()}
    if len(dims) != 1:
        raise ValueError(f"all tables must share one dimension, got {sorted(dims)}")
    lines = format_embedding_block(tables_to_rows(tables), dims.pop())
    Path(path).write_text("\n".join(lines) + "\n")


def load_embeddings(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    rows, used = parse_embedding_block(lines)
    extra = [i for i in range(used, len(lines)) if lines[i].strip()]
    if extra:
        raise EmbeddingFormatError(extra[0] + 1, f"{len(lines) - used} rows beyond the declared count")
    dim = int(lines[0].split()[1])
    return rows_to_tables(rows, dim)


def pretrain_fixed_embeddings(corpus, config):
    """Train the vanilla mean-pool CTR model and return its item tables, frozen."""
    from .baseline import pretrain_vanilla

    return pretrain_vanilla(corpus, config)
