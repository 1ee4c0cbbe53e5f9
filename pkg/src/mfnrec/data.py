"""Labeled CTR examples, the JSONL dataset format and batch collation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .features import BehaviorSequence, EncodedItems, ItemRecord, encode_items


class DatasetError(ValueError):
    """A dataset file or record does not follow the JSONL contract."""


@dataclass(frozen=True)
class LabeledExample:
    user: int
    seq: BehaviorSequence
    cand: ItemRecord
    ctx: int
    label: int

    def to_json(self) -> str:
        arch = self.seq.archetypes or (0,) * len(self.seq)
        seq = [dict(it.to_dict(), arch=a) for it, a in zip(self.seq.items, arch)]
        obj = {"user": self.user, "seq": seq, "cand": self.cand.to_dict(), "ctx": self.ctx, "label": self.label}
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj: dict) -> "LabeledExample":
        items = tuple(ItemRecord.from_dict(d) for d in obj["seq"])
        arch = tuple(int(d.get("arch", 0)) for d in obj["seq"])
        label = int(obj["label"])
        if label not in (0, 1):
            raise DatasetError(f"label must be 0 or 1, got {label}")
        return cls(int(obj["user"]), BehaviorSequence(items, arch), ItemRecord.from_dict(obj["cand"]), int(obj["ctx"]), label)


class Dataset(Sequence[LabeledExample]):
    def __init__(self, examples: Sequence[LabeledExample]):
        self.examples = list(examples)

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.examples[i])
        return self.examples[i]

    def __iter__(self) -> Iterator[LabeledExample]:
        return iter(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def subset(self, index) -> "Dataset":
        return Dataset([self.examples[i] for i in index])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for ex in self.examples:
                fh.write(ex.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
        examples = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    examples.append(LabeledExample.from_obj(json.loads(line)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        return cls(examples)


@dataclass
class Batch:
    """Equal-length examples packed into arrays."""

    user: np.ndarray
    seq: EncodedItems
    cand: EncodedItems
    ctx: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.user)


def collate(examples: Sequence[LabeledExample]) -> Batch:
    lengths = {len(ex.seq) for ex in examples}
    if len(lengths) != 1:
        raise ValueError(f"collate needs equal sequence lengths, got {sorted(lengths)}")
    n = lengths.pop()
    flat = [it for ex in examples for it in ex.seq.items]
    return Batch(
        user=np.array([ex.user for ex in examples], dtype=np.int64),
        seq=encode_items(flat, (len(examples), n)),
        cand=encode_items([ex.cand for ex in examples]),
        ctx=np.array([ex.ctx for ex in examples], dtype=np.int64),
        label=np.array([ex.label for ex in examples], dtype=np.float64),
    )


def length_groups(examples: Sequence[LabeledExample]) -> list[np.ndarray]:
    """Positions of examples grouped by sequence length, shortest first."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_len.setdefault(len(ex.seq), []).append(i)
    return [np.array(by_len[k]) for k in sorted(by_len)]
