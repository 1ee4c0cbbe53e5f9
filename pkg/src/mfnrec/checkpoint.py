"""Single-file model checkpoints built from embedding-format sections.

Layout::

    @config
    key=value            (model skeleton, then the echoed run config)
    @section fixed
    <rows> <dim>
    iid:0 v1 ... vd
    @section param <name>
    <rows> <cols>
    row:0 v1 ...

Values use shortest round-trip float repr, so loading restores bit-identical
weights.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .centers import InterestCenters
from .features import (
    ITEM_FIELDS,
    EmbeddingFormatError,
    format_embedding_block,
    load_embeddings,
    parse_embedding_block,
    rows_to_tables,
    save_embeddings,
    tables_to_rows,
)
from .nets import CTRModel
from .traineval import ModelSpec, build_model

MAGIC = "#mfnrec-checkpoint 1"


def _spec_lines(spec: ModelSpec) -> list[str]:
    d = dict(spec.__dict__)
    d["channels"] = ",".join(spec.channels)
    d["head_hidden"] = ",".join(str(h) for h in spec.head_hidden)
    d["vocab"] = json.dumps(spec.vocab, sort_keys=True, separators=(",", ":"))
    return [f"model.{k}={d[k]}" for k in sorted(d)]


def _parse_spec(kv: Mapping[str, str]) -> ModelSpec:
    m = {k[len("model."):]: v for k, v in kv.items() if k.startswith("model.")}
    return ModelSpec(
        kind=m["kind"],
        dim=int(m["dim"]),
        hidden=int(m["hidden"]),
        K=int(m["K"]),
        heads=int(m["heads"]),
        channels=tuple(c for c in m["channels"].split(",") if c),
        head_hidden=tuple(int(h) for h in m["head_hidden"].split(",") if h),
        aux_weight=float(m["aux_weight"]),
        finetune_centers=m["finetune_centers"] == "True",
        n_users=int(m["n_users"]),
        n_contexts=int(m["n_contexts"]),
        vocab=json.loads(m["vocab"]),
        seed=int(m["seed"]),
    )


def _matrix_rows(values: np.ndarray) -> list[tuple[str, np.ndarray]]:
    values = np.atleast_2d(values)
    return [(f"row:{i}", values[i]) for i in range(values.shape[0])]


def save_checkpoint(model: CTRModel, spec: ModelSpec, path, run_config: Mapping[str, object] | None = None) -> None:
    lines = [MAGIC, "@config"] + _spec_lines(spec)
    for k, v in (run_config or {}).items():
        lines.append(f"run.{k}={v}")
    lines.append("@section fixed")
    lines += format_embedding_block(tables_to_rows(model.bundle.fixed), model.dim)
    for p in model.parameters():
        if not p.name:
            raise ValueError("every parameter needs a name to be checkpointed")
        lines.append(f"@section param {p.name}")
        rows = _matrix_rows(p.data)
        lines += format_embedding_block(rows, rows[0][1].shape[0])
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[CTRModel, ModelSpec, dict[str, str]]:
    """Rebuild the model skeleton from the config echo and fill in every weight."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise EmbeddingFormatError(1, "not a model checkpoint")
    kv: dict[str, str] = {}
    i = 2
    while i < len(lines) and not lines[i].startswith("@section"):
        key, sep, value = lines[i].partition("=")
        if not sep:
            raise EmbeddingFormatError(i + 1, f"expected key=value, got {lines[i]!r}")
        kv[key] = value
        i += 1
    spec = _parse_spec(kv)
    sections: dict[str, np.ndarray | dict] = {}
    while i < len(lines):
        header = lines[i]
        if not header.startswith("@section "):
            raise EmbeddingFormatError(i + 1, f"expected a section header, got {header!r}")
        name = header[len("@section "):]
        rows, used = parse_embedding_block(lines[i + 1:], first_lineno=i + 2)
        dim = int(lines[i + 1].split()[1])
        if name == "fixed":
            sections[name] = rows_to_tables(rows, dim, lineno=i + 2)
        else:
            sections[name] = np.stack([v for _, v in rows]) if rows else np.zeros((0, dim))
        i += 1 + used

    fixed = sections.pop("fixed")
    centers = None
    if spec.kind != "base":
        centers = [InterestCenters.from_array(sections[f"param ch{c}.centers"]) for c in range(len(spec.channels))]
    model = build_model(spec, fixed, centers)
    for p in model.parameters():
        key = f"param {p.name}"
        if key not in sections:
            raise EmbeddingFormatError(len(lines), f"checkpoint lacks parameter {p.name!r}")
        p.data[...] = sections[key].reshape(p.shape)
    run = {k[len("run."):]: v for k, v in kv.items() if k.startswith("run.")}
    return model, spec, run


def save_centers(centers: InterestCenters, path) -> None:
    save_embeddings({"center": centers.C.data}, path)


def load_centers(path) -> InterestCenters:
    tables = load_embeddings(path)
    if set(tables) != {"center"}:
        raise EmbeddingFormatError(1, f"expected only center:<j> tokens, found fields {sorted(tables)}")
    return InterestCenters.from_array(tables["center"])


def load_fixed_tables(path) -> dict[str, np.ndarray]:
    tables = load_embeddings(path)
    missing = [f for f in ITEM_FIELDS if f not in tables]
    if missing:
        raise EmbeddingFormatError(1, f"embedding file lacks fields {missing}")
    return tables
