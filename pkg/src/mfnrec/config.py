"""Flat ``key=value`` run configuration shared by every subcommand."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .baseline import VanillaConfig
from .synthgen import WorldConfig
from .traineval import CenterConfig, ModelSpec, TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic world
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
    # model
    d: int = 16
    d_h: int = 32
    K: int = 4
    h: int = 2
    channels: str = "cid,entities"
    head_hidden: str = "64,32"
    aux_weight: float = 0.0
    finetune_centers: bool = False
    # main-task optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 1
    max_steps: int = 0
    # fixed-embedding pretraining
    embed_lr: float = 1e-2
    embed_steps: int = 500
    embed_batch: int = 256
    embed_hidden: int = 64
    # center pretraining
    center_lr: float = 1e-2
    center_iters: int = 300
    center_batch: int = 64
    center_optimizer: str = "adam"
    center_init: str = "sample"
    # protocol
    seed: int = 0
    seeds: str = "0,1,2"
    variants: str = "base,mfn,mfn-no-pretrain,mfn-no-combination"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigFileError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("int", int):
                value = int(raw)
            elif kind in ("float", float):
                value = float(raw)
            elif kind in ("bool", bool):
                low = raw.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("true", "1", "yes")
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigFileError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.explicit = set()
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigFileError(f"{path}:{lineno}: expected key=value")
            try:
                cfg.set(key.strip(), value.strip())
                cfg.explicit.add(key.strip())
            except ConfigFileError as exc:
                raise ConfigFileError(f"{path}:{lineno}: {exc}") from None
        return cfg

    def lines(self) -> list[str]:
        return [f"{k}={getattr(self, k)}" for k in self.keys()]

    def as_dict(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in self.keys()}

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    # -- views for the library layers ------------------------------------
    def world(self, seed: int | None = None) -> WorldConfig:
        names = {f.name for f in fields(WorldConfig)}
        kw = {k: getattr(self, k) for k in names if hasattr(self, k) and k != "seed"}
        return WorldConfig(**kw, seed=self.seed if seed is None else seed)

    @property
    def vocab(self) -> dict[str, int]:
        return self.world().vocab

    def model_spec(self, kind: str, seed: int | None = None) -> ModelSpec:
        return ModelSpec(
            kind=kind,
            dim=self.d,
            hidden=self.d_h,
            K=self.K,
            heads=self.h,
            channels=tuple(c.strip() for c in self.channels.split(",") if c.strip()),
            head_hidden=tuple(int(x) for x in self.head_hidden.split(",") if x.strip()),
            aux_weight=self.aux_weight,
            finetune_centers=self.finetune_centers,
            n_users=self.users,
            n_contexts=self.n_contexts,
            vocab=self.vocab,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.lr, self.beta1, self.beta2, self.eps, self.batch_size, self.epochs, self.max_steps,
                           self.seed if seed is None else seed)

    def vanilla_config(self, seed: int | None = None) -> VanillaConfig:
        return VanillaConfig(self.d, self.embed_steps, self.embed_batch, self.embed_lr, self.embed_hidden,
                             self.seed if seed is None else seed, self.vocab)

    def center_config(self) -> CenterConfig:
        return CenterConfig(self.center_lr, self.center_batch, self.center_iters, self.center_optimizer, self.center_init)

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    @property
    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]
