"""Command-line pipeline: data generation, pretraining, training, evaluation,
the variant comparison and a gradient audit.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


from . import plotting
from .baseline import pretrain_vanilla
from .checkpoint import load_centers, load_checkpoint, load_fixed_tables, save_centers, save_checkpoint
from .config import RunConfig
from .data import Dataset
from .features import save_embeddings
from .gradcheck import run_gradcheck
from .synthgen import generate_dataset, generate_world
from .traineval import (
    VARIANTS,
    CompareRow,
    compare,
    evaluate,
    fit_channel_centers,
    build_model,
    format_table,
    rela_impr,
    train_model,
    write_loss_curve,
    write_metrics_csv,
)

log = logging.getLogger("mfnrec")

GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="master seed (else the config file, else $MFN_SEED, else 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfnrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/test JSONL")
    _common(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pretrain-embed", help="fit the fixed embedding tables with the vanilla CTR model")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True, help="embedding text file")

    p = sub.add_parser("pretrain-centers", help="fit interest centers for every channel")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--fixed", required=True, help="fixed embedding file")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _common(p)
    p.add_argument("--model", default="mfn", choices=VARIANTS)
    p.add_argument("--train", required=True)
    p.add_argument("--fixed", help="fixed embedding file")
    p.add_argument("--centers", help="comma-separated center files, one per channel")
    p.add_argument("--pretrain", action="store_true", help="pretrain missing embeddings/centers inline")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("eval", help="score a test file with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--base-auc", type=float, help="base AUC for RelaImpr")
    p.add_argument("--out", help="metrics CSV")

    p = sub.add_parser("compare", help="Base vs MFN variants over seeds")
    _common(p)
    p.add_argument("--train", help="train JSONL (generated from the config when omitted)")
    p.add_argument("--test", help="test JSONL")
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out-dir", default="compare_out")

    p = sub.add_parser("grad-check", help="finite-difference audit of all gradients on a tiny model")
    _common(p)
    p.add_argument("--epsilon", type=float, default=1e-4)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if "seed" not in getattr(cfg, "explicit", ()) and os.environ.get("MFN_SEED"):
        try:
            cfg.seed = int(os.environ["MFN_SEED"])
        except ValueError:
            raise UsageError(f"MFN_SEED must be an integer, got {os.environ['MFN_SEED']!r}") from None
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("variants", "seeds"):
        if getattr(args, name, None):
            cfg.set(name, getattr(args, name))
    return cfg


def _with_suffix(path: Path, tail: str) -> Path:
    return path.with_name(path.stem + tail)


# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = cfg.world()
    catalog, users = generate_world(world)
    train, test = generate_dataset(catalog, users, world)
    train.save(out / "train.jsonl")
    test.save(out / "test.jsonl")
    cfg.write(out / "run_config.txt")
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return 0


def cmd_pretrain_embed(args, cfg: RunConfig) -> int:
    train = Dataset.load(args.train)
    history: list[float] = []
    tables = pretrain_vanilla(train, cfg.vanilla_config(), history)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(tables, out)
    write_loss_curve(history, _with_suffix(out, "_loss.csv"))
    if history:
        plotting.plot_loss_curves({"vanilla": history}, _with_suffix(out, "_loss.png"))
    cfg.write(_with_suffix(out, "_config.txt"))
    print(f"fixed tables -> {out}")
    return 0


def cmd_pretrain_centers(args, cfg: RunConfig) -> int:
    train = Dataset.load(args.train)
    fixed = load_fixed_tables(args.fixed)
    spec = cfg.model_spec("mfn")
    centers = fit_channel_centers(fixed, train, spec, cfg.center_config())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    histories = {}
    with open(out / "center_history.csv", "w") as fh:
        fh.write("channel,iteration,entropy_loss\n")
        for i, c in enumerate(centers):
            save_centers(c, out / f"centers_ch{i}.emb")
            histories[f"ch{i} ({spec.channels[i]})"] = c.history
            for it, v in c.history:
                fh.write(f"{i},{it},{v!r}\n")
    if any(histories.values()):
        plotting.plot_center_history(histories, out / "center_history.png")
    cfg.write(out / "run_config.txt")
    print(f"{len(centers)} center files -> {out}")
    return 0


def _centers_for(kind: str, args, cfg: RunConfig, fixed, train: Dataset):
    if kind == "base":
        return None
    spec = cfg.model_spec(kind)
    if kind == "mfn-no-pretrain":
        return fit_channel_centers(fixed, train, spec, cfg.center_config(), random_init=True)
    if args.centers:
        files = [c for c in args.centers.split(",") if c]
        if len(files) != len(spec.channels):
            raise ValueError(f"{len(spec.channels)} channels need {len(spec.channels)} center files, got {len(files)}")
        return [load_centers(f) for f in files]
    if args.pretrain:
        return fit_channel_centers(fixed, train, spec, cfg.center_config())
    raise ValueError(f"model {kind!r} needs --centers files or --pretrain")


def cmd_train(args, cfg: RunConfig) -> int:
    train = Dataset.load(args.train)
    kind = args.model
    if args.fixed:
        fixed = load_fixed_tables(args.fixed)
    elif kind != "base" and args.pretrain:
        fixed = pretrain_vanilla(train, cfg.vanilla_config())
    elif kind != "base":
        raise ValueError(f"model {kind!r} needs --fixed embeddings or --pretrain")
    else:
        fixed = None
    centers = _centers_for(kind, args, cfg, fixed, train)
    spec = cfg.model_spec(kind)
    model = build_model(spec, fixed, centers)
    losses = train_model(model, train, cfg.train_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, spec, out, cfg.as_dict())
    write_loss_curve(losses, _with_suffix(out, "_loss.csv"))
    if losses:
        plotting.plot_loss_curves({kind: losses}, _with_suffix(out, "_loss.png"))
    print(f"{kind}: {len(losses)} steps, checkpoint -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, spec, _ = load_checkpoint(args.checkpoint)
    test = Dataset.load(args.test)
    m = evaluate(model, test)
    ri = rela_impr(m.auc, args.base_auc) if args.base_auc is not None else float("nan")
    print(f"{spec.kind}: auc={m.auc:.6f} logloss={m.logloss:.6f} n={m.n_examples}"
          + (f" rela_impr={ri:.2f}%" if args.base_auc is not None else ""))
    if args.out:
        write_metrics_csv([CompareRow(spec.kind, spec.seed, m.auc, m.logloss, ri)], args.out)
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    if bool(args.train) != bool(args.test):
        raise UsageError("give both --train and --test, or neither")
    if args.train:
        train, test = Dataset.load(args.train), Dataset.load(args.test)
    else:
        world = cfg.world()
        train, test = generate_dataset(*generate_world(world), world)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves: dict = {}
    rows = compare(cfg.variant_list, train, test, cfg.seed_list, cfg.model_spec("mfn"), cfg.train_config(),
                   cfg.vanilla_config(), cfg.center_config(), curves)
    write_metrics_csv(rows, out / "metrics.csv")
    table = format_table(rows)
    (out / "comparison.txt").write_text(table + "\n")
    for (variant, seed), losses in curves.items():
        write_loss_curve(losses, out / f"loss_{variant}_seed{seed}.csv")
    plotting.plot_comparison(rows, out / "comparison.png")
    if any(curves.values()):
        plotting.plot_loss_curves({f"{v} s{s}": l for (v, s), l in curves.items()}, out / "loss_curves.png")
    cfg.write(out / "run_config.txt")
    print(table)
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    report = run_gradcheck(seed=cfg.seed, epsilon=args.epsilon)
    for name, err in report.errors.items():
        print(f"{name:<24} {err:.3e}")
    frozen_ok = all(g is None for g in report.frozen_center_grads)
    print(f"max relative error {report.max_error:.3e} (tolerance {GRAD_TOLERANCE:g})")
    print(f"frozen centers receive no gradient: {frozen_ok}")
    return 0 if report.max_error < GRAD_TOLERANCE and frozen_ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-embed": cmd_pretrain_embed,
    "pretrain-centers": cmd_pretrain_centers,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError, LookupError, ArithmeticError) as exc:
        print(f"mfnrec: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
