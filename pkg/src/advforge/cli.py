"""Command-line surface for reproducible experiments.

Subcommands: train, attack, eval, landscape, curve, reproduce. Every command
reads a JSON config; flags override config keys. Artifact paths go to stdout,
diagnostics to stderr. Exit codes: 0 ok, 2 config error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, protocol
from .attacks import (AdversarialSet, AttackConfig, craft_adversaries,
                      extract_adversarial_set, load_adversarial_set,
                      save_adversarial_set)
from .data import (DataError, LabeledDataset, balance_classes, holdout_split,
                   load_cifar_binary, load_idx, synthetic_glyphs)
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .serialize import ContainerError
from .training import DefenseVariant, TrainConfig, TrainingDiverged, train
from .tensor import ShapeError

log = logging.getLogger("advforge")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(RuntimeError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def _resolve_seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("ADVFORGE_SEED")
    if env is not None:
        return int(env)
    return 0


def _load_dataset(dcfg: dict, seed: int) -> LabeledDataset:
    fmt = dcfg.get("format")
    if fmt == "idx":
        ds = load_idx(dcfg["images"], dcfg["labels"], dcfg.get("num_classes"))
    elif fmt == "cifar":
        ds = load_cifar_binary(dcfg["paths"])
    elif fmt == "synthetic":
        ds = synthetic_glyphs(per_class=int(dcfg.get("per_class", 200)),
                              size=int(dcfg.get("size", 28)),
                              seed=int(dcfg.get("seed", seed)),
                              jitter=float(dcfg.get("jitter", 1.0)))
    else:
        raise ConfigError(f"dataset format must be idx|cifar|synthetic, got {fmt!r}")
    per_class = dcfg.get("balance_per_class")
    if per_class:
        ds = balance_classes(ds, int(per_class), seed=seed)
    return ds


def _split(ds: LabeledDataset, dcfg: dict, seed: int):
    fraction = float(dcfg.get("holdout_fraction", 0.8))
    return holdout_split(ds, fraction=fraction, seed=seed)


def _model_spec(cfg: dict, ds: LabeledDataset) -> ModelSpec:
    mcfg = cfg.get("model", {})
    return ModelSpec(arch=mcfg.get("arch", "minivgg"),
                     widths=tuple(mcfg.get("widths", (8, 16, 32))),
                     num_classes=int(mcfg.get("num_classes", ds.num_classes)),
                     input_shape=tuple(mcfg.get("input_shape", ds.images.shape[1:])))


def _defense(cfg: dict, args) -> DefenseVariant:
    d = dict(cfg.get("defense", {"kind": "none"}))
    if getattr(args, "defense", None):
        d["kind"] = args.defense
    for key, flag in (("alpha", "alpha"), ("p", "p"), ("q", "q"),
                      ("kl_weight", "kl_weight"), ("epsilon", "defense_epsilon"),
                      ("step_size", "defense_step_size"), ("iterations", "defense_iterations")):
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    try:
        return DefenseVariant.from_dict(d)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _train_config(cfg: dict, args, defense: DefenseVariant, seed: int) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    for key in ("epochs", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            t[key] = val
    try:
        return TrainConfig(epochs=int(t.get("epochs", 10)),
                           batch_size=int(t.get("batch_size", 64)),
                           lr=float(t.get("lr", 0.05)),
                           momentum=float(t.get("momentum", 0.9)),
                           weight_decay=float(t.get("weight_decay", 5e-4)),
                           schedule=t.get("schedule", "cosine"),
                           seed=seed, defense=defense)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _attack_config(cfg: dict, args) -> AttackConfig:
    a = dict(cfg.get("attack", {}))
    if getattr(args, "epsilon", None) is not None:
        a["epsilon"] = args.epsilon
    if getattr(args, "step_size", None) is not None:
        a["step_size"] = args.step_size
    if getattr(args, "iterations", None) is not None:
        a["iterations"] = args.iterations
    try:
        return AttackConfig(epsilon=float(a.get("epsilon", 16.0)),
                            step_size=float(a.get("step_size", 1.0)),
                            iterations=a.get("iterations"))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _out_dir(cfg: dict, args) -> Path:
    out = Path(getattr(args, "output_dir", None) or cfg.get("output_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(path: Path) -> None:
    print(str(path))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    ds = _load_dataset(cfg.get("dataset", {}), seed)
    train_ds, val_ds = _split(ds, cfg.get("dataset", {}), seed)
    spec = _model_spec(cfg, ds)
    defense = _defense(cfg, args)
    tcfg = _train_config(cfg, args, defense, seed)
    out = _out_dir(cfg, args)

    from .models import build_model
    model = build_model(spec, seed=seed, model_id=cfg.get("model_id", f"model-{seed}"))
    ckpt_path = out / "model.ckpt"
    meta = {"seed": seed, "defense": defense.to_dict(), "epochs": tcfg.epochs}
    try:
        report = train(model, train_ds, val_ds, tcfg)
    except TrainingDiverged as e:
        log.error("training diverged in epoch %d; saving last good checkpoint", e.epoch)
        from .training import _restore
        _restore(model, e.last_good)
        save_checkpoint(model, ckpt_path, meta=meta | {"diverged_epoch": e.epoch})
        _emit(ckpt_path)
        return EXIT_DIVERGED
    save_checkpoint(model, ckpt_path, meta=meta)
    report_path = out / "train_report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    _emit(ckpt_path)
    _emit(report_path)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    if not args.checkpoints:
        raise ConfigError("attack needs at least one --checkpoints entry")
    models = [load_checkpoint(p) for p in args.checkpoints]
    shapes = {m.spec.input_shape for m in models}
    if len(shapes) != 1:
        raise ConfigError(f"checkpoints expect different input shapes: {shapes}")
    ds = _load_dataset(cfg.get("dataset", {}), seed)
    _, val_ds = _split(ds, cfg.get("dataset", {}), seed)
    acfg = _attack_config(cfg, args)
    pool = int(cfg.get("attack", {}).get("pool", args.pool))
    images = val_ds.images[:pool]
    labels = val_ds.labels[:pool]
    out = _out_dir(cfg, args)

    candidates, _ = craft_adversaries(models, images, labels, acfg)
    aset = extract_adversarial_set(models, images, candidates, labels, acfg)
    manifest = out / "advset.json"
    save_adversarial_set(aset, manifest)
    log.info("extracted %d/%d adversaries", len(aset), len(labels))
    _emit(manifest)
    _emit(manifest.with_suffix(".advt"))
    return 0


def cmd_eval(args) -> int:
    aset = load_adversarial_set(args.adv_set)
    holdout = load_checkpoint(args.checkpoint)
    holdout_id = args.holdout_id or holdout.model_id
    try:
        entry = analysis.evaluate_transfer(holdout, holdout_id, aset)
    except analysis.ProtocolError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(_load_config(args.config), args)
    path = out / "eval_report.json"
    analysis.write_eval_report([entry], path)
    _emit(path)
    return 0


def cmd_landscape(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    subject = load_checkpoint(args.subject)
    surrogate = load_checkpoint(args.surrogate)
    ds = _load_dataset(cfg.get("dataset", {}), seed)
    _, val_ds = _split(ds, cfg.get("dataset", {}), seed)
    i = args.image_index
    if not 0 <= i < len(val_ds):
        raise ConfigError(f"image index {i} outside validation set of {len(val_ds)}")
    grid = analysis.landscape_grid(
        subject, surrogate, val_ds.images[i], int(val_ds.labels[i]),
        eps1_range=tuple(args.eps1), eps2_range=tuple(args.eps2), step=args.step)
    out = _out_dir(cfg, args)
    path = out / "landscape.csv"
    analysis.write_landscape_csv(grid, path)
    _emit(path)
    return 0


def cmd_curve(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg.get("dataset", {}), seed)
    _, val_ds = _split(ds, cfg.get("dataset", {}), seed)
    count = min(args.count, len(val_ds))
    eps = np.arange(args.eps_min, args.eps_max + args.eps_step / 2, args.eps_step)
    curve = analysis.loss_curve(model, val_ds.images[:count], val_ds.labels[:count], eps)
    out = _out_dir(cfg, args)
    path = out / "loss_curve.csv"
    analysis.write_curve_csv(curve, path)
    _emit(path)
    return 0


def cmd_reproduce(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    ds = _load_dataset(cfg.get("dataset", {}), seed)
    train_ds, val_ds = _split(ds, cfg.get("dataset", {}), seed)
    spec = _model_spec(cfg, ds)
    defense = _defense(cfg, args)
    tcfg = _train_config(cfg, args, defense, seed)
    acfg = _attack_config(cfg, args)
    rcfg = cfg.get("reproduce", {})
    count = int(rcfg.get("count", 6))
    sizes = tuple(int(s) for s in rcfg.get("sizes", (1, 3, 5)))
    holdout_idx = int(rcfg.get("holdout", count - 1))
    pool = int(rcfg.get("pool", 512))
    out = _out_dir(cfg, args)

    log.info("training %d %s models", count, spec.arch)
    models, reports = protocol.train_cohort(train_ds, val_ds, spec, tcfg, count, seed,
                                            id_prefix=f"{spec.arch}-s{seed}")
    paths = []
    for i, (model, report) in enumerate(zip(models, reports)):
        p = out / f"model{i}.ckpt"
        save_checkpoint(model, p, meta={"seed": seed, "index": i,
                                        "defense": defense.to_dict(),
                                        "epochs": tcfg.epochs})
        paths.append(p)
    images = val_ds.images[:pool]
    labels = val_ds.labels[:pool]
    log.info("crafting ensembles of sizes %s at eps=%g", sizes, acfg.epsilon)
    sets = protocol.transfer_suite(models, holdout_idx, images, labels, acfg, sizes)
    for size, aset in sets.items():
        save_adversarial_set(aset, out / f"advset_{size}.json")
    entries = protocol.transfer_report(models[holdout_idx], sets)
    report_path = out / "eval_report.json"
    analysis.write_eval_report(entries, report_path)
    summary = {
        "seed": seed,
        "arch": spec.arch,
        "val_acc": [r.best_val_acc for r in reports],
        "entries": entries,
    }
    summary_path = out / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    for p in paths:
        _emit(p)
    _emit(report_path)
    _emit(summary_path)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advforge")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", dest="output_dir", default=None)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--defense", choices=DefenseVariant.KINDS, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--kl-weight", dest="kl_weight", type=float, default=None)
    p.add_argument("--defense-epsilon", dest="defense_epsilon", type=float, default=None)
    p.add_argument("--defense-step-size", dest="defense_step_size", type=float, default=None)
    p.add_argument("--defense-iterations", dest="defense_iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft an adversarial set from checkpoints")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--pool", type=int, default=512, help="crafting pool size")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="transfer accuracy of a holdout model")
    common(p)
    p.add_argument("--adv-set", dest="adv_set", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--holdout-id", dest="holdout_id", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="two-direction loss grid around one image")
    common(p)
    p.add_argument("--subject", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--image-index", dest="image_index", type=int, default=0)
    p.add_argument("--eps1", nargs=2, type=float, default=(-16.0, 16.0))
    p.add_argument("--eps2", nargs=2, type=float, default=(-8.0, 32.0))
    p.add_argument("--step", type=float, default=1.0)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("curve", help="loss versus single-step perturbation size")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=128)
    p.add_argument("--eps-min", dest="eps_min", type=float, default=0.0)
    p.add_argument("--eps-max", dest="eps_max", type=float, default=128.0)
    p.add_argument("--eps-step", dest="eps_step", type=float, default=1.0)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("reproduce", help="train cohort, craft ensembles, evaluate holdout")
    common(p)
    p.add_argument("--defense", choices=DefenseVariant.KINDS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (ShapeError, ValueError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, ContainerError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except TrainingDiverged as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
