"""Command-line entry point: ``mbdgan <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from .config import ConfigError, RunConfig, parse_config, write_resolved
from .data import (list_images, load_dataset, read_annotations, read_png, synth_generate, write_png,
                   write_synthetic)
from .evaluation import evaluate_translations, train_eval_classifier
from .plotting import plot_branch_scaling, plot_loss_history
from .refine import RefinerConfig, apply_refiner, load_refiner, refiner_gain, save_refiner, train_refiner
from .training import GAN, TrainState, load_checkpoint, recycle_batch, sample_targets, save_checkpoint, train_loop, \
    translate_batch, write_history_csv

log = logging.getLogger("mbdgan")

COMMANDS = ("train", "translate", "recycle", "refine", "evaluate", "audit-params", "synth-data")
CLASSES_FILE = "classes.json"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data and checkpoint helpers
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    class_names: list[str]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_annotations: list[dict] | None


def load_run_data(cfg: RunConfig) -> RunData:
    """Class-per-directory images under ``data_root``, or the synthetic set when it is empty."""
    if not cfg.data_root:
        ds = synth_generate(cfg.synthetic_spec(), cfg.synth_count, seed=cfg.seed)
        train, test = ds.split(cfg.train_fraction, seed=cfg.seed)
        return RunData(list(ds.spec.shapes), train.images, train.labels, test.images, test.labels, test.annotations)
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise CommandError(f"data_root {root} is not a directory")
    data = load_dataset(cfg.dataset_spec())
    anns = read_annotations(root)
    test_ann = [anns.get(p) for p in data.test_paths]
    return RunData(data.class_names, data.train_x, data.train_y, data.test_x, data.test_y,
                   test_ann if test_ann and all(a is not None for a in test_ann) else None)


def open_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise CommandError("this command needs --checkpoint DIR")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise CommandError(f"checkpoint {path} does not exist")
    gan, state, tcfg = load_checkpoint(path)
    names = None
    if (path / CLASSES_FILE).exists():
        names = json.loads((path / CLASSES_FILE).read_text())
    k = gan.num_classes
    wanted = cfg.class_list()
    if wanted is not None and len(wanted) != k:
        raise CommandError(f"class_names lists {len(wanted)} classes but the checkpoint was trained on {k}")
    return gan, state, tcfg, wanted or names or [str(i) for i in range(k)]


def resolve_label(key: str, value: str, names: list[str]) -> int:
    if value == "":
        raise CommandError(f"{key} is required")
    if value in names:
        return names.index(value)
    try:
        idx = int(value)
    except ValueError:
        raise CommandError(f"{key}: unknown class {value!r}; known classes {names}") from None
    if not 0 <= idx < len(names):
        raise CommandError(f"{key}: class index {idx} outside [0, {len(names)})")
    return idx


def read_input_images(cfg: RunConfig, side: int) -> tuple[list[Path], np.ndarray]:
    if not cfg.input_dir:
        raise CommandError("this command needs --input_dir DIR")
    d = Path(cfg.input_dir)
    if not d.is_dir():
        raise CommandError(f"input_dir {d} is not a directory")
    files = list_images(d)
    if not files:
        raise CommandError(f"no PNG images in {d}")
    return files, np.stack([read_png(f, side) for f in files]).astype(np.float32)


def write_images(directory: Path, files: list[Path], images: np.ndarray) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for f, img in zip(files, images):
        write_png(directory / f.name, img)
        out.append(directory / f.name)
    return out


def refiner_config(cfg: RunConfig) -> RefinerConfig:
    return RefinerConfig(low_side=cfg.refiner_low_side, epochs=cfg.refiner_epochs, lambda_l1=cfg.refiner_lambda_l1,
                         base_channels=cfg.refiner_base_channels, seed=cfg.seed, batch_size=cfg.batch_size)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, out: Path) -> None:
    root = Path(cfg.data_root) if cfg.data_root else out / "data"
    ds = synth_generate(cfg.synthetic_spec(), cfg.synth_count, seed=cfg.seed)
    write_synthetic(ds, root)
    print(f"synthetic dataset: {len(ds.labels)} images, classes {list(ds.spec.shapes)} -> {root}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    data = load_run_data(cfg)
    k = len(data.class_names)
    tcfg = cfg.train_config()
    if cfg.checkpoint:
        gan, state, _, _ = open_checkpoint(cfg)
        if gan.num_classes != k:
            raise CommandError(f"dataset has {k} classes but the checkpoint was trained on {gan.num_classes}")
    else:
        gan = GAN.build(cfg.generator_spec(k), cfg.discriminator_spec(k), seed=cfg.seed)
        state = TrainState.fresh(cfg.seed)
    state = train_loop(tcfg, gan, data.train_x, data.train_y, state=state, out_dir=out,
                       checkpoint_every=cfg.checkpoint_every, sample_every=cfg.sample_every)
    final = save_checkpoint(out / "checkpoints" / "final", gan, state, tcfg)
    for ckpt in (out / "checkpoints").iterdir():
        (ckpt / CLASSES_FILE).write_text(json.dumps(data.class_names))
    write_history_csv(out / "history.csv", state.history)
    plot_loss_history(state.history, out / "loss_history.png")
    last = state.history[-1]
    print(f"trained {state.epoch} epochs ({state.step} steps, {last.sec_per_1k:.1f} s per 1k steps)")
    print(f"checkpoint: {final}")
    print(f"history: {out / 'history.csv'}")


def cmd_translate(cfg: RunConfig, out: Path) -> None:
    gan, _, _, names = open_checkpoint(cfg)
    src = resolve_label("source_label", cfg.source_label, names)
    tgt = resolve_label("target_label", cfg.target_label, names)
    files, x = read_input_images(cfg, gan.generator.spec.image_side)
    y = translate_batch(gan.generator, x, src, tgt)
    written = write_images(out / "translated", files, y)
    print(f"translated {len(written)} images {names[src]} -> {names[tgt]} into {out / 'translated'}")


def cmd_recycle(cfg: RunConfig, out: Path) -> None:
    gan, _, _, names = open_checkpoint(cfg)
    tgt = resolve_label("target_label", cfg.target_label, names)
    files, x = read_input_images(cfg, gan.generator.spec.image_side)
    y = recycle_batch(gan.generator, x, tgt)
    written = write_images(out / "recycled", files, y)
    print(f"recycled {len(written)} images with target {names[tgt]} into {out / 'recycled'}")


def cmd_refine(cfg: RunConfig, out: Path) -> None:
    if cfg.refiner_checkpoint:
        path = Path(cfg.refiner_checkpoint)
        if not path.exists():
            raise CommandError(f"refiner checkpoint {path} does not exist")
        refiner, rcfg = load_refiner(path)
    else:
        data = load_run_data(cfg)
        rcfg = refiner_config(cfg)
        result = train_refiner(data.train_x, rcfg)
        refiner = result.refiner
        path = save_refiner(out / "refiner", refiner, rcfg)
        gain = refiner_gain(refiner, data.test_x, rcfg.low_side)
        with open(out / "refiner_history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "adv_d", "adv_g", "l1"])
            w.writeheader()
            w.writerows(result.history)
        print(f"refiner trained {rcfg.epochs} epochs -> {path}")
        print(f"held-out mean L1: degraded {gain.l1_degraded:.5f}  refined {gain.l1_refined:.5f}")
    if cfg.input_dir:
        files, x = read_input_images(cfg, cfg.image_side)
        written = write_images(out / "refined", files, apply_refiner(refiner, x))
        print(f"refined {len(written)} images into {out / 'refined'}")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    gan, state, _, names = open_checkpoint(cfg)
    data = load_run_data(cfg)
    if len(data.class_names) != gan.num_classes:
        raise CommandError(f"dataset has {len(data.class_names)} classes but the checkpoint was trained on {gan.num_classes}")
    clf, clf_acc = train_eval_classifier(data.train_x, data.train_y, data.test_x, data.test_y, gan.num_classes,
                                         epochs=cfg.classifier_epochs, seed=cfg.seed,
                                         min_accuracy=cfg.min_classifier_accuracy)
    targets = sample_targets(np.random.default_rng(cfg.seed + 1), data.test_y, gan.num_classes)
    refine = None
    if cfg.refiner_checkpoint:
        refiner, _ = load_refiner(cfg.refiner_checkpoint)
        refine = lambda imgs: apply_refiner(refiner, imgs)  # noqa: E731
    rows = []
    for mode, recycle in (("translation", False), ("recycled", True)):
        rep = evaluate_translations(gan.generator, clf, data.test_x, data.test_y, targets, data.test_annotations,
                                    refine=refine, recycle=recycle)
        print(f"[{mode}]")
        for line in rep.lines():
            print("  " + line)
        rows.append({"mode": mode, "is_mean": rep.inception.mean, "is_std": rep.inception.std,
                     "is_splits": rep.inception.splits, "target_accuracy": rep.target_accuracy,
                     "median_displacement": rep.median_displacement, "count_match_rate": rep.count_match_rate,
                     "failures": rep.failures, "images": rep.n})
    print(f"evaluation classifier held-out accuracy {clf_acc:.4f}")
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"results: {out / 'evaluation.csv'}")


def _int_list(key: str, raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {raw!r}") from None


def cmd_audit_params(cfg: RunConfig, out: Path) -> None:
    branches = _int_list("audit_branches", cfg.audit_branches)
    methods = [m.strip() for m in cfg.audit_methods.split(",") if m.strip()]
    for m in methods:
        if m not in audit_mod.REFERENCE_GENERATOR_MILLIONS:
            raise ConfigError("audit_methods", f"unknown method {m!r}")
    table = audit_mod.ScalingTable()
    for m in methods:
        table.rows.extend(audit_mod.audit_branch_scaling(m, branches).rows)
    text = audit_mod.format_table(table)
    print(text)
    (out / "param_audit.txt").write_text(text + "\n")
    (out / "param_audit.csv").write_text(audit_mod.table_csv(table))
    plot_branch_scaling(table, out / "param_audit.png")
    print(f"tables: {out / 'param_audit.txt'}, {out / 'param_audit.csv'}; figure: {out / 'param_audit.png'}")


HANDLERS = {
    "train": cmd_train,
    "translate": cmd_translate,
    "recycle": cmd_recycle,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "audit-params": cmd_audit_params,
    "synth-data": cmd_synth_data,
}


def run_command(name: str, cfg: RunConfig) -> int:
    """Run one command; returns the process exit status."""
    if name not in HANDLERS:
        print(f"error: unknown command {name!r}", file=sys.stderr)
        return 2
    out = cfg.output_path()
    try:
        write_resolved(cfg, out)
        HANDLERS[name](cfg, out)
    except (CommandError, ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbdgan", description="Multi-branch discriminator GAN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = RunConfig()
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name}", default=None, metavar=f.type.upper() if isinstance(f.type, str) else None,
                           help=f"default: {getattr(defaults, f.name)!r}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = parse_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run_command(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
