"""``mmdistill`` command-line entry point.

Exit status: 0 when all requested work completed, 2 for invalid input (bad
config, missing or corrupt files, missing teacher), 1 for anything else.
Commands that write outputs drop an ``INCOMPLETE`` marker into the output
directory first and remove it only after the last file is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from mmdistill.checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from mmdistill.config import ConfigError, RunConfig, load_config
from mmdistill.data import ConfigurationError as DataConfigError
from mmdistill.data import DatasetFormatError, load_dataset, save_dataset
from mmdistill.losses import ConfigurationError as LossConfigError
from mmdistill.model import TEACHER_PRESETS, MultimodalModel
from mmdistill.training import (AXES, RECORD_VERSION, ConfigurationError, RecipeError, ablation_matrix,
                                evaluate, parse_recipe, run_recipe, train_teacher)

log = logging.getLogger("mmdistill")

INCOMPLETE = "INCOMPLETE"


class UsageError(Exception):
    """Invalid user input; reported on stderr with exit status 2."""


@contextmanager
def _marked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("outputs in this directory are partial; the command did not finish\n")
    yield out
    marker.unlink()


def teacher_dir(cfg: RunConfig, preset: str | None = None) -> Path:
    return cfg.output_dir / "teacher" / (preset or cfg["teacher"]["preset"])


def teacher_path(cfg: RunConfig, preset: str | None = None) -> Path:
    return teacher_dir(cfg, preset) / "teacher.ckpt"


def _load_teacher(path: Path, purpose: str) -> MultimodalModel:
    if not path.exists():
        raise UsageError(
            f"{purpose} needs a trained teacher, but no checkpoint exists at {path}. "
            f"Run `mmdistill train-teacher CONFIG` first or pass --teacher PATH.")
    teacher, _ = load_checkpoint(path)
    teacher.set_inference_mode()
    return teacher


# -- commands ------------------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    preset = args.preset
    if preset is not None and preset not in TEACHER_PRESETS:
        raise UsageError(f"unknown teacher preset {preset!r}; choose from {', '.join(TEACHER_PRESETS)}")
    seed = cfg["teacher"]["seed"] if args.seed is None else args.seed
    data = cfg.dataset()
    model_cfg = cfg.teacher_model(preset)
    with _marked(teacher_dir(cfg, preset)) as out:
        cfg.write_echo(out)
        save_dataset(data, out / "dataset.jsonl")
        teacher, reports = train_teacher(model_cfg, data, cfg.teacher_train(), seed=seed, out_dir=out)
        last = reports[-1].epochs[-1]
        save_checkpoint(teacher, out / "teacher.ckpt",
                        meta={"role": "teacher", "seed": seed, "accuracy": last["accuracy"],
                              "eval_ce": last["eval_ce"], "data": cfg["data"]})
    print(f"teacher checkpoint: {out / 'teacher.ckpt'}")
    print(f"final eval accuracy: {last['accuracy']!r}")
    print(f"final eval cross-entropy: {last['eval_ce']!r}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    labels = [args.recipe] if args.recipe else cfg.recipes
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    recipes = [parse_recipe(label, cfg.distill(), cfg.student_train()) for label in labels]
    teacher = None
    if any(r.needs_teacher for r in recipes):
        path = Path(args.teacher) if args.teacher else teacher_path(cfg)
        needing = ", ".join(r.label for r in recipes if r.needs_teacher)
        teacher = _load_teacher(path, f"recipe {needing} (contains DPT/DFT distillation stages)")
    data = cfg.dataset()
    for recipe in recipes:
        for seed in seeds:
            with _marked(cfg.output_dir / "runs" / recipe.label / f"seed{seed}") as out:
                cfg.write_echo(out)
                record = run_recipe(recipe, cfg.student_model(), teacher if recipe.needs_teacher else None,
                                    data, seed, cfg.student_train(), out_dir=out)
            print(f"{recipe.label} seed={seed} accuracy={record.accuracy:.4f} "
                  f"eval_ce={record.eval_ce:.4f} -> {out}")
    return 0


def format_table(axis: str, records) -> str:
    header = f"{'rank':>4}  {'cell':<28} {'recipe':<12} {'accuracy':>8} {'eval_ce':>9} {'seconds':>8}"
    lines = [f"ablation axis: {axis}", header, "-" * len(header)]
    for i, r in enumerate(records, start=1):
        lines.append(f"{i:>4}  {r.label:<28} {r.recipe:<12} {r.accuracy:>8.4f} {r.eval_ce:>9.4f} "
                     f"{r.wall_clock_seconds:>8.1f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise UsageError(f"unknown axis {args.axis!r}; valid axes: {', '.join(AXES)}")
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    recipe_label = args.recipe or cfg.recipes[0]
    if args.axis == "teacher_sizes":
        teachers = {p: _load_teacher(teacher_path(cfg, p), f"axis teacher_sizes ({p})")
                    for p in TEACHER_PRESETS}
    else:
        path = Path(args.teacher) if args.teacher else teacher_path(cfg)
        teachers = {"default": _load_teacher(path, f"axis {args.axis}")}
    data = cfg.dataset()
    workers = args.workers if args.workers is not None else cfg["run"]["workers"]
    with _marked(cfg.output_dir / "ablations" / args.axis) as out:
        cfg.write_echo(out)
        records = ablation_matrix(args.axis, cfg.student_model(), teachers, data, seed,
                                  base=cfg.distill(), train=cfg.student_train(),
                                  recipe_label=recipe_label, workers=workers)
        table = format_table(args.axis, records)
        (out / "table.txt").write_text(table + "\n")
        payload = {"version": RECORD_VERSION, "axis": args.axis, "seed": seed, "rows": [
            {"rank": i, **r.to_dict()} for i, r in enumerate(records, start=1)]}
        (out / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(table)
    print(f"results: {out / 'results.json'}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.data:
        data = load_dataset(args.data)
    elif args.config:
        data = load_config(args.config).dataset()
    else:
        raise UsageError("eval needs --data DATASET.jsonl or --config CONFIG to know the eval split")
    samples = data.split(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    metrics = evaluate(model, samples, data.n_colors)
    print(f"exact-match accuracy: {metrics['accuracy']!r}")
    print(f"eval cross-entropy: {metrics['eval_ce']!r}")
    return 0


def cmd_inspect(args) -> int:
    _, config, meta = read_checkpoint(args.checkpoint)
    model, _ = load_checkpoint(args.checkpoint)
    print(f"format version: {FORMAT_VERSION}")
    print("config:")
    print(json.dumps(config, indent=2, sort_keys=True))
    if meta:
        print("meta:")
        print(json.dumps(meta, indent=2, sort_keys=True))
    print("parameters:")
    counts = model.parameter_counts()
    for name, n in counts.items():
        print(f"  {name}: {n}")
    print(f"  total: {sum(counts.values())}")
    return 0


# -- wiring ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdistill",
                                description="Toy multimodal teacher/student distillation runner.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="train the teacher (PT then SFT)")
    t.add_argument("config")
    t.add_argument("--preset", choices=sorted(TEACHER_PRESETS), default=None,
                   help="train this preset instead of the config's [teacher] block")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train_teacher)

    r = sub.add_parser("run", help="train a student with one recipe")
    r.add_argument("config")
    r.add_argument("--recipe", default=None, help="e.g. PT-SFT or DPT-SFT-DFT (default: [run] recipe)")
    r.add_argument("--seed", type=int, default=None, help="default: every seed in [run] seeds")
    r.add_argument("--teacher", default=None, help="teacher checkpoint (default: under output_dir)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run one ablation axis and rank the cells")
    a.add_argument("config")
    a.add_argument("--axis", required=True, help=f"one of: {', '.join(AXES)}")
    a.add_argument("--recipe", default=None, help="recipe for the divergences/teacher_sizes axes")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--teacher", default=None)
    a.add_argument("--workers", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", default=None, help="dataset JSONL file")
    e.add_argument("--config", default=None, help="regenerate the dataset from a config instead")
    e.add_argument("--split", default="eval")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print a checkpoint's config, parameter counts and format version")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, DatasetFormatError, RecipeError,
            ConfigurationError, DataConfigError, LossConfigError) as e:
        print(f"mmdistill: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"mmdistill: error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
