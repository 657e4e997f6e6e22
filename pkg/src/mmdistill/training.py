"""Stage state machine, recipes, teacher training, and the ablation runner."""

from __future__ import annotations

import enum
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from mmdistill.checkpoint import save_checkpoint
from mmdistill.data import Dataset, Sample, batch_iterator, exact_match_eval, make_batch, model_predictor
from mmdistill.losses import DistillConfig, autoregressive_loss, dft_loss, dpt_loss, loss_parts
from mmdistill.model import ModelConfig, MultimodalModel, encode_images, forward_batch
from mmdistill.optim import OptimizerState, optimizer_step
from mmdistill.tensor import no_grad

log = logging.getLogger(__name__)


class RecipeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class StageKind(str, enum.Enum):
    PT = "PT"
    DPT = "DPT"
    SFT = "SFT"
    DFT = "DFT"

    @property
    def needs_teacher(self) -> bool:
        return self in (StageKind.DPT, StageKind.DFT)

    @property
    def is_pretraining(self) -> bool:
        return self in (StageKind.PT, StageKind.DPT)

    @property
    def trainable_groups(self) -> frozenset[str]:
        if self.is_pretraining:
            return frozenset({"projector"})
        return frozenset({"projector", "llm"})

    @property
    def default_split(self) -> str:
        return "pretrain" if self.is_pretraining else "finetune"


@dataclass(frozen=True)
class Stage:
    kind: StageKind
    epochs: int
    distill: DistillConfig
    split: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "epochs": self.epochs, "split": self.split,
                "distill": self.distill.to_dict()}


@dataclass(frozen=True)
class Recipe:
    stages: tuple[Stage, ...]

    def __post_init__(self) -> None:
        if not self.stages:
            raise RecipeError("a recipe needs at least one stage")
        for i, s in enumerate(self.stages):
            if s.kind.is_pretraining and i != 0:
                raise RecipeError(f"{s.kind.value} must be the first stage of a recipe "
                                  f"(got {format_recipe(self)!r})")

    @property
    def label(self) -> str:
        return format_recipe(self)

    @property
    def needs_teacher(self) -> bool:
        return any(s.kind.needs_teacher for s in self.stages)

    def with_stage_config(self, kind: StageKind, config: DistillConfig) -> "Recipe":
        return Recipe(tuple(replace(s, distill=config) if s.kind == kind else s for s in self.stages))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    pretrain_epochs: int = 3
    finetune_epochs: int = 5
    eval_every_epoch: bool = True

    def epochs_for(self, kind: StageKind) -> int:
        return self.pretrain_epochs if kind.is_pretraining else self.finetune_epochs

    def optimizer_kwargs(self) -> dict:
        return dict(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def parse_recipe(label: str, defaults: DistillConfig | None = None,
                 train: TrainConfig | None = None) -> Recipe:
    """``"DPT-SFT-DFT"`` -> :class:`Recipe`; a PT/DPT stage may only appear first."""
    defaults = defaults or DistillConfig()
    train = train or TrainConfig()
    tokens = [t.strip() for t in label.split("-")]
    if not label or any(not t for t in tokens):
        raise RecipeError(f"empty stage in recipe {label!r}")
    stages = []
    for tok in tokens:
        try:
            kind = StageKind(tok.upper())
        except ValueError:
            raise RecipeError(
                f"unknown stage {tok!r} in recipe {label!r}; expected PT, DPT, SFT or DFT") from None
        stages.append(Stage(kind, train.epochs_for(kind), defaults, kind.default_split))
    return Recipe(tuple(stages))


def format_recipe(recipe: Recipe) -> str:
    return "-".join(s.kind.value for s in recipe.stages)


# -- records --------------------------------------------------------------------------------

@dataclass
class StageReport:
    kind: str
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"] if self.epochs else float("nan")


METRICS_VERSION = 1
RECORD_VERSION = 1


@dataclass
class RunRecord:
    recipe: str
    seed: int
    stage_losses: dict[str, float]
    accuracy: float
    eval_ce: float
    wall_clock_seconds: float = field(default=0.0, compare=False)
    checkpoints: list[str] = field(default_factory=list, compare=False)
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        version = d.pop("version", RECORD_VERSION)
        if version != RECORD_VERSION:
            raise ValueError(f"run record version mismatch: expected {RECORD_VERSION}, found {version}")
        return cls(**d)


class MetricsWriter:
    """Append-only JSON-lines metrics stream, one record per epoch.

    Each line carries ``"version": METRICS_VERSION`` alongside the epoch record.
    """

    def __init__(self, path: str | Path | None, fresh: bool = False):
        self.path = Path(path) if path else None
        if fresh and self.path is not None and self.path.exists():
            self.path.unlink()

    def __call__(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"version": METRICS_VERSION, **record}, sort_keys=True) + "\n")


# -- evaluation ---------------------------------------------------------------------------------

def evaluate(model: MultimodalModel, samples: Sequence[Sample], n_colors: int,
             batch_size: int = 128) -> dict[str, float]:
    """Exact-match accuracy and mean response cross-entropy on held-out samples."""
    cfg = model.config
    acc = exact_match_eval(model_predictor(model, n_colors, cfg.image_size, batch_size), samples)
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start: start + batch_size]
            b = make_batch(chunk, cfg.n_patches, cfg.image_size)
            out = forward_batch(model, b.tokens, b.images, b.visual_index)
            ce = autoregressive_loss(out.logits, b.tokens, b.segments, "mean")
            total += ce.item() * len(chunk)
            count += len(chunk)
    return {"accuracy": acc, "eval_ce": total / count}


# -- stages -----------------------------------------------------------------------------------

def apply_freeze_policy(model: MultimodalModel, kind: StageKind) -> None:
    trainable = kind.trainable_groups
    for g in model.groups:
        g.set_trainable(g.name in trainable and g.name != "visual_encoder")


def run_stage(student: MultimodalModel, teacher: MultimodalModel | None, stage: Stage,
              samples: Sequence[Sample], train: TrainConfig, seed: int, stage_index: int = 0,
              sink: Callable[[dict], None] | None = None,
              eval_fn: Callable[[MultimodalModel], dict] | None = None) -> StageReport:
    """Train ``student`` for one stage and return per-epoch mean losses.

    Optimizer state starts fresh. Teacher outputs are recomputed per batch.
    """
    kind = stage.kind
    if kind.needs_teacher and teacher is None:
        raise ConfigurationError(f"stage {kind.value} distils from a teacher, but none was given")
    if not kind.needs_teacher:
        teacher = None
    if teacher is not None:
        teacher.set_inference_mode()
        if teacher.config.vocab_size != student.config.vocab_size:
            raise ConfigurationError("teacher and student must share the vocabulary")
    apply_freeze_policy(student, kind)
    state = OptimizerState.for_groups(student.groups, **train.optimizer_kwargs())
    cfg = student.config
    dc = stage.distill
    combine = dpt_loss if kind == StageKind.DPT else dft_loss
    report = StageReport(kind.value)
    share_features = teacher is not None and teacher.visual_encoder is student.visual_encoder

    for epoch in range(stage.epochs):
        sums: dict[str, float] = {}
        n_batches = 0
        for batch in batch_iterator(samples, train.batch_size, (seed, stage_index), epoch,
                                    cfg.n_patches, cfg.image_size):
            z = encode_images(student, batch.images)
            s_out = forward_batch(student, batch.tokens, None, batch.visual_index, features=z)
            t_out = None
            if teacher is not None:
                with no_grad():
                    t_out = forward_batch(teacher, batch.tokens, batch.images, batch.visual_index,
                                          features=z if share_features else None)
            parts = loss_parts(s_out, t_out, batch.tokens, batch.segments, dc)
            loss = parts["reg"] if teacher is None else combine(parts, dc)
            loss.backward()
            optimizer_step(state, student.groups)
            report.steps += 1
            n_batches += 1
            sums["loss"] = sums.get("loss", 0.0) + loss.item()
            for k, v in parts.items():
                sums[f"L_{k}"] = sums.get(f"L_{k}", 0.0) + v.item()
        rec = {"stage": kind.value, "stage_index": stage_index, "epoch": epoch,
               **{k: v / n_batches for k, v in sums.items()}}
        if eval_fn is not None and (train.eval_every_epoch or epoch == stage.epochs - 1):
            rec.update(eval_fn(student))
        report.epochs.append(rec)
        log.info("%s epoch %d: %s", kind.value, epoch,
                 ", ".join(f"{k}={v:.4f}" for k, v in rec.items() if isinstance(v, float)))
        if sink is not None:
            sink(rec)
    return report


def run_recipe(recipe: Recipe, student_config: ModelConfig, teacher: MultimodalModel | None,
               data: Dataset, seed: int, train: TrainConfig | None = None,
               out_dir: str | Path | None = None, student: MultimodalModel | None = None,
               start_stage: int = 0, label: str = "") -> RunRecord:
    """Run every stage of ``recipe`` on one student and evaluate it on the eval split.

    A fresh student (projector + LLM from ``seed``) is built unless ``student``
    is passed together with ``start_stage`` to resume after a checkpoint.
    """
    train = train or TrainConfig()
    if recipe.needs_teacher and teacher is None:
        raise ConfigurationError(
            f"recipe {recipe.label} contains distillation stages (DPT/DFT) and needs a trained teacher")
    t0 = time.perf_counter()
    if student is None:
        enc = teacher.visual_encoder if teacher is not None else None
        student = MultimodalModel.create(student_config, seed=seed, visual_encoder=enc)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    sink = MetricsWriter(out / "metrics.jsonl" if out else None, fresh=start_stage == 0)
    eval_samples = data.split("eval")

    def eval_fn(m):
        return evaluate(m, eval_samples, data.n_colors)

    stage_losses: dict[str, float] = {}
    checkpoints: list[str] = []
    for i, stage in enumerate(recipe.stages):
        if i < start_stage:
            continue
        report = run_stage(student, teacher, stage, data.split(stage.split), train, seed,
                           stage_index=i, sink=sink, eval_fn=eval_fn)
        stage_losses[f"{i}:{stage.kind.value}"] = report.final_loss
        if out:
            path = out / f"stage{i}_{stage.kind.value}.ckpt"
            save_checkpoint(student, path, meta={"recipe": recipe.label, "stage_index": i,
                                                 "seed": seed})
            checkpoints.append(str(path))
    metrics = eval_fn(student)
    record = RunRecord(recipe=recipe.label, seed=seed, stage_losses=stage_losses,
                       accuracy=metrics["accuracy"], eval_ce=metrics["eval_ce"],
                       wall_clock_seconds=time.perf_counter() - t0, checkpoints=checkpoints,
                       label=label or recipe.label)
    if out:
        payload = {"version": RECORD_VERSION, **record.to_dict()}
        (out / "run_record.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return record


def train_teacher(config: ModelConfig, data: Dataset, train: TrainConfig | None = None,
                  seed: int = 0, out_dir: str | Path | None = None) -> tuple[MultimodalModel, list[StageReport]]:
    """PT (projector only) then SFT (projector + LLM), both on the autoregressive loss."""
    train = train or TrainConfig()
    teacher = MultimodalModel.create(config, seed=seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    sink = MetricsWriter(out / "metrics.jsonl" if out else None, fresh=True)
    eval_samples = data.split("eval")
    recipe = parse_recipe("PT-SFT", train=train)
    reports = []
    for i, stage in enumerate(recipe.stages):
        reports.append(run_stage(teacher, None, stage, data.split(stage.split), train, seed, i,
                                 sink=sink, eval_fn=lambda m: evaluate(m, eval_samples, data.n_colors)))
    teacher.set_inference_mode()
    return teacher, reports


# -- ablations --------------------------------------------------------------------------------

AXES = ("recipes", "divergences", "targets", "teacher_sizes")
RECIPE_ROWS = ("PT-SFT", "DPT-SFT", "PT-DFT", "DPT-DFT", "PT-SFT-DFT", "DPT-SFT-DFT")
DIVERGENCE_ROWS = ("FKL", "RKL", "JSD")
TARGET_ROWS = (
    frozenset({"response"}),
    frozenset({"response", "prompt"}),
    frozenset({"response", "visual"}),
    frozenset({"response", "prompt", "visual"}),
)
TEACHER_SIZE_ROWS = ("teacher-small", "teacher-large")


def mask_label(mask) -> str:
    return "+".join(t for t in ("response", "prompt", "visual") if t in mask)


@dataclass
class Cell:
    label: str
    recipe: Recipe
    teacher_key: str = "default"


def ablation_cells(axis: str, base: DistillConfig, train: TrainConfig,
                   recipe_label: str = "DPT-SFT-DFT") -> list[Cell]:
    if axis not in AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")
    if axis == "recipes":
        return [Cell(r, parse_recipe(r, base, train)) for r in RECIPE_ROWS]
    if axis == "divergences":
        return [Cell(d, parse_recipe(recipe_label, base.with_(divergence=d), train))
                for d in DIVERGENCE_ROWS]
    if axis == "targets":
        cells = []
        for mask in TARGET_ROWS:
            r = parse_recipe("DPT-SFT", base, train)
            cells.append(Cell(f"DPT:{mask_label(mask)}",
                              r.with_stage_config(StageKind.DPT, base.with_(target_mask=mask))))
        for mask in TARGET_ROWS:
            r = parse_recipe("DPT-SFT-DFT", base, train)
            cells.append(Cell(f"DFT:{mask_label(mask)}",
                              r.with_stage_config(StageKind.DFT, base.with_(target_mask=mask))))
        return cells
    return [Cell(t, parse_recipe(recipe_label, base, train), teacher_key=t) for t in TEACHER_SIZE_ROWS]


def _run_cell(args):
    cell, student_config, teacher, data, seed, train = args
    return run_recipe(cell.recipe, student_config, teacher, data, seed, train, label=cell.label)


def rank_records(records: list[RunRecord]) -> list[RunRecord]:
    """Best first: higher accuracy, then lower held-out cross-entropy."""
    return sorted(records, key=lambda r: (-r.accuracy, r.eval_ce, r.label))


def ablation_matrix(axis: str, student_config: ModelConfig, teachers: dict[str, MultimodalModel],
                    data: Dataset, seed: int, base: DistillConfig | None = None,
                    train: TrainConfig | None = None, recipe_label: str = "DPT-SFT-DFT",
                    workers: int = 1) -> list[RunRecord]:
    """One run per cell of ``axis`` with a shared seed, ranked best first.

    ``teachers`` maps ``"default"`` (and, for the teacher_sizes axis, each
    preset name) to a trained teacher.
    """
    base = base or DistillConfig()
    train = train or TrainConfig()
    cells = ablation_cells(axis, base, train, recipe_label)
    jobs = []
    for c in cells:
        teacher = teachers.get(c.teacher_key) if c.recipe.needs_teacher else None
        if c.recipe.needs_teacher and teacher is None:
            raise ConfigurationError(f"ablation cell {c.label} needs teacher {c.teacher_key!r}")
        jobs.append((c, student_config, teacher, data, seed, train))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell, jobs))
    else:
        records = [_run_cell(j) for j in jobs]
    return rank_records(records)
