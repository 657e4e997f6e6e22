"""INI run configuration: one level of sections, flat keys, unknown keys rejected.

Every section and key is optional; omitted values take the defaults below.
Errors carry ``path:line:`` prefixes.
"""

from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from mmdistill.data import VOCAB, Dataset, generate_dataset
from mmdistill.losses import DistillConfig
from mmdistill.model import TEACHER_PRESETS, ModelConfig, student_config, teacher_config
from mmdistill.training import TrainConfig

OUTPUT_ENV = "MMDISTILL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "data": {
        "pretrain_size": (int, 2000),
        "finetune_size": (int, 2000),
        "eval_size": (int, 500),
        "grid_size": (int, 3),
        "n_colors": (int, 6),
        "image_size": (int, 24),
        "seed": (int, 0),
    },
    "model": {
        "patch_size": (int, 8),
        "encoder_dim": (int, 64),
        "encoder_layers": (int, 1),
        "encoder_heads": (int, 4),
        "encoder_seed": (int, 1234),
        "max_seq_len": (int, 32),
        "dtype": (str, "float64"),
    },
    "teacher": {
        "preset": (str, "teacher-large"),
        "embed_dim": (int, 0),
        "llm_layers": (int, 0),
        "llm_heads": (int, 0),
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 32),
        "pretrain_epochs": (int, 3),
        "finetune_epochs": (int, 10),
        "seed": (int, 0),
    },
    "student": {
        "embed_dim": (int, 48),
        "llm_layers": (int, 2),
        "llm_heads": (int, 4),
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 32),
        "pretrain_epochs": (int, 3),
        "finetune_epochs": (int, 5),
    },
    "distill": {
        "alpha": (float, 1.0),
        "beta": (float, 1.0),
        "gamma": (float, 0.5),
        "alpha_ft": (float, 1.0),
        "beta_ft": (float, 1.0),
        "gamma_ft": (float, 0.5),
        "prompt_weight": (float, 1.0),
        "divergence": (str, "FKL"),
        "target_mask": (str, "response,visual"),
        "temperature": (float, 1.0),
        "reduction": (str, "mean"),
    },
    "run": {
        "recipe": (str, "DPT-SFT-DFT"),
        "seeds": (str, "0"),
        "output_dir": (str, "runs"),
        "workers": (int, 1),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    # -- derived objects -------------------------------------------------------------
    def dataset(self) -> Dataset:
        d = self["data"]
        return generate_dataset(
            {"pretrain": d["pretrain_size"], "finetune": d["finetune_size"], "eval": d["eval_size"]},
            grid_size=d["grid_size"], n_colors=d["n_colors"], seed=d["seed"],
            image_size=d["image_size"])

    def _shared_model(self) -> dict:
        m = self["model"]
        return dict(image_size=self["data"]["image_size"], patch_size=m["patch_size"],
                    encoder_dim=m["encoder_dim"], encoder_layers=m["encoder_layers"],
                    encoder_heads=m["encoder_heads"], encoder_seed=m["encoder_seed"],
                    max_seq_len=m["max_seq_len"], dtype=m["dtype"], vocab_size=len(VOCAB))

    def teacher_model(self, preset: str | None = None) -> ModelConfig:
        t = self["teacher"]
        overrides = {k: t[k] for k in ("embed_dim", "llm_layers", "llm_heads") if t[k] and preset is None}
        return teacher_config(preset or t["preset"], **self._shared_model(), **overrides)

    def student_model(self) -> ModelConfig:
        s = self["student"]
        return student_config(embed_dim=s["embed_dim"], llm_layers=s["llm_layers"],
                              llm_heads=s["llm_heads"], **self._shared_model())

    def _train(self, section: str) -> TrainConfig:
        s = self[section]
        return TrainConfig(learning_rate=s["learning_rate"], batch_size=s["batch_size"],
                           pretrain_epochs=s["pretrain_epochs"], finetune_epochs=s["finetune_epochs"])

    def teacher_train(self) -> TrainConfig:
        return self._train("teacher")

    def student_train(self) -> TrainConfig:
        return self._train("student")

    def distill(self) -> DistillConfig:
        d = dict(self["distill"])
        d["target_mask"] = frozenset(t.strip() for t in str(d["target_mask"]).split(",") if t.strip())
        return DistillConfig(**d)

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in str(self["run"]["seeds"]).split(",") if s.strip()]

    @property
    def recipes(self) -> list[str]:
        return [r.strip() for r in str(self["run"]["recipe"]).split(",") if r.strip()]

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self["run"]["output_dir"])

    # -- serialisation ------------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            cp[section] = {k: _fmt(self.values[section][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write_echo(self, directory: str | Path) -> Path:
        path = Path(directory) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key:
                return i
    return 0


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        lineno = getattr(e, "lineno", 0)
        msg = str(e).splitlines()[0]
        raise ConfigError(f"{source}:{lineno}: {msg}") from None
    cfg = defaults()
    cfg.source = source
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]; "
                              f"valid sections: {', '.join(SCHEMA)}")
        for key, raw in cp[section].items():
            line = _line_of(text, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]; "
                                  f"valid keys: {', '.join(SCHEMA[section])}")
            typ = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = typ(raw.strip())
            except ValueError:
                raise ConfigError(f"{source}:{line}: [{section}] {key} = {raw!r} is not a valid "
                                  f"{typ.__name__}") from None
    _validate(cfg, text, source)
    return cfg


def _validate(cfg: RunConfig, text: str, source: str) -> None:
    def fail(section, key, msg):
        raise ConfigError(f"{source}:{_line_of(text, section, key)}: [{section}] {key}: {msg}")

    if cfg["teacher"]["preset"] not in TEACHER_PRESETS:
        fail("teacher", "preset", f"unknown preset; choose from {', '.join(TEACHER_PRESETS)}")
    try:
        cfg.distill()
    except ValueError as e:
        fail("distill", "target_mask" if "target" in str(e) else "divergence", str(e))
    for section in ("teacher", "student"):
        for key in ("learning_rate", "batch_size", "pretrain_epochs", "finetune_epochs"):
            if cfg[section][key] <= 0:
                fail(section, key, "must be positive")
    try:
        cfg.student_model()
        cfg.teacher_model()
    except ValueError as e:
        fail("model", "dtype", str(e))
    try:
        cfg.seeds
    except ValueError:
        fail("run", "seeds", "must be a comma-separated list of integers")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_config(text, str(path))
