"""Synthetic colored-grid VQA task.

Each image is a K x K grid of palette colors rendered as uniform blocks.
Two sample kinds exist:

* caption (pretrain split): ``<bos> describe the grid`` -> every cell's color
  in row-major order, then ``<eos>``.
* qa (finetune and eval splits): ``<bos> what color is at row i col j ?`` ->
  ``<color> <eos>``.

Datasets persist as JSON lines: one header record, then one record per
sample (see :func:`save_dataset`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from mmdistill.tensor import ContractError
from mmdistill.model import MultimodalModel, TokenSegments, greedy_decode_batch

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
COLOR_WORDS = list(PALETTE)
MAX_GRID = 10

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
_WORDS = ["describe", "the", "grid", "what", "color", "is", "at", "row", "col", "?"]
LEXICON = [PAD, BOS, EOS] + COLOR_WORDS + [str(i) for i in range(MAX_GRID)] + _WORDS

CAPTION_PROMPT = f"{BOS} describe the grid"
SPLITS = ("pretrain", "finetune", "eval")
DATASET_FORMAT = "mmdistill-dataset"
DATASET_VERSION = 1


class ConfigurationError(ValueError):
    pass


class TokenizationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class Vocab:
    """Closed word-level vocabulary shared verbatim by teacher and student."""

    def __init__(self, words: Sequence[str] = LEXICON):
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate words in lexicon")
        self.pad_id = self.ids[PAD]
        self.bos_id = self.ids[BOS]
        self.eos_id = self.ids[EOS]

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> list[int]:
        out = []
        for w in text.split():
            if w not in self.ids:
                raise TokenizationError(f"word {w!r} is not in the vocabulary")
            out.append(self.ids[w])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def color_ids(self, n_colors: int) -> list[int]:
        return [self.ids[w] for w in COLOR_WORDS[:n_colors]]


VOCAB = Vocab()


def tokenize(text: str) -> list[int]:
    return VOCAB.tokenize(text)


def detokenize(ids: Sequence[int]) -> str:
    return VOCAB.detokenize(ids)


def render(cells: np.ndarray, image_size: int) -> np.ndarray:
    """Cells (K, K) of palette indices -> (H, W, 3) image in [0, 1]."""
    k = cells.shape[0]
    block = image_size // k
    rgb = np.array([PALETTE[c] for c in COLOR_WORDS])
    small = rgb[cells]  # (K, K, 3)
    return np.repeat(np.repeat(small, block, axis=0), block, axis=1)


def caption_for(cells: np.ndarray) -> str:
    return " ".join(COLOR_WORDS[c] for c in cells.reshape(-1)) + f" {EOS}"


def question_for(row: int, col: int) -> str:
    return f"{BOS} what color is at row {row} col {col} ?"


def answer_for(cells: np.ndarray, row: int, col: int) -> str:
    return f"{COLOR_WORDS[cells[row, col]]} {EOS}"


@dataclass
class Sample:
    cells: np.ndarray
    prompt: str
    response: str
    split: str
    kind: str  # "caption" | "qa"
    query: tuple[int, int] | None = None
    _tokens: tuple[list[int], list[int]] | None = field(default=None, repr=False, compare=False)

    @property
    def prompt_tokens(self) -> list[int]:
        return self._tok()[0]

    @property
    def response_tokens(self) -> list[int]:
        return self._tok()[1]

    def _tok(self):
        if self._tokens is None:
            self._tokens = (tokenize(self.prompt), tokenize(self.response))
        return self._tokens

    def image(self, image_size: int) -> np.ndarray:
        return render(self.cells, image_size)

    def expected_response(self) -> str:
        """Re-derive the response from the cells by rule."""
        if self.kind == "caption":
            return caption_for(self.cells)
        return answer_for(self.cells, *self.query)


@dataclass
class Dataset:
    grid_size: int
    n_colors: int
    image_size: int
    seed: int
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [s for s in self.samples if s.split == name]

    def sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}


def _distinct_grids(rng: np.random.Generator, n: int, k: int, p: int) -> list[np.ndarray]:
    space = p ** (k * k)
    if n > space:
        raise ConfigurationError(
            f"requested {n} distinct grids but only {space} exist for K={k}, P={p}")
    if space <= 200_000:
        codes = rng.permutation(space)[:n]
        out = []
        for code in codes:
            digits = []
            for _ in range(k * k):
                digits.append(code % p)
                code //= p
            out.append(np.array(digits, dtype=np.int64).reshape(k, k))
        return out
    seen: set[bytes] = set()
    out = []
    while len(out) < n:
        g = rng.integers(0, p, size=(k, k))
        key = g.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(g)
    return out


def generate_dataset(sizes: dict[str, int], grid_size: int = 3, n_colors: int = 6,
                     seed: int = 0, image_size: int = 24) -> Dataset:
    """Deterministic dataset; every sample has its own grid, so splits never share one.

    Eval questions cycle through the cells so every cell is asked equally often.
    """
    for name, n in sizes.items():
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}")
        if n < 1:
            raise ConfigurationError(f"split {name!r} must have at least one sample, got {n}")
    if not 2 <= n_colors <= len(PALETTE):
        raise ConfigurationError(
            f"n_colors must be between 2 and {len(PALETTE)} (palette size), got {n_colors}")
    if not 1 <= grid_size <= MAX_GRID:
        raise ConfigurationError(f"grid_size must be between 1 and {MAX_GRID}, got {grid_size}")
    if image_size % grid_size:
        raise ConfigurationError(f"image_size {image_size} not divisible by grid_size {grid_size}")

    rng = np.random.default_rng(seed)
    total = sum(sizes.values())
    grids = iter(_distinct_grids(rng, total, grid_size, n_colors))
    samples: list[Sample] = []
    for name in SPLITS:
        for i in range(sizes.get(name, 0)):
            cells = next(grids)
            if name == "pretrain":
                samples.append(Sample(cells, CAPTION_PROMPT, caption_for(cells), name, "caption"))
                continue
            if name == "eval":
                cell = i % (grid_size * grid_size)
            else:
                cell = int(rng.integers(0, grid_size * grid_size))
            r, c = divmod(cell, grid_size)
            samples.append(Sample(cells, question_for(r, c), answer_for(cells, r, c), name, "qa", (r, c)))
    return Dataset(grid_size, n_colors, image_size, seed, samples)


# -- persistence --------------------------------------------------------------

def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Header line ``{"format", "version", "grid_size", "n_colors", "image_size", "seed"}``
    followed by one ``{"split", "kind", "cells", "query", "prompt", "response"}`` per sample."""
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "grid_size": ds.grid_size,
              "n_colors": ds.n_colors, "image_size": ds.image_size, "seed": ds.seed}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in ds.samples:
            rec = {"split": s.split, "kind": s.kind, "cells": s.cells.tolist(),
                   "query": list(s.query) if s.query else None,
                   "prompt": s.prompt, "response": s.response}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:1: invalid header: {e}") from None
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}:1: expected {DATASET_FORMAT} version {DATASET_VERSION}, "
            f"found {header.get('format')} version {header.get('version')}")
    k, p = header["grid_size"], header["n_colors"]
    samples = []
    seen: dict[bytes, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            cells = np.asarray(rec["cells"], dtype=np.int64)
            query = tuple(rec["query"]) if rec["query"] is not None else None
            s = Sample(cells, rec["prompt"], rec["response"], rec["split"], rec["kind"], query)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record: {e}") from None
        if cells.shape != (k, k) or cells.min() < 0 or cells.max() >= p:
            raise DatasetFormatError(f"{path}:{lineno}: cells must be a {k}x{k} grid of ids < {p}")
        if s.split not in SPLITS or s.kind not in ("caption", "qa"):
            raise DatasetFormatError(f"{path}:{lineno}: bad split/kind {s.split!r}/{s.kind!r}")
        if s.kind == "qa" and s.prompt != question_for(*s.query):
            raise DatasetFormatError(f"{path}:{lineno}: prompt does not match query {s.query}")
        if s.response != s.expected_response():
            raise DatasetFormatError(f"{path}:{lineno}: response disagrees with grid contents")
        try:
            s.prompt_tokens, s.response_tokens
        except TokenizationError as e:
            raise DatasetFormatError(f"{path}:{lineno}: {e}") from None
        key = cells.tobytes()
        if seen.setdefault(key, s.split) != s.split:
            raise DatasetFormatError(f"{path}:{lineno}: grid also appears in split {seen[key]!r}")
        samples.append(s)
    return Dataset(k, p, header["image_size"], header["seed"], samples)


# -- batching -------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray  # (B, T); pad id at visual and padding positions
    images: np.ndarray  # (B, H, W, 3)
    visual_index: np.ndarray  # (B, N_p)
    segments: list[TokenSegments]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def make_batch(samples: Sequence[Sample], n_patches: int, image_size: int,
               pad_to: int | None = None, vocab: Vocab = VOCAB) -> Batch:
    """Lay out ``[prompt, visual, response]`` per sample, right-padded to a common length."""
    segs = [TokenSegments.from_lengths(len(s.prompt_tokens), n_patches, len(s.response_tokens))
            for s in samples]
    t = max(s.length for s in segs)
    if pad_to is not None:
        t = max(t, pad_to)
    tokens = np.full((len(samples), t), vocab.pad_id, dtype=np.int64)
    vis = np.zeros((len(samples), n_patches), dtype=np.int64)
    for i, (s, seg) in enumerate(zip(samples, segs)):
        tokens[i, : seg.prompt[1]] = s.prompt_tokens
        tokens[i, seg.response[0]: seg.response[1]] = s.response_tokens
        vis[i] = np.arange(*seg.visual)
    images = np.stack([s.image(image_size) for s in samples])
    return Batch(tokens, images, vis, segs)


def epoch_order(n: int, seed: int | tuple[int, ...], epoch: int) -> np.ndarray:
    key = list(seed) if isinstance(seed, tuple) else [seed]
    return np.random.default_rng(key + [epoch]).permutation(n)


def batch_iterator(samples: Sequence[Sample], batch_size: int, seed: int | tuple[int, ...], epoch: int,
                   n_patches: int, image_size: int, shuffle: bool = True,
                   pad_to: int | None = None) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise ContractError("cannot iterate over an empty split")
    order = epoch_order(len(samples), seed, epoch) if shuffle else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start: start + batch_size]]
        yield make_batch(chunk, n_patches, image_size, pad_to=pad_to)


# -- evaluation -------------------------------------------------------------------

Predictor = Callable[[Sequence[Sample]], list[list[int]]]


def model_predictor(model: MultimodalModel, n_colors: int, image_size: int,
                    batch_size: int = 128, vocab: Vocab = VOCAB) -> Predictor:
    """Greedy answers over the closed answer set: exactly as many palette words as the
    reference answer has (the ``<eos>`` terminator is not decoded)."""
    allowed = vocab.color_ids(n_colors)

    def predict(samples: Sequence[Sample]) -> list[list[int]]:
        out: list[list[int]] = [None] * len(samples)  # type: ignore[list-item]
        by_len: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(samples):
            by_len.setdefault((len(s.prompt_tokens), len(s.response_tokens)), []).append(i)
        for (_, n_resp), idx in sorted(by_len.items()):
            for start in range(0, len(idx), batch_size):
                part = idx[start: start + batch_size]
                images = np.stack([samples[i].image(image_size) for i in part])
                prompts = np.array([samples[i].prompt_tokens for i in part])
                decoded = greedy_decode_batch(model, images, prompts, n_resp - 1,
                                              allowed=allowed)
                for i, d in zip(part, decoded):
                    out[i] = d
        return out

    return predict


def answer_tokens(sample: Sample) -> list[int]:
    """Rule-derived answer without the trailing ``<eos>``."""
    ids = tokenize(sample.expected_response())
    return ids[:-1] if ids and ids[-1] == VOCAB.eos_id else ids


def oracle_predictor(samples: Sequence[Sample]) -> list[list[int]]:
    """Reads the answer straight off the grid."""
    return [answer_tokens(s) for s in samples]


def exact_match_eval(predict: Predictor, samples: Sequence[Sample]) -> float:
    """Fraction of samples whose predicted answer equals the rule-derived answer.

    A prediction may carry a trailing ``<eos>``; it is ignored.
    """
    if not samples:
        raise ValueError("eval split is empty")
    preds = predict(samples)
    hits = 0
    for p, s in zip(preds, samples):
        p = list(p)
        if p and p[-1] == VOCAB.eos_id:
            p = p[:-1]
        hits += p == answer_tokens(s)
    return hits / len(samples)
