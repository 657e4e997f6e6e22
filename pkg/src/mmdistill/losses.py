"""Autoregressive, token-divergence, and relation losses plus their weighted composites.

Conventions
-----------
* The distribution "for" the token at position ``p`` is logits row ``p - 1``
  (teacher forcing on the shared sequence). Position 0 has no predictor, so a
  prompt of length ``n`` contributes ``n - 1`` rows.
* The teacher side of every divergence and of the relation loss is detached.
* ``reduction="mean"`` averages over the segment's rows per sequence;
  ``"sum"`` adds them. Both then average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from mmdistill import tensor as T
from mmdistill.model import ForwardOutput, TokenSegments
from mmdistill.tensor import ContractError, NumericError, Tensor

DIVERGENCES = ("FKL", "RKL", "JSD")
TARGETS = ("response", "prompt", "visual")
REDUCTIONS = ("mean", "sum")

REFERENCE_WEIGHTS = (1.0, 1.0, 0.5)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0  # response distillation, pre-training stage
    beta: float = 1.0  # visual distillation, pre-training stage
    gamma: float = 0.5  # relation distillation, pre-training stage
    alpha_ft: float = 1.0  # same three, fine-tuning stage
    beta_ft: float = 1.0
    gamma_ft: float = 0.5
    prompt_weight: float = 1.0
    divergence: str = "FKL"
    target_mask: frozenset = frozenset({"response", "visual"})
    temperature: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "target_mask", frozenset(self.target_mask))
        for name in ("alpha", "beta", "gamma", "alpha_ft", "beta_ft", "gamma_ft", "prompt_weight"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {w}")
        if self.divergence not in DIVERGENCES:
            raise ConfigurationError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        unknown = self.target_mask - set(TARGETS)
        if unknown:
            raise ConfigurationError(f"unknown distillation targets {sorted(unknown)}")
        if "response" not in self.target_mask:
            raise ConfigurationError("target_mask must always include 'response'")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")

    def with_(self, **kw) -> "DistillConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["target_mask"] = sorted(self.target_mask)
        return d


# -- helpers -------------------------------------------------------------------------

def _batched(x: Tensor, ndim: int) -> Tensor:
    return x.reshape((1,) + x.shape) if x.ndim == ndim - 1 else x


def _seg_list(segments) -> list[TokenSegments]:
    return [segments] if isinstance(segments, TokenSegments) else list(segments)


def predictor_rows(seg: TokenSegments, name: str) -> tuple[int, int]:
    """Half-open logits-row range predicting the tokens of segment ``name``."""
    lo, hi = getattr(seg, name)
    if hi <= max(lo, 1):
        return (0, 0)
    return (max(lo, 1) - 1, hi - 1)


def row_mask(segments: Sequence[TokenSegments], name: str, length: int) -> np.ndarray:
    mask = np.zeros((len(segments), length), dtype=bool)
    for i, seg in enumerate(segments):
        a, b = predictor_rows(seg, name)
        mask[i, a:b] = True
    return mask


def _reduce(values: Tensor, mask: np.ndarray, reduction: str) -> Tensor:
    """Masked per-sequence sum or mean of (B, T) row values, averaged over B."""
    counts = mask.sum(axis=1)
    if reduction == "mean":
        weights = mask / np.maximum(counts, 1)[:, None]
    else:
        weights = mask.astype(float)
    weights = weights.astype(values.dtype) / mask.shape[0]
    return (values * Tensor(weights)).sum()


# -- autoregressive loss ----------------------------------------------------------------

def autoregressive_loss(logits: Tensor, targets, segments, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of the response tokens only.

    ``targets`` holds the full token sequence(s); entries outside the response
    segment are ignored.
    """
    logits = _batched(logits, 3)
    segs = _seg_list(segments)
    targets = np.asarray(targets, dtype=np.int64).reshape(logits.shape[0], -1)
    b, t, _ = logits.shape
    mask = row_mask(segs, "response", t)
    if not mask.any(axis=1).all():
        raise ContractError("autoregressive_loss: empty response segment")
    nxt = np.zeros((b, t), dtype=np.int64)
    nxt[:, :-1] = targets[:, 1:t]
    nll = -T.pick(T.log_softmax(logits), np.where(mask, nxt, 0))
    return _reduce(nll, mask, reduction)


# -- token divergences ----------------------------------------------------------------------

def _clamped_log_softmax(x: Tensor, temperature: float) -> Tensor:
    return T.clamp_min(T.log_softmax(x, temperature), T.LOG_FLOOR)


def divergence_rows(teacher_logits: Tensor, student_logits: Tensor, kind: str = "FKL",
                    temperature: float = 1.0) -> Tensor:
    """Row-wise divergence over the last axis; the teacher operand is detached."""
    if teacher_logits.shape != student_logits.shape:
        raise T.DimensionError(
            f"teacher logits {teacher_logits.shape} and student logits {student_logits.shape} differ")
    if kind not in DIVERGENCES:
        raise ConfigurationError(f"unknown divergence {kind!r}")
    for name, x in (("teacher", teacher_logits), ("student", student_logits)):
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite {name} logits")
    lt = _clamped_log_softmax(teacher_logits.detach(), temperature).detach()
    pt = Tensor(np.exp(lt.data))
    ls = _clamped_log_softmax(student_logits, temperature)
    if kind == "FKL":
        return (pt * (lt - ls)).sum(axis=-1)
    ps = T.exp(ls)
    if kind == "RKL":
        return (ps * (ls - lt)).sum(axis=-1)
    lm = T.log(T.clamp_min((pt + ps) * 0.5, 1e-12))
    return ((pt * (lt - lm)).sum(axis=-1) + (ps * (ls - lm)).sum(axis=-1)) * 0.5


def token_divergence(teacher_row: Tensor, student_row: Tensor, kind: str = "FKL",
                     temperature: float = 1.0) -> Tensor:
    """Divergence between two single logits rows (shape (V,)) -> scalar."""
    return divergence_rows(teacher_row, student_row, kind, temperature).reshape(())


def _check_pair(teacher_out: ForwardOutput, student_out: ForwardOutput) -> None:
    if teacher_out.logits.shape[:-1] != student_out.logits.shape[:-1]:
        raise ContractError(
            f"teacher/student sequence layouts differ: {teacher_out.logits.shape} vs "
            f"{student_out.logits.shape}")
    if teacher_out.logits.shape[-1] != student_out.logits.shape[-1]:
        raise ContractError("teacher and student vocabularies differ")


def _segment_distill(name: str, teacher_out: ForwardOutput, student_out: ForwardOutput,
                     segments, config: DistillConfig, rows: Tensor | None = None) -> Tensor:
    _check_pair(teacher_out, student_out)
    t_logits = _batched(teacher_out.logits, 3)
    s_logits = _batched(student_out.logits, 3)
    segs = _seg_list(segments)
    if len(segs) != s_logits.shape[0]:
        raise ContractError(f"{len(segs)} segment records for a batch of {s_logits.shape[0]}")
    if rows is None:
        rows = divergence_rows(t_logits, s_logits, config.divergence, config.temperature)
    return _reduce(rows, row_mask(segs, name, s_logits.shape[1]), config.reduction)


def response_distill_loss(teacher_out, student_out, segments, config: DistillConfig) -> Tensor:
    return _segment_distill("response", teacher_out, student_out, segments, config)


def visual_distill_loss(teacher_out, student_out, segments, config: DistillConfig) -> Tensor:
    if "visual" not in config.target_mask:
        raise ConfigurationError("visual_distill_loss called but 'visual' is not in target_mask")
    return _segment_distill("visual", teacher_out, student_out, segments, config)


def prompt_distill_loss(teacher_out, student_out, segments, config: DistillConfig) -> Tensor:
    if "prompt" not in config.target_mask:
        raise ConfigurationError("prompt_distill_loss called but 'prompt' is not in target_mask")
    return _segment_distill("prompt", teacher_out, student_out, segments, config)


# -- relation distillation -------------------------------------------------------------------

def relation_matrix(hidden: Tensor) -> Tensor:
    """Gram matrix Y Y^T of visual-token representations, (N_p, N_p) or batched."""
    if hidden.ndim < 2 or hidden.shape[-2] < 1:
        raise ContractError(f"relation_matrix needs at least one row, got shape {hidden.shape}")
    return T.matmul(hidden, T.swapaxes(hidden, -1, -2))


def relation_loss(r_student: Tensor, r_teacher: Tensor) -> Tensor:
    """1 - flattened cosine similarity, averaged over a leading batch axis if present."""
    if r_student.shape != r_teacher.shape:
        raise T.DimensionError(f"relation matrices differ in shape: {r_student.shape} vs {r_teacher.shape}")
    rs = _batched(r_student, 3)
    rt = _batched(r_teacher.detach(), 3)
    b = rs.shape[0]
    rs_flat = rs.reshape(b, -1)
    rt_flat = rt.reshape(b, -1)
    ns = np.sqrt((rs_flat.data ** 2).sum(axis=1))
    nt = np.sqrt((rt_flat.data ** 2).sum(axis=1))
    if np.any(ns == 0) or np.any(nt == 0):
        raise NumericError("relation_loss: zero-norm relation matrix (degenerate hidden states)")
    inner = (rs_flat * rt_flat).sum(axis=1)
    # one square root over the product keeps cos exactly 1 when both operands are equal
    norms = T.sqrt((rs_flat * rs_flat).sum(axis=1) * Tensor((rt_flat.data * rt_flat.data).sum(axis=1)))
    cos = inner / norms
    return T.clamp_min(1.0 - cos, 0.0).mean()


# -- composites -----------------------------------------------------------------------------

PART_KEYS = ("reg", "res", "vis", "prompt", "rel")


def _combine(parts: Mapping, weights: tuple[float, float, float], config: DistillConfig):
    for key, v in parts.items():
        val = v.data if isinstance(v, Tensor) else v
        if not np.all(np.isfinite(val)):
            raise NumericError(f"loss part {key!r} is not finite")
    alpha, beta, gamma = weights
    total = parts["reg"] + alpha * parts["res"]
    if "visual" in config.target_mask:
        total = total + beta * parts["vis"]
    if "prompt" in config.target_mask and "prompt" in parts:
        total = total + config.prompt_weight * parts["prompt"]
    return total + gamma * parts["rel"]


def dpt_loss(parts: Mapping, config: DistillConfig):
    """L_reg + alpha L_res + beta L_vis + gamma L_rel (+ prompt term when masked in)."""
    return _combine(parts, (config.alpha, config.beta, config.gamma), config)


def dft_loss(parts: Mapping, config: DistillConfig):
    """Fine-tuning counterpart of :func:`dpt_loss` using the primed weights."""
    return _combine(parts, (config.alpha_ft, config.beta_ft, config.gamma_ft), config)


def loss_parts(student_out: ForwardOutput, teacher_out: ForwardOutput | None, tokens,
               segments: Sequence[TokenSegments], config: DistillConfig) -> dict[str, Tensor]:
    """Every loss part for one batch, sharing one divergence pass over all rows.

    With no teacher only ``reg`` is returned.
    """
    parts = {"reg": autoregressive_loss(student_out.logits, tokens, segments, config.reduction)}
    if teacher_out is None:
        return parts
    rows = divergence_rows(_batched(teacher_out.logits, 3), _batched(student_out.logits, 3),
                           config.divergence, config.temperature)
    parts["res"] = _segment_distill("response", teacher_out, student_out, segments, config, rows)
    if "visual" in config.target_mask:
        parts["vis"] = _segment_distill("visual", teacher_out, student_out, segments, config, rows)
    if "prompt" in config.target_mask:
        parts["prompt"] = _segment_distill("prompt", teacher_out, student_out, segments, config, rows)
    parts["rel"] = relation_loss(relation_matrix(student_out.visual_hidden),
                                 relation_matrix(teacher_out.visual_hidden))
    return parts
