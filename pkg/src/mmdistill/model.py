"""Toy multimodal model: frozen patch encoder, two-layer projector, causal decoder LM.

A sequence is laid out as ``[prompt, visual, response]``. Visual positions
carry projected patch features instead of token embeddings. Row ``t`` of
the logits is the next-token distribution for position ``t + 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from mmdistill import tensor as T
from mmdistill.optim import ParameterGroup
from mmdistill.tensor import DimensionError, Tensor, no_grad

GROUPS = ("visual_encoder", "projector", "llm")
# Small-init GPT defaults (0.02) leave position embeddings swamped by the projected
# visual features and the cell lookup never gets learned at toy scale.
INIT_GAIN = 1.2


class CapacityError(ValueError):
    """Sequence does not fit in ``max_seq_len``."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 24
    patch_size: int = 8
    encoder_dim: int = 64
    encoder_layers: int = 1
    encoder_heads: int = 4
    embed_dim: int = 48
    llm_layers: int = 2
    llm_heads: int = 4
    projector_hidden: int = 0  # 0 means "same as embed_dim"
    vocab_size: int = 32
    max_seq_len: int = 32
    mlp_ratio: int = 4
    role: str = "student"
    dtype: str = "float64"
    init_std: float = 0.0  # 0 means INIT_GAIN / sqrt(embed_dim)
    encoder_seed: int = 1234

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be 'teacher' or 'student', got {self.role!r}")
        if self.embed_dim % self.llm_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by llm_heads {self.llm_heads}")
        if self.encoder_dim % self.encoder_heads:
            raise ValueError(
                f"encoder_dim {self.encoder_dim} not divisible by encoder_heads {self.encoder_heads}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden(self) -> int:
        return self.projector_hidden or self.embed_dim

    @property
    def weight_std(self) -> float:
        return self.init_std or INIT_GAIN / math.sqrt(self.embed_dim)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


TEACHER_PRESETS = {
    "teacher-large": dict(embed_dim=128, llm_layers=4, llm_heads=4),
    "teacher-small": dict(embed_dim=96, llm_layers=3, llm_heads=4),
}
STUDENT_PRESET = dict(embed_dim=48, llm_layers=2, llm_heads=4)


def teacher_config(preset: str = "teacher-large", **overrides) -> ModelConfig:
    return ModelConfig(role="teacher", **{**TEACHER_PRESETS[preset], **overrides})


def student_config(**overrides) -> ModelConfig:
    return ModelConfig(role="student", **{**STUDENT_PRESET, **overrides})


@dataclass
class TokenSegments:
    """Half-open position ranges of one sequence; they tile ``[0, length)``."""

    prompt: tuple[int, int]
    visual: tuple[int, int]
    response: tuple[int, int]

    def __post_init__(self):
        p, v, r = self.prompt, self.visual, self.response
        if not (p[0] == 0 and p[0] <= p[1] == v[0] <= v[1] == r[0] <= r[1]):
            raise ValueError(f"segments must tile [0, T) in prompt<visual<response order: {self}")

    @classmethod
    def from_lengths(cls, n_prompt: int, n_visual: int, n_response: int) -> "TokenSegments":
        a = n_prompt
        b = a + n_visual
        return cls((0, a), (a, b), (b, b + n_response))

    @property
    def length(self) -> int:
        return self.response[1]

    def size(self, name: str) -> int:
        lo, hi = getattr(self, name)
        return hi - lo


@dataclass
class ForwardOutput:
    logits: Tensor  # (T, V) or (B, T, V)
    visual_hidden: Tensor  # (N_p, D) or (B, N_p, D)


def _init(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _add_block(group: ParameterGroup, prefix: str, dim: int, ratio: int, rng, std, dtype,
               n_layers: int) -> None:
    proj_std = std / math.sqrt(2 * max(n_layers, 1))
    for name in ("ln1", "ln2"):
        group.add(f"{prefix}.{name}_g", _ones(dim, dtype))
        group.add(f"{prefix}.{name}_b", _zeros(dim, dtype))
    for name in ("wq", "wk", "wv"):
        group.add(f"{prefix}.{name}", _init(rng, (dim, dim), std, dtype))
        group.add(f"{prefix}.{name[1]}_b", _zeros(dim, dtype))
    group.add(f"{prefix}.wo", _init(rng, (dim, dim), proj_std, dtype))
    group.add(f"{prefix}.o_b", _zeros(dim, dtype))
    group.add(f"{prefix}.fc1", _init(rng, (dim, ratio * dim), std, dtype))
    group.add(f"{prefix}.fc1_b", _zeros(ratio * dim, dtype))
    group.add(f"{prefix}.fc2", _init(rng, (ratio * dim, dim), proj_std, dtype))
    group.add(f"{prefix}.fc2_b", _zeros(dim, dtype))


def build_visual_encoder(cfg: ModelConfig) -> ParameterGroup:
    """Random patch transformer, seeded by ``cfg.encoder_seed`` and frozen."""
    rng = np.random.default_rng(cfg.encoder_seed)
    dt = cfg.np_dtype
    g = ParameterGroup("visual_encoder", trainable=False)
    patch_in = cfg.patch_size * cfg.patch_size * 3
    g.add("patch_w", _init(rng, (patch_in, cfg.encoder_dim), 1.0 / math.sqrt(patch_in), dt))
    g.add("patch_b", _init(rng, (cfg.encoder_dim,), 0.1, dt))
    g.add("pos", _init(rng, (cfg.n_patches, cfg.encoder_dim), 0.1, dt))
    for i in range(cfg.encoder_layers):
        _add_block(g, f"blocks.{i}", cfg.encoder_dim, cfg.mlp_ratio, rng, 0.1, dt, cfg.encoder_layers)
    g.add("ln_g", _ones(cfg.encoder_dim, dt))
    g.add("ln_b", _zeros(cfg.encoder_dim, dt))
    return g


def build_projector(cfg: ModelConfig, rng: np.random.Generator) -> ParameterGroup:
    dt = cfg.np_dtype
    g = ParameterGroup("projector")
    g.add("w1", _init(rng, (cfg.encoder_dim, cfg.hidden), 1.0 / math.sqrt(cfg.encoder_dim), dt))
    g.add("b1", _zeros(cfg.hidden, dt))
    g.add("w2", _init(rng, (cfg.hidden, cfg.embed_dim), 1.0 / math.sqrt(cfg.hidden), dt))
    g.add("b2", _zeros(cfg.embed_dim, dt))
    return g


def build_llm(cfg: ModelConfig, rng: np.random.Generator) -> ParameterGroup:
    dt = cfg.np_dtype
    std = cfg.weight_std
    g = ParameterGroup("llm")
    g.add("tok_emb", _init(rng, (cfg.vocab_size, cfg.embed_dim), std, dt))
    g.add("pos_emb", _init(rng, (cfg.max_seq_len, cfg.embed_dim), std, dt))
    for i in range(cfg.llm_layers):
        _add_block(g, f"blocks.{i}", cfg.embed_dim, cfg.mlp_ratio, rng, std, dt, cfg.llm_layers)
    g.add("ln_f_g", _ones(cfg.embed_dim, dt))
    g.add("ln_f_b", _zeros(cfg.embed_dim, dt))
    g.add("head_w", _init(rng, (cfg.embed_dim, cfg.vocab_size), std, dt))
    g.add("head_b", _zeros(cfg.vocab_size, dt))
    return g


class MultimodalModel:
    """Visual encoder + projector + decoder LM, each a :class:`ParameterGroup`."""

    def __init__(self, config: ModelConfig, visual_encoder: ParameterGroup,
                 projector: ParameterGroup, llm: ParameterGroup):
        self.config = config
        self.visual_encoder = visual_encoder
        self.projector = projector
        self.llm = llm

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0,
               visual_encoder: ParameterGroup | None = None) -> "MultimodalModel":
        """Fresh projector and LLM from ``seed``.

        Pass ``visual_encoder`` to share another model's encoder parameters
        (teacher and student must see identical visual features).
        """
        if visual_encoder is None:
            visual_encoder = build_visual_encoder(config)
        else:
            _check_encoder_compatible(config, visual_encoder)
        rng = np.random.default_rng(seed)
        return cls(config, visual_encoder, build_projector(config, rng), build_llm(config, rng))

    @property
    def groups(self) -> list[ParameterGroup]:
        return [self.visual_encoder, self.projector, self.llm]

    def group(self, name: str) -> ParameterGroup:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def named_parameters(self):
        for g in self.groups:
            for key, p in g.items():
                yield f"{g.name}/{key}", p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise DimensionError(f"{k}: expected shape {p.data.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def set_inference_mode(self) -> None:
        """Freeze every group; used for a teacher during distillation."""
        for g in self.groups:
            g.set_trainable(False)

    def parameter_counts(self) -> dict[str, int]:
        return {g.name: g.num_parameters() for g in self.groups}

    def forward_batch(self, batch) -> ForwardOutput:
        return forward_batch(self, batch.tokens, batch.images, batch.visual_index)


def _check_encoder_compatible(cfg: ModelConfig, enc: ParameterGroup) -> None:
    w = enc["patch_w"].data
    if w.shape != (cfg.patch_size * cfg.patch_size * 3, cfg.encoder_dim):
        raise DimensionError(f"shared visual encoder has patch_w {w.shape}, incompatible with config")


# -- building blocks ----------------------------------------------------------------

def _attention(x: Tensor, g: ParameterGroup, prefix: str, heads: int, causal: bool) -> Tensor:
    b, t, d = x.shape
    hd = d // heads

    def split(w: str) -> Tensor:
        y = T.linear(x, g[f"{prefix}.w{w}"], g[f"{prefix}.{w}_b"])
        return T.transpose(y.reshape(b, t, heads, hd), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd))
    if causal:
        mask = np.tril(np.ones((t, t), dtype=bool))
        att = T.masked_softmax(scores, np.broadcast_to(mask, scores.shape))
    else:
        att = T.softmax(scores)
    out = T.transpose(T.matmul(att, v), (0, 2, 1, 3)).reshape(b, t, d)
    return T.linear(out, g[f"{prefix}.wo"], g[f"{prefix}.o_b"])


def _block(x: Tensor, g: ParameterGroup, prefix: str, heads: int, causal: bool) -> Tensor:
    h = T.layer_norm(x, g[f"{prefix}.ln1_g"], g[f"{prefix}.ln1_b"])
    x = x + _attention(h, g, prefix, heads, causal)
    h = T.layer_norm(x, g[f"{prefix}.ln2_g"], g[f"{prefix}.ln2_b"])
    h = T.gelu(T.linear(h, g[f"{prefix}.fc1"], g[f"{prefix}.fc1_b"]))
    return x + T.linear(h, g[f"{prefix}.fc2"], g[f"{prefix}.fc2_b"])


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N_p, S_p*S_p*3), patches in row-major order."""
    b, h, w, c = images.shape
    s = patch_size
    x = images.reshape(b, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // s) * (w // s), s * s * c)


def encode_images(model: MultimodalModel, images: np.ndarray) -> Tensor:
    """Batched frozen encoder: (B, H, W, 3) -> Z_v of shape (B, N_p, C)."""
    cfg = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
    g = model.visual_encoder
    with no_grad():
        x = Tensor(patchify(images.astype(cfg.np_dtype), cfg.patch_size))
        x = T.linear(x, g["patch_w"], g["patch_b"]) + g["pos"]
        for i in range(cfg.encoder_layers):
            x = _block(x, g, f"blocks.{i}", cfg.encoder_heads, causal=False)
        x = T.layer_norm(x, g["ln_g"], g["ln_b"])
    return x.detach()


def encode_image(model: MultimodalModel, image: np.ndarray) -> Tensor:
    """Single image (H, W, 3) -> patch features (N_p, C)."""
    image = np.asarray(image)
    cfg = model.config
    if image.shape != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"expected image of shape ({cfg.image_size}, {cfg.image_size}, 3), got {image.shape}")
    z = encode_images(model, image[None])
    return Tensor(z.data[0])


def project(model: MultimodalModel, z_v: Tensor) -> Tensor:
    """linear -> GELU -> linear into the LM embedding space."""
    g = model.projector
    c = model.config.encoder_dim
    if z_v.shape[-1] != c:
        raise DimensionError(f"projector expects feature dim {c}, got {z_v.shape[-1]}")
    return T.linear(T.gelu(T.linear(z_v, g["w1"], g["b1"])), g["w2"], g["b2"])


def forward_batch(model: MultimodalModel, tokens: np.ndarray, images: np.ndarray,
                  visual_index: np.ndarray, features: Tensor | None = None) -> ForwardOutput:
    """Batched forward.

    ``tokens`` is (B, T) with arbitrary ids at visual positions (they are
    replaced by projected features); ``visual_index`` is (B, N_p).
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise CapacityError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    visual_index = np.asarray(visual_index)
    g = model.llm
    z = features if features is not None else encode_images(model, images)
    h_v = project(model, z)
    text = np.ones((b, t, cfg.embed_dim), dtype=cfg.np_dtype)
    text[np.arange(b)[:, None], visual_index] = 0.0
    x = T.embedding(g["tok_emb"], tokens) * Tensor(text)
    x = x + T.scatter_rows(h_v, visual_index, t) + g["pos_emb"][:t]
    for i in range(cfg.llm_layers):
        x = _block(x, g, f"blocks.{i}", cfg.llm_heads, causal=True)
    h = T.layer_norm(x, g["ln_f_g"], g["ln_f_b"])
    logits = T.linear(h, g["head_w"], g["head_b"])
    return ForwardOutput(logits=logits, visual_hidden=T.gather_rows(h, visual_index))


def forward(model: MultimodalModel, image: np.ndarray, prompt_tokens: Sequence[int],
            response_tokens: Sequence[int]) -> tuple[ForwardOutput, TokenSegments]:
    """Single-sequence forward over ``[prompt, visual, response]``."""
    cfg = model.config
    seg = TokenSegments.from_lengths(len(prompt_tokens), cfg.n_patches, len(response_tokens))
    if seg.length > cfg.max_seq_len:
        raise CapacityError(f"sequence length {seg.length} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.zeros((1, seg.length), dtype=np.int64)
    ids[0, : seg.prompt[1]] = prompt_tokens
    ids[0, seg.response[0]:] = response_tokens
    vis = np.arange(*seg.visual)[None]
    out = forward_batch(model, ids, np.asarray(image)[None], vis)
    t, v = seg.length, cfg.vocab_size
    return ForwardOutput(out.logits.reshape(t, v),
                         out.visual_hidden.reshape(cfg.n_patches, cfg.embed_dim)), seg


def greedy_decode_batch(model: MultimodalModel, images: np.ndarray, prompts: np.ndarray,
                        max_new: int, eos_id: int | None = None,
                        allowed: Sequence[int] | None = None) -> list[list[int]]:
    """Argmax decoding for prompts of equal length; ties go to the lowest id.

    ``allowed`` restricts the candidate set (closed-vocabulary answering).
    Each returned list stops after the first ``eos_id``.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    cfg = model.config
    prompts = np.asarray(prompts, dtype=np.int64)
    b, p = prompts.shape
    n = cfg.n_patches
    vis = np.broadcast_to(np.arange(p, p + n), (b, n))
    z = encode_images(model, images)
    seq = np.concatenate([prompts, np.zeros((b, n), dtype=np.int64)], axis=1)
    out = np.zeros((b, 0), dtype=np.int64)
    penalty = None
    if allowed is not None:
        penalty = np.full(cfg.vocab_size, -np.inf)
        penalty[list(allowed)] = 0.0
    with no_grad():
        for _ in range(max_new):
            ids = np.concatenate([seq, out], axis=1)
            logits = forward_batch(model, ids, None, vis, features=z).logits.data[:, -1, :]
            if penalty is not None:
                logits = logits + penalty
            nxt = np.argmax(logits, axis=-1)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if eos_id is not None and np.all((out == eos_id).any(axis=1)):
                break
    results = []
    for row in out.tolist():
        if eos_id is not None and eos_id in row:
            row = row[: row.index(eos_id) + 1]
        results.append(row)
    return results


def greedy_decode(model: MultimodalModel, image: np.ndarray, prompt_tokens: Sequence[int],
                  max_new: int, eos_id: int | None = None,
                  allowed: Sequence[int] | None = None) -> list[int]:
    return greedy_decode_batch(model, np.asarray(image)[None], np.asarray([prompt_tokens]),
                               max_new, eos_id=eos_id, allowed=allowed)[0]


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
