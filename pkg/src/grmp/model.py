"""A tiny CLIP-shaped dual encoder with deep visual prompts and soft text prompts.

Parameter names are grouped by prefix:

* ``image.*`` / ``text.*``  encoder weights
* ``visual_prompt.<l>``     one learnable ``[1, d]`` token per image layer
* ``text_prompt.ctx``       ``[2, M, d]`` context vectors, one set per quality class
                            (``[M, d]`` when ``class_specific_context`` is off)
* ``log_tau``               log of the softmax temperature
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.fft import dct

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore

CLASS_NAMES = ("animal", "cityscape", "human", "indoor", "landscape",
               "night", "plant", "still-life", "others")
HIGH_QUALITY_TOKEN = 9
LOW_QUALITY_TOKEN = 10
HARD_PROMPT_PREFIX = (11, 12, 13, 14)  # stands in for "a photo of a"

TEXT_PROMPT = "text_prompt."
VISUAL_PROMPT = "visual_prompt."
LOG_TAU = "log_tau"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    image_layers: int = 4
    text_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 32
    context_length: int = 4
    temperature: float = 0.07
    init_seed: int = 0
    patch_init: str = "dct"
    class_specific_context: bool = True
    finetune_image_blocks: int = 2
    finetune_text_blocks: int = 1

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.patch_init not in ("dct", "random"):
            raise ValueError(f"patch_init must be 'dct' or 'random', got {self.patch_init!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def text_length(self) -> int:
        return max(self.context_length + 1, len(HARD_PROMPT_PREFIX) + 1)


# ---------------------------------------------------------------- initialization

def _block_params(prefix: str, d: int, hidden: int, rng: np.random.Generator) -> dict:
    def lin(n_in, n_out):
        return rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out))

    return {
        f"{prefix}.ln1.g": np.ones(d), f"{prefix}.ln1.b": np.zeros(d),
        f"{prefix}.attn.qkv.w": lin(d, 3 * d), f"{prefix}.attn.qkv.b": np.zeros(3 * d),
        f"{prefix}.attn.out.w": lin(d, d) / 2, f"{prefix}.attn.out.b": np.zeros(d),
        f"{prefix}.ln2.g": np.ones(d), f"{prefix}.ln2.b": np.zeros(d),
        f"{prefix}.mlp.fc1.w": lin(d, hidden), f"{prefix}.mlp.fc1.b": np.zeros(hidden),
        f"{prefix}.mlp.fc2.w": lin(hidden, d) / 2, f"{prefix}.mlp.fc2.b": np.zeros(d),
    }


def dct_patch_filters(config: ModelConfig) -> np.ndarray:
    """Orthonormal 2-D DCT-II filters on patch luminance, ``[P*P*C, d]``.

    Columns beyond the ``P*P`` DCT filters, if any, are left zero; with the
    default 8x8 patches and d=64 the bank is complete.
    """
    ps, c, d = config.patch_size, config.channels, config.embed_dim
    basis = dct(np.eye(ps), norm="ortho", axis=0)
    filters = np.einsum("ui,vj->uvij", basis, basis).reshape(ps * ps, ps, ps)
    w = np.zeros((ps, ps, c, d))
    for k in range(min(d, ps * ps)):
        w[:, :, :, k] = filters[k][..., None] / np.sqrt(c)
    return w.reshape(ps * ps * c, d)


def init_params(config: ModelConfig = ModelConfig(), prompt_seed: int | None = None) -> ParameterStore:
    """Initialize a model.

    Encoder weights depend only on ``config.init_seed``; prompt tokens are
    drawn from ``prompt_seed`` (defaults to the same seed). Nothing is
    trainable in the returned store.
    """
    d = config.embed_dim
    hidden = d * config.mlp_ratio
    rng = np.random.default_rng([config.init_seed, 0x5EED])
    p: dict[str, np.ndarray] = {}
    patch_proj = rng.normal(0.0, config.patch_dim ** -0.5, size=(config.patch_dim, d))
    if config.patch_init == "dct":
        patch_proj = dct_patch_filters(config)
    p["image.patch_proj"] = patch_proj
    p["image.cls"] = rng.normal(0.0, 1.0, size=d)
    p["image.pos"] = rng.normal(0.0, 0.05, size=(1 + config.num_patches, d))
    p["image.ln_pre.g"], p["image.ln_pre.b"] = np.ones(d), np.zeros(d)
    for i in range(config.image_layers):
        p.update(_block_params(f"image.blocks.{i}", d, hidden, rng))
    p["image.ln_post.g"], p["image.ln_post.b"] = np.ones(d), np.zeros(d)
    p["image.proj"] = rng.normal(0.0, d ** -0.5, size=(d, d))

    p["text.token_embedding"] = rng.normal(0.0, 1.0, size=(config.vocab_size, d))
    p["text.pos"] = rng.normal(0.0, 0.5, size=(config.text_length, d))
    for i in range(config.text_layers):
        p.update(_block_params(f"text.blocks.{i}", d, hidden, rng))
    p["text.ln_final.g"], p["text.ln_final.b"] = np.ones(d), np.zeros(d)
    p["text.proj"] = rng.normal(0.0, d ** -0.5, size=(d, d))

    prng = np.random.default_rng([config.init_seed if prompt_seed is None else prompt_seed, 0x9A0])
    ctx_shape = (config.context_length, d)
    if config.class_specific_context:
        ctx_shape = (2,) + ctx_shape
    p[TEXT_PROMPT + "ctx"] = prng.normal(0.0, 1.0, size=ctx_shape)
    for i in range(config.image_layers):
        p[f"{VISUAL_PROMPT}{i}"] = prng.normal(0.0, 1.0, size=(1, d))
    p[LOG_TAU] = np.array(np.log(config.temperature))
    return ParameterStore(p)


def meta_parameter_names(store: ParameterStore) -> list[str]:
    """Trainable set during meta pre-training: prompts and temperature."""
    return store.select((TEXT_PROMPT, VISUAL_PROMPT, LOG_TAU))


def finetune_parameter_names(store: ParameterStore, config: ModelConfig) -> list[str]:
    """Trainable set during fine-tuning: trailing blocks, projections, prompts."""
    prefixes = [TEXT_PROMPT, VISUAL_PROMPT, "image.proj", "text.proj"]
    prefixes += [f"image.blocks.{i}." for i in
                 range(config.image_layers - config.finetune_image_blocks, config.image_layers)]
    prefixes += [f"text.blocks.{i}." for i in
                 range(config.text_layers - config.finetune_text_blocks, config.text_layers)]
    return store.select(prefixes)


def encoder_parameter_names(store: ParameterStore) -> list[str]:
    return store.select(("image.", "text."))


# ---------------------------------------------------------------- building blocks

def _affine_ln(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x) * p[prefix + ".g"] + p[prefix + ".b"]


def _block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    h = _affine_ln(x, p, prefix + ".ln1")
    qkv = h @ p[prefix + ".attn.qkv.w"] + p[prefix + ".attn.qkv.b"]
    qkv = ad.transpose(qkv.reshape(b, t, 3, heads, dh), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax(ad.scale(q @ ad.transpose(k), dh ** -0.5))
    o = ad.transpose(att @ v, (0, 2, 1, 3)).reshape(b, t, d)
    x = x + (o @ p[prefix + ".attn.out.w"] + p[prefix + ".attn.out.b"])
    h = _affine_ln(x, p, prefix + ".ln2")
    h = ad.gelu_tanh(h @ p[prefix + ".mlp.fc1.w"] + p[prefix + ".mlp.fc1.b"])
    return x + (h @ p[prefix + ".mlp.fc2.w"] + p[prefix + ".mlp.fc2.b"])


def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``[B, H, W, C]`` in [0, 1] -> standardized ``[B, N, P*P*C]`` patches."""
    images = np.asarray(images, dtype=np.float64)
    s, c, ps = config.image_size, config.channels, config.patch_size
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (s, s, c):
        raise ValueError(f"expected images of shape [B, {s}, {s}, {c}], got {images.shape}")
    g = s // ps
    x = images.reshape(-1, g, ps, g, ps, c).transpose(0, 1, 3, 2, 4, 5)
    return (x.reshape(-1, g * g, ps * ps * c) - 0.5) / 0.25


def encode_image(p: Mapping[str, Tensor], config: ModelConfig, images,
                 trace: list | None = None) -> Tensor:
    """Unit-norm image features ``[B, d]``.

    At every layer the sequence is ``[CLS, prompt_l, patches]``; the prompt
    position is dropped from the block output so only ``1 + N`` tokens are
    forwarded. When ``trace`` is a list, ``(in_len, out_len, forwarded_len)``
    is appended per layer.
    """
    patches = ad.constant(patchify(images, config))
    bsz = patches.shape[0]
    d = config.embed_dim
    ones = ad.constant(np.ones((bsz, 1, 1)))
    tokens = patches @ p["image.patch_proj"]
    cls = ones * p["image.cls"].reshape(1, 1, d)
    x = ad.concat([cls, tokens], axis=1) + p["image.pos"]
    x = _affine_ln(x, p, "image.ln_pre")
    for layer in range(config.image_layers):
        prompt = ones * p[f"{VISUAL_PROMPT}{layer}"].reshape(1, 1, d)
        seq = ad.concat([x[:, :1], prompt, x[:, 1:]], axis=1)
        out = _block(seq, p, f"image.blocks.{layer}", config.heads)
        x = ad.concat([out[:, :1], out[:, 2:]], axis=1)
        if trace is not None:
            trace.append((seq.shape[1], out.shape[1], x.shape[1]))
    f = _affine_ln(x[:, 0], p, "image.ln_post") @ p["image.proj"]
    return ad.l2_normalize(f)


def encode_text(p: Mapping[str, Tensor], config: ModelConfig, sequences: Tensor) -> Tensor:
    """Unit-norm text features ``[P, d]`` from embedded sequences ``[P, T, d]``.

    Final states are mean-pooled over positions before projection.
    """
    if sequences.ndim == 2:
        sequences = sequences.reshape(1, *sequences.shape)
    if sequences.ndim != 3 or sequences.shape[1] == 0:
        raise ValueError(f"text sequences must be [P, T>0, d], got {sequences.shape}")
    t = sequences.shape[1]
    if t > config.text_length:
        raise ValueError(f"sequence length {t} exceeds {config.text_length}")
    x = sequences + p["text.pos"][:t]
    for layer in range(config.text_layers):
        x = _block(x, p, f"text.blocks.{layer}", config.heads)
    x = _affine_ln(x, p, "text.ln_final").mean(axis=1)
    return ad.l2_normalize(x @ p["text.proj"])


def embed_tokens(p: Mapping[str, Tensor], token_ids) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    return p["text.token_embedding"][ids]


def quality_prompts(p: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """``[2, M+1, d]``: context vectors followed by the high / low token.

    A ``[2, M, d]`` context gives each quality class its own vectors; a
    ``[M, d]`` context is shared by both.
    """
    ctx = p[TEXT_PROMPT + "ctx"]
    m, d = ctx.shape[-2:]
    rows = []
    for i, tok in enumerate((HIGH_QUALITY_TOKEN, LOW_QUALITY_TOKEN)):
        c = ctx[i] if ctx.ndim == 3 else ctx
        seq = ad.concat([c, embed_tokens(p, [tok])], axis=0)
        rows.append(seq.reshape(1, m + 1, d))
    return ad.concat(rows, axis=0)


def class_prompts(p: Mapping[str, Tensor]) -> Tensor:
    """``[9, 5, d]`` hard prompts: fixed prefix followed by a class token."""
    ids = [list(HARD_PROMPT_PREFIX) + [c] for c in range(len(CLASS_NAMES))]
    return embed_tokens(p, ids)


def temperature(p: Mapping[str, Tensor]) -> Tensor:
    return ad.exp(p[LOG_TAU])


def quality_probability(f: Tensor, g_high: Tensor, g_low: Tensor, tau) -> Tensor:
    """Probability that each image in ``f`` is high quality.

    Two-way softmax over cosine similarities to the high / low prompt
    features, divided by the temperature.
    """
    tau_t = ad.as_tensor(tau)
    if np.any(tau_t.data <= 0):
        raise ValueError(f"temperature must be positive, got {tau_t.data}")
    f = ad.as_tensor(f)
    sims = [ad.cosine_similarity(f, g) for g in (g_high, g_low)]
    n = f.shape[0] if f.ndim > 1 else 1
    logits = ad.concat([s.reshape(n, 1) for s in sims], axis=1) / tau_t
    return ad.softmax(logits)[:, 0]


def semantic_logits(f: Tensor, class_features: Tensor, tau) -> Tensor:
    return (f @ ad.transpose(class_features)) / ad.as_tensor(tau)


def semantic_probabilities(f: Tensor, class_features: Tensor, tau) -> Tensor:
    """Softmax over the nine class prompts, ``[B, 9]``."""
    return ad.softmax(semantic_logits(f, class_features, tau))


@dataclass
class DualEncoder:
    """A parameter store bound to its architecture.

    ``role`` is informational: ``"semantic"`` marks the frozen reference,
    ``"quality"`` the tunable copy.
    """

    config: ModelConfig
    params: ParameterStore
    role: str = "quality"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def initialize(cls, config: ModelConfig = ModelConfig(), prompt_seed: int | None = None,
                   role: str = "quality") -> "DualEncoder":
        return cls(config, init_params(config, prompt_seed), role)

    def with_params(self, params: ParameterStore) -> "DualEncoder":
        return replace(self, params=params, _cache={})

    def leaves(self) -> dict[str, Tensor]:
        return self.params.leaves()

    @property
    def tau(self) -> float:
        return float(np.exp(self.params[LOG_TAU]))

    def image_features(self, images, trace: list | None = None) -> np.ndarray:
        return encode_image(self.leaves(), self.config, images, trace).data

    def text_features(self, token_ids) -> np.ndarray:
        p = self.leaves()
        return encode_text(p, self.config, embed_tokens(p, token_ids)).data

    def quality_scores(self, images, batch_size: int = 256) -> np.ndarray:
        """``p_high`` for each image, evaluated without recording gradients."""
        p = {k: ad.constant(v) for k, v in self.params.items()}
        g = encode_text(p, self.config, quality_prompts(p, self.config))
        out = []
        images = np.asarray(images)
        for i in range(0, len(images), batch_size):
            f = encode_image(p, self.config, images[i:i + batch_size])
            out.append(quality_probability(f, g[0], g[1], temperature(p)).data)
        return np.concatenate(out) if out else np.zeros(0)

    def semantic_distribution(self, images, batch_size: int = 256) -> np.ndarray:
        p = {k: ad.constant(v) for k, v in self.params.items()}
        g = encode_text(p, self.config, class_prompts(p))
        out = []
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        for i in range(0, len(images), batch_size):
            f = encode_image(p, self.config, images[i:i + batch_size])
            out.append(semantic_probabilities(f, g, temperature(p)).data)
        return np.concatenate(out)


def quality_loss_graph(p: Mapping[str, Tensor], config: ModelConfig, images, targets) -> Tensor:
    """Mean binary cross-entropy of ``p_high`` against labels in [0, 1]."""
    from .losses import quality_loss

    f = encode_image(p, config, images)
    g = encode_text(p, config, quality_prompts(p, config))
    return quality_loss(quality_probability(f, g[0], g[1], temperature(p)), targets)


def semantic_kl_graph(p: Mapping[str, Tensor], config: ModelConfig, images,
                      reference: np.ndarray, f: Tensor | None = None) -> Tensor:
    """Mean KL(reference || model) over the nine class prompts."""
    from .losses import semantic_kl_loss

    if f is None:
        f = encode_image(p, config, images)
    g = encode_text(p, config, class_prompts(p))
    return semantic_kl_loss(reference, semantic_probabilities(f, g, temperature(p)))


def sequence_trace(model: DualEncoder, images) -> list[tuple[int, int, int]]:
    trace: list = []
    model.image_features(images, trace)
    return trace
