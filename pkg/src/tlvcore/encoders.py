"""Tiny pre-LN transformer encoders for the tactile, vision and language branches."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ShapeError
from .numerics import Parameter, Tensor

MODALITIES = ("T", "V", "L")
IMAGE_MODALITIES = ("T", "V")

Hook = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    modality: str
    num_layers: int
    dim: int
    num_heads: int
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    vocab_size: int = 32
    max_seq_len: int = 17
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        for name in ("num_layers", "dim", "num_heads", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.dim % self.num_heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.is_image:
            if self.patch_size <= 0 or self.image_size % self.patch_size:
                raise ConfigurationError(
                    f"patch_size {self.patch_size} must divide image_size {self.image_size}"
                )
            if 1 + self.num_patches > self.max_seq_len:
                raise ConfigurationError("max_seq_len too small for the patch grid")
        elif self.vocab_size <= 0:
            raise ConfigurationError("vocab_size must be positive")

    @property
    def is_image(self) -> bool:
        return self.modality in IMAGE_MODALITIES

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def toy_configs(
    dim: int = 32, heads: int = 4, image_layers: int = 4, text_layers: int = 2,
    vocab_size: int = 32, text_len: int = 6, image_size: int = 16, patch_size: int = 4,
) -> dict[str, EncoderConfig]:
    """Desk-scale defaults: deeper image towers than the text tower."""
    seq = 1 + (image_size // patch_size) ** 2
    common = dict(dim=dim, num_heads=heads, patch_size=patch_size, image_size=image_size)
    return {
        "T": EncoderConfig("T", image_layers, max_seq_len=seq, **common),
        "V": EncoderConfig("V", image_layers, max_seq_len=seq, **common),
        "L": EncoderConfig(
            "L", text_layers, dim=dim, num_heads=heads, vocab_size=vocab_size,
            max_seq_len=1 + text_len,
        ),
    }


def clip_large_configs() -> dict[str, EncoderConfig]:
    """OpenCLIP ViT-L/14 shapes. Only used for parameter accounting."""
    vis = dict(num_layers=24, dim=1024, num_heads=16, patch_size=14, image_size=224,
               max_seq_len=257)
    return {
        "T": EncoderConfig("T", **vis),
        "V": EncoderConfig("V", **vis),
        "L": EncoderConfig("L", 12, dim=768, num_heads=12, vocab_size=49408, max_seq_len=77),
    }


def patchify(image, patch_size: int) -> np.ndarray:
    """Split (H, W, C) or (N, H, W, C) grids into raster-ordered flat patches.

    Returns (P, p*p*C) or (N, P, p*p*C); each patch is flattened row-major
    over (row, col, channel).
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC grid(s), got shape {np.shape(image)}")
    n, h, w, c = x.shape
    p = int(patch_size)
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"grid {h}x{w} not divisible by patch size {p}")
    out = x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(n, (h // p) * (w // p), p * p * c)
    return out[0] if single else out


def _rng_for(name: str, seed: int) -> np.random.Generator:
    # one Philox stream per parameter name: adding or removing other
    # parameters never shifts this one's initial values
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), zlib.crc32(name.encode())]))


def gaussian_param(name: str, shape, seed: int, std: float = 0.02) -> Parameter:
    return Parameter(name, _rng_for(name, seed).standard_normal(shape) * std)


def init_encoder(config: EncoderConfig, seed: int) -> dict[str, Parameter]:
    m, d = config.modality, config.dim
    hidden = d * config.mlp_ratio
    params: list[Parameter] = []
    if config.is_image:
        params.append(gaussian_param(f"{m}.patch_w", (d, config.patch_dim), seed))
        params.append(Parameter(f"{m}.patch_b", np.zeros(d)))
        seq = 1 + config.num_patches
    else:
        params.append(gaussian_param(f"{m}.tok_emb", (config.vocab_size, d), seed))
        seq = config.max_seq_len
    params.append(gaussian_param(f"{m}.cls", (d,), seed))
    params.append(gaussian_param(f"{m}.pos", (seq, d), seed))
    for i in range(config.num_layers):
        pre = f"{m}.layers.{i}"
        params += [
            Parameter(f"{pre}.ln1.g", np.ones(d)),
            Parameter(f"{pre}.ln1.b", np.zeros(d)),
            gaussian_param(f"{pre}.attn.qkv_w", (3 * d, d), seed),
            Parameter(f"{pre}.attn.qkv_b", np.zeros(3 * d)),
            gaussian_param(f"{pre}.attn.out_w", (d, d), seed),
            Parameter(f"{pre}.attn.out_b", np.zeros(d)),
            Parameter(f"{pre}.ln2.g", np.ones(d)),
            Parameter(f"{pre}.ln2.b", np.zeros(d)),
            gaussian_param(f"{pre}.mlp.fc1_w", (hidden, d), seed),
            Parameter(f"{pre}.mlp.fc1_b", np.zeros(hidden)),
            gaussian_param(f"{pre}.mlp.fc2_w", (d, hidden), seed),
            Parameter(f"{pre}.mlp.fc2_b", np.zeros(d)),
        ]
    return {p.name: p for p in params}


def count_encoder_params(config: EncoderConfig) -> int:
    """Closed-form parameter count matching :func:`init_encoder`.

    Per layer: 2 layer norms (4d), qkv (3d^2 + 3d), output projection
    (d^2 + d), MLP (2*ratio*d^2 + ratio*d + d).
    """
    d, r = config.dim, config.mlp_ratio
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (2 * r * d * d + r * d + d)
    if config.is_image:
        embed = d * config.patch_dim + d
        seq = 1 + config.num_patches
    else:
        embed = config.vocab_size * d
        seq = config.max_seq_len
    return embed + d + seq * d + config.num_layers * per_layer


def _embed(inputs, params: Mapping[str, Parameter], config: EncoderConfig) -> Tensor:
    m = config.modality
    if config.is_image:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (config.image_size, config.image_size, config.channels):
            raise ShapeError(
                f"{m} encoder expects (N, {config.image_size}, {config.image_size}, "
                f"{config.channels}), got {x.shape}"
            )
        tokens = nx.linear(patchify(x, config.patch_size), params[f"{m}.patch_w"], params[f"{m}.patch_b"])
    else:
        ids = np.asarray(inputs, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] + 1 > config.max_seq_len:
            raise ShapeError(f"L encoder expects (N, <= {config.max_seq_len - 1}) token ids")
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise ShapeError("token id out of vocabulary")
        tokens = nx.embedding(ids, params[f"{m}.tok_emb"])
    x = nx.prepend_token(tokens, params[f"{m}.cls"])
    pos = params[f"{m}.pos"]
    seq = x.shape[1]
    pos_t = pos if seq == pos.shape[0] else nx.getitem(pos, slice(0, seq))
    return nx.add(x, pos_t)


def transformer_layer(x: Tensor, params: Mapping[str, Parameter], prefix: str, num_heads: int) -> Tensor:
    p = params
    h = nx.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = nx.linear(h, p[f"{prefix}.attn.qkv_w"], p[f"{prefix}.attn.qkv_b"])
    h = nx.self_attention(h, num_heads)
    h = nx.linear(h, p[f"{prefix}.attn.out_w"], p[f"{prefix}.attn.out_b"])
    x = nx.add(x, h)
    h = nx.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = nx.gelu(nx.linear(h, p[f"{prefix}.mlp.fc1_w"], p[f"{prefix}.mlp.fc1_b"]))
    h = nx.linear(h, p[f"{prefix}.mlp.fc2_w"], p[f"{prefix}.mlp.fc2_b"])
    return nx.add(x, h)


def encode(
    inputs,
    params: Mapping[str, Parameter],
    config: EncoderConfig,
    hooks: Mapping[int, Hook] | None = None,
) -> Tensor:
    """Pooled (N, d) CLS features of a batch.

    ``hooks`` maps a 0-based layer index to a transform applied to the full
    (N, T, d) token sequence right after that layer.
    """
    hooks = dict(hooks or {})
    bad = [i for i in hooks if not 0 <= i < config.num_layers]
    if bad:
        raise ConfigurationError(f"hook layer index {bad} out of range for {config.num_layers} layers")
    x = _embed(inputs, params, config)
    for i in range(config.num_layers):
        x = transformer_layer(x, params, f"{config.modality}.layers.{i}", config.num_heads)
        if i in hooks:
            x = hooks[i](x)
    return nx.getitem(x, (slice(None), 0, slice(None)))
