"""Vision-transformer block inserted between the detector backbone and its neck.

A feature map is cut into ``P x P`` patches (``P = 1`` by default, so each spatial cell is one
token), embedded, passed through post-norm encoder layers and folded back to the input shape.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor
from sonar_kd.core.functional import softmax
from sonar_kd.core.nn import LayerNormLayer, Linear, Module, Parameter, activation
from sonar_kd.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

POS_EMBED_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    """Transformer hyper-parameters. ``embed_dim=None`` means "same as the input channels"."""

    embed_dim: Optional[int] = None
    num_heads: int = 4
    num_encoder_layers: int = 1
    patch_size: int = 1
    ffn_ratio: float = 2.0
    use_positional_embedding: bool = True
    activation: str = "silu"

    def resolve_dim(self, channels: int) -> int:
        return self.embed_dim if self.embed_dim is not None else channels * self.patch_size * self.patch_size

    def validate(self, channels: int, height: int, width: int) -> int:
        """Check the config against a feature map and return the embedding dimension."""
        if self.num_encoder_layers < 1:
            raise ConfigError("num_encoder_layers must be >= 1", {"num_encoder_layers": self.num_encoder_layers})
        if self.patch_size < 1 or height % self.patch_size or width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide the {height}x{width} feature map",
                {"patch_size": self.patch_size, "height": height, "width": width},
            )
        dim = self.resolve_dim(channels)
        if self.num_heads < 1 or dim % self.num_heads:
            raise ConfigError(
                f"{self.num_heads} heads do not divide embedding dim {dim}",
                {"num_heads": self.num_heads, "embed_dim": dim},
            )
        if self.ffn_ratio <= 0:
            raise ConfigError("ffn_ratio must be positive", {"ffn_ratio": self.ffn_ratio})
        activation(Tensor(np.zeros(1)), self.activation)
        return dim

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ViTConfig":
        return cls(**data)


def patchify(featmap: Tensor, patch_size: int) -> Tensor:
    """``[N, C, H, W]`` to ``[N, T, C*P*P]``; tokens in row-major patch order, patches flattened as (C, P, P)."""
    if featmap.ndim != 4:
        raise ShapeError("patchify expects an [N, C, H, W] map", {"shape": list(featmap.shape)})
    n, c, h, w = featmap.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide {h}x{w}", {"patch_size": p, "height": h, "width": w})
    x = ops.reshape(featmap, (n, c, h // p, p, w // p, p))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (n, (h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, channels: int, height: int, width: int, patch_size: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    n = tokens.shape[0]
    p = patch_size
    x = ops.reshape(tokens, (n, height // p, width // p, channels, p, p))
    x = ops.permute(x, (0, 3, 1, 4, 2, 5))
    return ops.reshape(x, (n, channels, height, width))


def patchify_embed(
    featmap: Tensor,
    w_e: Tensor,
    b_e: Tensor,
    patch_size: int,
    pos_embed: Optional[Tensor] = None,
) -> Tensor:
    """Flatten patches, project with ``w_e[(P*P*C), D]`` plus ``b_e[D]``, add ``pos_embed[T, D]`` if given."""
    patches = patchify(featmap, patch_size)
    if w_e.ndim != 2 or w_e.shape[0] != patches.shape[-1]:
        raise ShapeError(
            f"embedding matrix {w_e.shape} does not match patch length {patches.shape[-1]}",
            {"w_e": list(w_e.shape), "patch_length": patches.shape[-1]},
        )
    tokens = ops.add(ops.matmul(patches, w_e), b_e)
    if pos_embed is not None:
        if pos_embed.shape != tokens.shape[1:]:
            raise ShapeError("positional embedding must be [T, D]", {"expected": list(tokens.shape[1:]), "got": list(pos_embed.shape)})
        tokens = ops.add(tokens, pos_embed)
    return tokens


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V`` over ``[..., T, d_k]`` inputs."""
    if q.ndim < 2 or q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(
            "attention: Q, K, V dimensions do not match",
            {"q": list(q.shape), "k": list(k.shape), "v": list(v.shape)},
        )
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ops.div(ops.matmul(q, ops.permute(k, axes)), float(np.sqrt(q.shape[-1])))
    return ops.matmul(softmax(scores, axis=-1), v)


def mhsa(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, num_heads: int) -> Tensor:
    """Multi-head self-attention over ``x[N, T, D]``.

    Head ``i`` uses columns ``i*d_k:(i+1)*d_k`` of the stacked ``(D, D)`` projections; head
    outputs are concatenated and mapped by ``w_o``.
    """
    if x.ndim != 3:
        raise ShapeError("mhsa expects [N, T, D] tokens", {"shape": list(x.shape)})
    n, t, d = x.shape
    if num_heads < 1 or d % num_heads:
        raise ShapeError(f"{num_heads} heads do not divide D={d}", {"num_heads": num_heads, "embed_dim": d})
    d_k = d // num_heads

    def split(projection: Tensor) -> Tensor:
        return ops.permute(ops.reshape(ops.matmul(x, projection), (n, t, num_heads, d_k)), (0, 2, 1, 3))

    heads = attention(split(w_q), split(w_k), split(w_v))
    merged = ops.reshape(ops.permute(heads, (0, 2, 1, 3)), (n, t, d))
    return ops.matmul(merged, w_o)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, dtype: Any = np.float64) -> None:
        bound = 1.0 / np.sqrt(dim)
        self.w_q, self.w_k, self.w_v, self.w_o = (
            Parameter(rng.uniform(-bound, bound, (dim, dim)).astype(dtype)) for _ in range(4)
        )
        self.num_heads = num_heads

    def forward(self, x: Tensor) -> Tensor:
        return mhsa(x, self.w_q, self.w_k, self.w_v, self.w_o, self.num_heads)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, act: str, dtype: Any = np.float64) -> None:
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(activation(self.fc1(x), self.act))


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, dim: int, cfg: ViTConfig, dtype: Any = np.float64) -> None:
        self.attn = MultiHeadSelfAttention(rng, dim, cfg.num_heads, dtype)
        self.norm1 = LayerNormLayer(dim, dtype)
        self.ffn = FeedForward(rng, dim, max(1, int(round(dim * cfg.ffn_ratio))), cfg.activation, dtype)
        self.norm2 = LayerNormLayer(dim, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return encoder_layer(x, self)


def encoder_layer(x: Tensor, layer: EncoderLayer) -> Tensor:
    """Post-norm encoder: ``y = LN(x + MHSA(x))``, ``out = LN(y + FFN(y))``."""
    y = layer.norm1(ops.add(x, layer.attn(x)))
    return layer.norm2(ops.add(y, layer.ffn(y)))


class ViTBlock(Module):
    """Transformer applied to a fixed-size ``[N, C, H, W]`` feature map, returning the same shape.

    With ``P = 1`` and ``D = C`` the cells are used as tokens directly. Otherwise patches are
    projected to ``D`` on the way in and back to ``P*P*C`` on the way out.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        cfg: ViTConfig,
        channels: int,
        grid: Tuple[int, int],
        dtype: Any = np.float64,
    ) -> None:
        height, width = grid
        dim = cfg.validate(channels, height, width)
        self.cfg, self.channels, self.grid, self.dim = cfg, channels, (height, width), dim
        patch_len = channels * cfg.patch_size * cfg.patch_size
        self.projected = not (cfg.patch_size == 1 and dim == channels)
        if self.projected:
            self.embed = Linear(rng, patch_len, dim, dtype=dtype)
            self.unembed = Linear(rng, dim, patch_len, dtype=dtype)
        num_tokens = (height // cfg.patch_size) * (width // cfg.patch_size)
        if cfg.use_positional_embedding:
            self.pos_embed = Parameter((rng.standard_normal((num_tokens, dim)) * POS_EMBED_STD).astype(dtype))
        self.layers: List[EncoderLayer] = [EncoderLayer(rng, dim, cfg, dtype) for _ in range(cfg.num_encoder_layers)]
        logger.debug("ViT block: %d tokens, D=%d, heads=%d, layers=%d", num_tokens, dim, cfg.num_heads, cfg.num_encoder_layers)

    def forward(self, featmap: Tensor) -> Tensor:
        return vit_block(featmap, self)


def vit_block(featmap: Tensor, block: ViTBlock) -> Tensor:
    """Tokens, then ``L_enc`` encoder layers, then back to ``[N, C, H, W]``."""
    expected = (block.channels,) + block.grid
    if featmap.ndim != 4 or featmap.shape[1:] != expected:
        raise ShapeError(
            f"ViT block built for {expected} maps, got {featmap.shape[1:]}",
            {"expected": list(expected), "got": list(featmap.shape)},
        )
    cfg = block.cfg
    pos = getattr(block, "pos_embed", None)
    if block.projected:
        tokens = patchify_embed(featmap, block.embed.weight, block.embed.bias, cfg.patch_size, pos)
    else:
        tokens = patchify(featmap, 1)
        if pos is not None:
            tokens = ops.add(tokens, pos)
    for layer in block.layers:
        tokens = layer(tokens)
    if block.projected:
        tokens = block.unembed(tokens)
    return unpatchify(tokens, block.channels, block.grid[0], block.grid[1], cfg.patch_size)
