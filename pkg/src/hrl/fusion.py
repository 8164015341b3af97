"""Token construction, the Transformer fusion encoder, and the hybrid model.

Backbone feature maps become one token per channel (plus a learned class
token and a learned position table); the handcrafted vector is cut into
hidden-size chunks with no position information. A pre-norm encoder block
mixes both token groups and the head mean-pools every hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .backbone import Backbone3D, BackboneConfig, output_shape
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, broadcast_to, concat

VARIANTS = ("full", "h-only", "d-only")


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("_", "-")
    aliases = {"h": "h-only", "hrl-h": "h-only", "d": "d-only", "hrl-d": "d-only", "hrl": "full"}
    v = aliases.get(v, v)
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


def handcrafted_token_count(feature_dim: int, hidden: int) -> int:
    return -(-feature_dim // hidden) if feature_dim > 0 else 0


def embed_handcrafted(features, hidden: int) -> np.ndarray:
    """Cut feature vectors [B, F] (or [F]) into [B, ceil(F/D), D] zero-padded chunks."""
    feats = np.asarray(features)
    single = feats.ndim == 1
    if single:
        feats = feats[None]
    b, f = feats.shape
    x = handcrafted_token_count(f, hidden)
    out = np.zeros((b, x * hidden), dtype=feats.dtype if feats.dtype.kind == "f" else np.float64)
    out[:, :f] = feats
    out = out.reshape(b, x, hidden)
    return out[0] if single else out


class PatchEmbedding(Module):
    """Channel-wise flatten, shared linear projection, class token, position table."""

    def __init__(self, n_patches: int, patch_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.n_patches = n_patches
        self.proj = Linear(patch_dim, hidden, rng=rng, dtype=dtype)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=(hidden,)).astype(dtype), requires_grad=True)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, size=(n_patches + 1, hidden)).astype(dtype),
                                requires_grad=True)

    def __call__(self, maps: Tensor) -> Tensor:
        b, n = maps.shape[:2]
        if n != self.n_patches:
            raise ValueError(f"expected {self.n_patches} feature maps, got {n}")
        patches = maps.reshape(b, n, -1)
        tokens = self.proj(patches)
        cls = broadcast_to(self.cls_token.reshape(1, 1, -1), (b, 1, tokens.shape[-1]))
        return concat([cls, tokens], axis=1) + self.pos_embed


class MultiHeadSelfAttention(Module):
    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.query = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.key = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.value = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.out = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self._last_attention: np.ndarray | None = None

    @property
    def last_attention(self) -> np.ndarray | None:
        """Attention weights [B, heads, T, T] from the most recent call."""
        return self._last_attention

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        ctx, weights = F.scaled_dot_attention(q, k, v)
        self._last_attention = weights
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, t, d))


class EncoderBlock(Module):
    """h = z + MSA(LN(z)); out = h + MLP(LN(h))."""

    def __init__(self, hidden: int, heads: int, mlp_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(hidden, dtype=dtype)
        self.attn = MultiHeadSelfAttention(hidden, heads, rng, dtype)
        self.norm2 = LayerNorm(hidden, dtype=dtype)
        self.fc1 = Linear(hidden, mlp_dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(mlp_dim, hidden, rng=rng, dtype=dtype)

    def __call__(self, z: Tensor) -> Tensor:
        h = z + self.attn(self.norm1(z))
        return h + self.fc2(F.gelu(self.fc1(self.norm2(h))))


class Encoder(Module):
    def __init__(self, hidden: int, heads: int, mlp_dim: int, depth: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.blocks = [EncoderBlock(hidden, heads, mlp_dim, rng, dtype) for _ in range(depth)]

    def __call__(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return z

    def attention_maps(self) -> list[np.ndarray]:
        return [b.attn.last_attention for b in self.blocks]


class ClassificationHead(Module):
    """Mean over tokens, tanh, linear. Returns logits; softmax gives probabilities."""

    def __init__(self, hidden: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.fc = Linear(hidden, num_classes, rng=rng, dtype=dtype)

    def __call__(self, hidden_states: Tensor) -> Tensor:
        return self.fc(F.tanh(hidden_states.mean(axis=1)))


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    input_shape: tuple[int, int, int] = (181, 217, 181)
    feature_dim: int = 1007
    hidden: int = 128
    heads: int = 16
    mlp_dim: int = 512
    depth: int = 1
    num_classes: int = 2
    variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if self.variant == "h-only" and self.feature_dim < 1:
            raise ValueError("h-only variant needs a handcrafted stream")

    @property
    def map_shape(self) -> tuple[int, int, int, int]:
        return output_shape(self.backbone, (self.backbone.in_channels,) + self.input_shape)

    def token_count(self, variant: str | None = None) -> int:
        variant = normalize_variant(variant or self.variant)
        n = self.map_shape[0]
        x = handcrafted_token_count(self.feature_dim, self.hidden)
        return {"full": 1 + n + x, "d-only": 1 + n, "h-only": x}[variant]

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


class HrlModel(Module):
    """Backbone + patch embedding + fusion encoder + head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = Backbone3D(config.backbone, seed=int(rng.integers(2**31)), dtype=dtype)
        c, l, w, h = config.map_shape
        self.embed = PatchEmbedding(c, l * w * h, config.hidden, rng, dtype)
        self.encoder = Encoder(config.hidden, config.heads, config.mlp_dim, config.depth, rng, dtype)
        self.head = ClassificationHead(config.hidden, config.num_classes, rng, dtype)
        self.feature_mean = np.zeros(max(config.feature_dim, 1), dtype=dtype)
        self.feature_scale = np.ones(max(config.feature_dim, 1), dtype=dtype)
        self.backbone_pretrained = False

    @property
    def dtype(self):
        return self.head.fc.weight.dtype

    def fusion_parameters(self) -> list[Tensor]:
        """Everything trained in the second stage while the backbone is frozen."""
        return self.embed.parameters() + self.encoder.parameters() + self.head.parameters()

    def set_feature_scaling(self, mean: np.ndarray, scale: np.ndarray) -> None:
        self.feature_mean = np.asarray(mean, dtype=self.dtype).copy()
        self.feature_scale = np.where(np.asarray(scale) > 0, scale, 1.0).astype(self.dtype)

    def handcrafted_tokens(self, features) -> Tensor:
        feats = np.asarray(features, dtype=self.dtype)
        feats = (feats - self.feature_mean) / self.feature_scale
        return Tensor(embed_handcrafted(feats, self.config.hidden))

    def tokens(self, volumes: Tensor | None, features=None, variant: str | None = None,
               maps: Tensor | None = None) -> Tensor:
        """Assemble the encoder input for a variant.

        ``maps`` may be passed instead of ``volumes`` when backbone features
        were computed beforehand.
        """
        variant = normalize_variant(variant or self.config.variant)
        parts = []
        if variant in ("full", "d-only"):
            if maps is None:
                if volumes is None:
                    raise ValueError(f"variant {variant!r} needs volumes")
                maps = self.backbone(volumes)
            parts.append(self.embed(maps))
        if variant in ("full", "h-only") and self.config.feature_dim > 0:
            if features is None:
                raise ValueError(f"variant {variant!r} needs handcrafted features")
            parts.append(self.handcrafted_tokens(features))
        if not parts:
            raise ValueError("no input stream for this variant")
        return parts[0] if len(parts) == 1 else concat(parts, axis=1)

    def __call__(self, volumes: Tensor | None, features=None, variant: str | None = None,
                 maps: Tensor | None = None) -> Tensor:
        """Class logits [B, K]."""
        z = self.tokens(volumes, features, variant, maps)
        return self.head(self.encoder(z))

    def predict_proba(self, volumes, features=None, variant: str | None = None, maps=None) -> np.ndarray:
        return F.softmax(self(volumes, features, variant, maps)).data


def hrl_forward(volume, handcrafted, model: HrlModel, variant: str = "full") -> np.ndarray:
    """Class probabilities for a batch of volumes [B,1,D,H,W] and features [B,F]."""
    vol = None if volume is None else (volume if isinstance(volume, Tensor) else Tensor(np.asarray(volume)))
    return model.predict_proba(vol, handcrafted, variant)


def encoder_token_shape(config: ModelConfig, variant: str | None = None) -> tuple[int, int]:
    return config.token_count(variant), config.hidden
