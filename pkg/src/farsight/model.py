"""The dual-path architecture: projection, spatial-channel attention, direct and
attribute-mediated gender paths, and cross-attention fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import FreezePolicy, TextEncoder, VisualEncoder, Vocabulary, apply_freeze_policy
from .errors import ConfigError
from .layers import Linear, LayerNorm, MLPHead, Module, MultiheadAttention
from .ontology import ATTRIBUTE_CLASSES, GENDER_CLASSES, attribute_spec
from .optim import Group, Parameter
from .tensor import Tensor


def default_query_texts(config: "ModelConfig") -> dict[str, str]:
    """Label-free per-attribute queries: the class descriptions joined."""
    return {name: ", ".join(ATTRIBUTE_CLASSES[name]) for name in config.attribute_names}


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    token_dim: int = 32          # per-token width out of the visual encoders
    joint_dim: int = 16          # shared vision-text space
    visual_depth: int = 4
    visual_heads: int = 4
    text_depth: int = 4
    text_heads: int = 4
    text_max_len: int = 64
    mlp_ratio: float = 2.0
    attributes: tuple[tuple[str, int], ...] = field(default_factory=lambda: attribute_spec("five"))
    use_sca_path1: bool = True
    use_sca_path2: bool = True
    sca_reduction: int = 4
    fusion_heads: int = 4
    attribute_attention_heads: int = 4
    dropout: float = 0.1
    prompt_mode: str = "class"   # "class": one label-free query per attribute;
                                 # "sample": the per-sample concatenated prompt
    visual_qk_gain: float = 3.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be a multiple of patch_size")
        if not self.attributes:
            raise ConfigError("at least one attribute is required")
        for name, k in self.attributes:
            if k < 2:
                raise ConfigError(f"attribute {name!r} needs >= 2 classes, got {k}")
        for dim, heads, what in ((self.joint_dim, self.fusion_heads, "fusion"),
                                 (self.joint_dim, self.attribute_attention_heads, "attribute attention"),
                                 (self.joint_dim, self.text_heads, "text"),
                                 (self.token_dim, self.visual_heads, "visual")):
            if dim % heads != 0:
                raise ConfigError(f"{what} dim {dim} not divisible by its head count {heads}")
        if self.joint_dim % self.sca_reduction != 0:
            raise ConfigError(f"joint_dim {self.joint_dim} not divisible by sca_reduction {self.sca_reduction}")
        if self.prompt_mode not in ("class", "sample"):
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)


@dataclass
class ForwardOutputs:
    """Everything one forward pass yields, including explainability buffers."""

    direct_logits: Tensor                       # [B,3]
    mediated_logits: Tensor                     # [B,3]
    fused_logits: Tensor                        # [B,3]
    attribute_logits: dict[str, Tensor]         # per attribute [B,K_a]
    direct_embedding: Tensor                    # [B,d]
    mediated_embedding: Tensor                  # [B,d]
    fused_embedding: Tensor                     # [B,d]
    cross_attention: dict[str, np.ndarray] | None = None   # [B,heads,1,N]
    fusion_attention: np.ndarray | None = None              # [B,heads,2,2]
    visual_attention_direct: list[np.ndarray] | None = None
    visual_attention_mediated: list[np.ndarray] | None = None


class SpatialChannelAttention(Module):
    """Squeeze-excitation channel gate followed by a 7x7 spatial gate, with a
    residual skip: out = (x * channel) * spatial + x."""

    KERNEL = 7

    def __init__(self, rng: np.random.Generator, dim: int, reduction: int, name: str):
        if dim % reduction != 0:
            raise ConfigError(f"channel count {dim} not divisible by reduction {reduction}")
        hidden = dim // reduction
        self.fc1 = Linear(rng, dim, hidden, Group.NEW_MODULE, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden, dim, Group.NEW_MODULE, f"{name}.fc2")
        self.conv_w = Parameter(
            Tensor(rng.normal(0.0, 0.1, (1, 2, self.KERNEL, self.KERNEL))),
            Group.NEW_MODULE, f"{name}.conv_w")
        self.conv_b = Parameter(Tensor(np.zeros(1)), Group.NEW_MODULE, f"{name}.conv_b")
        self.dim = dim

    def channel_gate(self, fmap: Tensor) -> Tensor:
        pooled = T.reduce_mean(fmap, axis=(2, 3))                    # [B,d]
        z = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        return T.reshape(z, (fmap.shape[0], self.dim, 1, 1))

    def spatial_gate(self, fmap: Tensor) -> Tensor:
        mx = T.reduce_max(fmap, axis=1, keepdims=True)               # [B,1,g,g]
        av = T.reduce_mean(fmap, axis=1, keepdims=True)
        stacked = T.concat([mx, av], axis=1)                         # [B,2,g,g]
        pad = (self.KERNEL - 1) // 2
        return T.sigmoid(T.conv2d(stacked, self.conv_w.tensor, self.conv_b.tensor, padding=pad))

    def __call__(self, tokens: Tensor, grid: int,
                 gate_override: tuple | None = None) -> Tensor:
        b, n, d = tokens.shape
        fmap = T.reshape(T.transpose(tokens, (0, 2, 1)), (b, d, grid, grid))
        if gate_override is not None:
            channel = Tensor(np.broadcast_to(np.asarray(gate_override[0], dtype=np.float64),
                                             fmap.shape).copy())
            spatial = Tensor(np.broadcast_to(np.asarray(gate_override[1], dtype=np.float64),
                                             fmap.shape).copy())
        else:
            channel = self.channel_gate(fmap)
            spatial = self.spatial_gate(T.mul(fmap, channel))
        refined = T.add(T.mul(T.mul(fmap, channel), spatial), fmap)
        return T.transpose(T.reshape(refined, (b, d, n)), (0, 2, 1))


def pool_tokens(tokens: Tensor) -> Tensor:
    """Global average over the token axis: [B,N,d] -> [B,d]."""
    return T.reduce_mean(tokens, axis=1)


class DualPathModel(Module):
    """Two visual streams plus text-queried attribute attention, fused by a
    2-token self-attention block into the final ternary gender decision."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0,
                 query_texts: dict[str, str] | None = None):
        self.config = config
        self.query_texts = dict(query_texts) if query_texts else default_query_texts(config)
        missing = set(config.attribute_names) - set(self.query_texts)
        if missing:
            raise ConfigError(f"no query text for attributes: {sorted(missing)}")
        ss = np.random.SeedSequence([int(seed), 0x5EED])
        r_vis1, r_vis2, r_text, r_new = (np.random.default_rng(s) for s in ss.spawn(4))

        self.visual_direct = VisualEncoder(
            r_vis1, config.image_size, config.patch_size, config.token_dim,
            config.visual_depth, config.visual_heads, config.mlp_ratio,
            name="visual1", qk_gain=config.visual_qk_gain)
        self.visual_mediated = VisualEncoder(
            r_vis2, config.image_size, config.patch_size, config.token_dim,
            config.visual_depth, config.visual_heads, config.mlp_ratio,
            name="visual2", qk_gain=config.visual_qk_gain)
        self.text = TextEncoder(
            r_text, vocab, config.joint_dim, config.text_depth, config.text_heads,
            config.text_max_len, config.mlp_ratio, name="text")

        d_v, d = config.token_dim, config.joint_dim
        self.project_direct = Linear(r_new, d_v, d, Group.NEW_MODULE, "project1")
        self.project_mediated = Linear(r_new, d_v, d, Group.NEW_MODULE, "project2")
        self.sca_direct = (SpatialChannelAttention(r_new, d, config.sca_reduction, "sca1")
                           if config.use_sca_path1 else None)
        self.sca_mediated = (SpatialChannelAttention(r_new, d, config.sca_reduction, "sca2")
                             if config.use_sca_path2 else None)
        self.cross_attention = MultiheadAttention(
            r_new, d, config.attribute_attention_heads, Group.NEW_MODULE, "cross_attention")
        self.attribute_heads = {
            name: Linear(r_new, d, k, Group.NEW_MODULE, f"attr_head.{name}")
            for name, k in config.attributes
        }
        self.gender_head_direct = MLPHead(r_new, d, GENDER_CLASSES, Group.NEW_MODULE, "gender_head1")
        self.gender_head_mediated = MLPHead(r_new, d, GENDER_CLASSES, Group.NEW_MODULE, "gender_head2")
        self.fusion_attention_block = MultiheadAttention(
            r_new, d, config.fusion_heads, Group.NEW_MODULE, "fusion.attn")
        self.fusion_norm = LayerNorm(d, Group.NEW_MODULE, "fusion.norm")
        self.fused_head = MLPHead(r_new, d, GENDER_CLASSES, Group.NEW_MODULE, "fused_head")
        self._query_cache: dict[str, Tensor] = {}

    # -- queries ------------------------------------------------------------------

    def encode_query(self, text: str) -> Tensor:
        if self.text.any_trainable():
            return self.text.encode(text)
        cached = self._query_cache.get(text)
        if cached is None:
            cached = self._query_cache[text] = self.text.encode(text)
        return cached

    # -- path pieces -----------------------------------------------------------------

    def direct_path(self, tokens: Tensor, training: bool, rng) -> tuple[Tensor, Tensor]:
        pooled = pool_tokens(tokens)
        logits = self.gender_head_direct(pooled, self.config.dropout, rng, training)
        return pooled, logits

    def attend_attribute(self, query: Tensor, tokens: Tensor,
                         retain: bool = False) -> tuple[Tensor, np.ndarray | None]:
        """Single-query multi-head attention over visual tokens -> [B,d]."""
        out, weights = self.cross_attention(query, tokens, tokens, retain=retain)
        b, _, d = out.shape
        return T.reshape(out, (b, d)), weights

    def aggregate_attributes(self, vectors: list[Tensor], training: bool, rng) -> tuple[Tensor, Tensor]:
        stacked = T.stack_tokens(vectors)                    # [B,|A|,d]
        pooled = T.reduce_mean(stacked, axis=1)
        logits = self.gender_head_mediated(pooled, self.config.dropout, rng, training)
        return pooled, logits

    def fuse(self, direct_vec: Tensor, mediated_vec: Tensor, training: bool = False,
             rng=None, retain: bool = False) -> tuple[Tensor, Tensor, np.ndarray | None]:
        seq = T.stack_tokens([direct_vec, mediated_vec])     # [B,2,d], no positions
        attended, weights = self.fusion_attention_block(seq, seq, seq, retain=retain)
        normed = self.fusion_norm(T.add(attended, seq))
        fused = T.reduce_mean(normed, axis=1)
        if training and self.config.dropout > 0.0:
            fused = T.dropout(fused, self.config.dropout, rng, training=True)
        logits = self.fused_head(fused, self.config.dropout, rng, training)
        return fused, logits, weights

    # -- full forward -------------------------------------------------------------------

    def forward(self, images, prompts: list[str] | None = None, training: bool = False,
                rng: np.random.Generator | None = None,
                retain_attention: bool = False) -> ForwardOutputs:
        cfg = self.config
        batch = images.shape[0]

        tokens1, stack1 = self.visual_direct.encode(images, retain_attention)
        z1 = self.project_direct(tokens1)
        if self.sca_direct is not None:
            z1 = self.sca_direct(z1, cfg.grid)
        direct_vec, direct_logits = self.direct_path(z1, training, rng)

        tokens2, stack2 = self.visual_mediated.encode(images, retain_attention)
        z2 = self.project_mediated(tokens2)
        if self.sca_mediated is not None:
            z2 = self.sca_mediated(z2, cfg.grid)

        attribute_logits: dict[str, Tensor] = {}
        cross: dict[str, np.ndarray] = {}
        vectors: list[Tensor] = []
        if cfg.prompt_mode == "sample":
            if prompts is None:
                raise ConfigError("sample prompt mode requires per-sample prompts")
            rows = [self.encode_query(p) for p in prompts]
            sample_queries = T.reshape(T.concat(rows, axis=0), (batch, 1, cfg.joint_dim))
        for name, _ in cfg.attributes:
            if cfg.prompt_mode == "class":
                q = self.encode_query(self.query_texts[name])
                if q.requires_grad:
                    query = T.reshape(T.concat([q] * batch, axis=0), (batch, 1, cfg.joint_dim))
                else:
                    # frozen text path: broadcast the cached query across the batch
                    query = Tensor(np.broadcast_to(q.data, (batch, 1, cfg.joint_dim)))
            else:
                query = sample_queries
            vec, weights = self.attend_attribute(query, z2, retain=retain_attention)
            vectors.append(vec)
            attribute_logits[name] = self.attribute_heads[name](vec)
            if retain_attention:
                cross[name] = weights
        mediated_vec, mediated_logits = self.aggregate_attributes(vectors, training, rng)

        fused_vec, fused_logits, fusion_weights = self.fuse(
            direct_vec, mediated_vec, training, rng, retain_attention)

        return ForwardOutputs(
            direct_logits=direct_logits,
            mediated_logits=mediated_logits,
            fused_logits=fused_logits,
            attribute_logits=attribute_logits,
            direct_embedding=direct_vec,
            mediated_embedding=mediated_vec,
            fused_embedding=fused_vec,
            cross_attention=cross if retain_attention else None,
            fusion_attention=fusion_weights,
            visual_attention_direct=stack1,
            visual_attention_mediated=stack2,
        )

    def apply_freeze(self, policy: FreezePolicy) -> None:
        apply_freeze_policy(self.visual_direct, policy.visual_blocks)
        apply_freeze_policy(self.visual_mediated, policy.visual_blocks)
        apply_freeze_policy(self.text, policy.text_blocks)
        self._query_cache.clear()
