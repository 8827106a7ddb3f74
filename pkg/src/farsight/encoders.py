"""Mini visual and text encoders, trained from scratch, plus the freeze policy.

The visual encoder emits a g*g token grid without a class token; each block can
retain its post-softmax self-attention for rollout. The text encoder maps a
prompt string to a single joint-space vector by mean pooling token positions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Module, TransformerBlock
from .ontology import NEUTRAL_PROMPT
from .optim import Group, Parameter
from .tensor import Tensor

_TOKEN_RE = re.compile(r"[a-z0-9']+")

PAD_ID = 0
UNK_ID = 1


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Whitespace/punctuation token map with reserved PAD and UNK ids."""

    def __init__(self, tokens):
        ordered = sorted(set(tokens))
        self.id_of = {tok: i + 2 for i, tok in enumerate(ordered)}
        self.tokens = ["<pad>", "<unk>"] + ordered

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        toks: list[str] = []
        for t in texts:
            toks.extend(tokenize(t))
        return cls(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.id_of.get(tok, UNK_ID) for tok in tokenize(text)]


def interpolate_positional(embeddings: np.ndarray, new_side: int) -> np.ndarray:
    """Bilinearly resample a g0*g0 positional grid to g1*g1 (corners aligned)."""
    n, dim = embeddings.shape
    side = int(round(n ** 0.5))
    if side * side != n:
        raise ShapeError(f"positional table of {n} rows is not a square grid")
    if new_side < 1:
        raise ShapeError("target grid side must be >= 1")
    if new_side == side:
        return embeddings.copy()
    grid = embeddings.reshape(side, side, dim)
    if side == 1:
        return np.broadcast_to(grid[0, 0], (new_side * new_side, dim)).copy()
    coords = (np.arange(new_side) * (side - 1) / (new_side - 1)) if new_side > 1 else np.zeros(1)
    i0 = np.clip(np.floor(coords).astype(int), 0, side - 2)
    frac = coords - i0
    rows = (grid[i0] * (1 - frac)[:, None, None] + grid[i0 + 1] * frac[:, None, None])
    cols = (rows[:, i0] * (1 - frac)[None, :, None] + rows[:, i0 + 1] * frac[None, :, None])
    return cols.reshape(new_side * new_side, dim)


class VisualEncoder(Module):
    """Patch-embedding transformer producing a [B, g*g, token_dim] grid."""

    def __init__(self, rng: np.random.Generator, image_size: int, patch_size: int,
                 token_dim: int, depth: int, heads: int, mlp_ratio: float = 2.0,
                 name: str = "visual", qk_gain: float = 1.0):
        if image_size % patch_size != 0:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.token_dim = token_dim
        self.depth = depth
        patch_dim = 3 * patch_size * patch_size
        self.patch_embed = Parameter(
            Tensor(rng.normal(0.0, 1.0 / patch_dim ** 0.5, (patch_dim, token_dim))),
            Group.BACKBONE, f"{name}.patch_embed")
        self.patch_bias = Parameter(Tensor(np.zeros(token_dim)), Group.BACKBONE, f"{name}.patch_bias")
        self.positional = Parameter(
            Tensor(rng.normal(0.0, 1.0, (self.grid * self.grid, token_dim))),
            Group.BACKBONE, f"{name}.positional")
        self.blocks = [
            TransformerBlock(rng, token_dim, heads, mlp_ratio, Group.BACKBONE,
                             f"{name}.block{i}", shared_qk_gain=qk_gain)
            for i in range(depth)
        ]

    def embedding_parameters(self) -> list[Parameter]:
        return [self.patch_embed, self.patch_bias, self.positional]

    def encode(self, images, retain_attention: bool = False
               ) -> tuple[Tensor, list[np.ndarray] | None]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {x.shape}")
        b, _, h, w = x.shape
        p, g = self.patch_size, self.grid
        if h != g * p or w != g * p:
            raise ShapeError(f"expected {g * p}x{g * p} input, got {h}x{w}")
        patches = T.reshape(
            T.transpose(T.reshape(x, (b, 3, g, p, g, p)), (0, 2, 4, 1, 3, 5)),
            (b, g * g, 3 * p * p))
        tokens = T.affine(patches, self.patch_embed.tensor, self.patch_bias.tensor)
        tokens = T.add(tokens, self.positional.tensor)
        stack: list[np.ndarray] | None = [] if retain_attention else None
        for block in self.blocks:
            tokens, weights = block(tokens, retain=retain_attention)
            if retain_attention:
                stack.append(weights)
        return tokens, stack


class TextEncoder(Module):
    """Prompt -> joint-space vector via token embeddings, blocks, mean pooling."""

    def __init__(self, rng: np.random.Generator, vocab: Vocabulary, dim: int, depth: int,
                 heads: int, max_len: int = 64, mlp_ratio: float = 2.0, name: str = "text",
                 neutral_prompt: str = NEUTRAL_PROMPT):
        self.vocab = vocab
        self.dim = dim
        self.depth = depth
        self.max_len = max_len
        self.neutral_prompt = neutral_prompt
        self.tok_embed = Parameter(
            Tensor(rng.normal(0.0, 1.0, (len(vocab), dim))), Group.BACKBONE, f"{name}.tok_embed")
        self.positional = Parameter(
            Tensor(rng.normal(0.0, 1.0, (max_len, dim))), Group.BACKBONE, f"{name}.positional")
        self.blocks = [
            TransformerBlock(rng, dim, heads, mlp_ratio, Group.BACKBONE, f"{name}.block{i}")
            for i in range(depth)
        ]

    def embedding_parameters(self) -> list[Parameter]:
        return [self.tok_embed, self.positional]

    def encode(self, prompt: str) -> Tensor:
        ids = self.vocab.encode(prompt)
        if not ids:
            ids = self.vocab.encode(self.neutral_prompt)
        ids = ids[: self.max_len]
        x = T.embedding(self.tok_embed.tensor, np.asarray(ids))
        pos = T.embedding(self.positional.tensor, np.arange(len(ids)))
        x = T.reshape(T.add(x, pos), (1, len(ids), self.dim))
        for block in self.blocks:
            x, _ = block(x)
        return T.reduce_mean(x, axis=1)


@dataclass(frozen=True)
class FreezePolicy:
    """How many trailing blocks stay trainable in each encoder."""

    visual_blocks: int = 4
    text_blocks: int = 0


def apply_freeze_policy(encoder: Module, trainable_blocks: int) -> None:
    """Freeze all parameters except the last ``trainable_blocks`` blocks.

    Embeddings (patch/token/positional) are always frozen.
    """
    depth = encoder.depth
    if trainable_blocks > depth or trainable_blocks < 0:
        raise ConfigError(f"cannot unfreeze {trainable_blocks} of {depth} blocks")
    for p in encoder.embedding_parameters():
        p.set_trainable(False)
    for i, block in enumerate(encoder.blocks):
        block.set_trainable(i >= depth - trainable_blocks)
