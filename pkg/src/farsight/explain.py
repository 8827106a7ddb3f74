"""Text-conditioned attention rollout: per-attribute contribution maps over the
token grid and a fused gender map."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .imageio import write_pgm, write_ppm


@dataclass
class AttentionMap:
    """A probability distribution over grid cells, tagged by its source."""

    values: np.ndarray           # [g,g], nonnegative, sums to 1
    tag: str
    sample_id: int | str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"attention map must be square, got {v.shape}")
        if np.any(v < -1e-12) or abs(float(v.sum()) - 1.0) > 1e-6:
            raise ShapeError(f"attention map for {self.tag!r} is not a distribution")
        self.values = np.clip(v, 0.0, None)


def rollout_visual(stack: list[np.ndarray]) -> np.ndarray:
    """Compose a self-attention stack into one token->token influence matrix.

    Per layer: average heads, add identity, renormalize rows; multiply the
    layer matrices in depth order. Input layers are [heads,N,N] with rows
    summing to 1 (validated to 1e-6).
    """
    if not stack:
        raise ShapeError("rollout needs at least one attention layer")
    result: np.ndarray | None = None
    n = stack[0].shape[-1]
    for layer in stack:
        layer = np.asarray(layer, dtype=np.float64)
        if layer.ndim != 3 or layer.shape[-1] != n or layer.shape[-2] != n:
            raise ShapeError(f"attention layer shape {layer.shape} invalid")
        if np.max(np.abs(layer.sum(axis=-1) - 1.0)) > 1e-6:
            raise ShapeError("attention rows must sum to 1")
        mixed = layer.mean(axis=0) + np.eye(n)
        mixed /= mixed.sum(axis=-1, keepdims=True)
        result = mixed if result is None else mixed @ result
    return result


def attribute_map(cross_attention: np.ndarray, rollout: np.ndarray, grid: int,
                  tag: str, sample_id=None) -> AttentionMap:
    """Head-averaged text->vision attention composed with the rollout."""
    cross = np.asarray(cross_attention, dtype=np.float64)
    if cross.ndim != 3 or cross.shape[1] != 1:
        raise ShapeError(f"cross-attention must be [heads,1,N], got {cross.shape}")
    weights = cross.mean(axis=0)[0]
    flat = weights @ rollout
    flat = np.clip(flat, 0.0, None)
    total = flat.sum()
    if total <= 0:
        flat = np.full_like(flat, 1.0 / flat.size)
    else:
        flat = flat / total
    return AttentionMap(values=flat.reshape(grid, grid), tag=tag, sample_id=sample_id)


def gender_map(maps: list[AttentionMap], fusion_attention: np.ndarray,
               sample_id=None) -> AttentionMap:
    """Spatial support of the attribute-mediated path behind the fused decision.

    The per-attribute maps are averaged, scaled by the fusion-attention mass on
    the attribute token (token index 1), and renormalized. The direct path is
    globally pooled and contributes no spatial map.
    """
    if not maps:
        raise ShapeError("gender map needs at least one attribute map")
    fusion = np.asarray(fusion_attention, dtype=np.float64)
    mass_on_attributes = float(fusion.mean(axis=0)[:, 1].mean())
    combined = mass_on_attributes * np.mean([m.values for m in maps], axis=0)
    combined /= combined.sum()
    return AttentionMap(values=combined, tag="gender-fused", sample_id=sample_id)


def write_heatmap(attention: AttentionMap, path) -> None:
    """Grayscale PGM scaled so the largest cell maps to 255."""
    v = attention.values
    peak = float(v.max())
    scaled = np.zeros_like(v) if peak == 0 else v / peak * 255.0
    write_pgm(np.round(scaled).astype(np.uint8), path)


def overlay_heatmap(attention: AttentionMap, pixels: np.ndarray, path) -> None:
    """Composite the map onto its source image (red channel carries the heat)."""
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape[:2]
    g = attention.values.shape[0]
    peak = attention.values.max()
    heat = attention.values / peak if peak > 0 else attention.values
    cell_h, cell_w = h // g, w // g
    up = np.kron(heat, np.ones((cell_h, cell_w)))
    out = img * 0.5
    out[:, :, 0] += up * 255.0 * 0.5
    write_ppm(np.round(np.clip(out, 0, 255)).astype(np.uint8), path)


def write_map_csv(maps: list[AttentionMap], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "tag", "row", "col", "value"])
        for m in maps:
            g = m.values.shape[0]
            for r in range(g):
                for c in range(g):
                    w.writerow([m.sample_id, m.tag, r, c, f"{m.values[r, c]:.9f}"])
