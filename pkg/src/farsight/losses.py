"""Composite training objective: ternary gender CE with auxiliaries plus
per-attribute cross-entropy with an ignore index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError
from .ontology import GENDER_CLASSES, IGNORE_INDEX
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    auxiliary: float = 0.25      # weight on each of the two path heads
    gender: float = 0.5
    attributes: float = 0.5

    def __post_init__(self):
        if min(self.auxiliary, self.gender, self.attributes) < 0:
            raise ConfigError("loss weights must be nonnegative")


def gender_loss(fused_logits: Tensor, direct_logits: Tensor, mediated_logits: Tensor,
                labels: np.ndarray, auxiliary_weight: float = 0.25) -> Tensor:
    """CE on the fused head plus ``auxiliary_weight`` times CE on each path head.

    Gender labels are never ignored; Unknown (2) is an ordinary class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= GENDER_CLASSES)):
        raise LabelError(f"gender labels must lie in [0,{GENDER_CLASSES})")
    fused = T.cross_entropy_ignore(fused_logits, labels)
    side = T.add(T.cross_entropy_ignore(direct_logits, labels),
                 T.cross_entropy_ignore(mediated_logits, labels))
    return T.add(fused, T.mul(side, auxiliary_weight))


def attribute_loss(attribute_logits: dict[str, Tensor],
                   attribute_labels: dict[str, np.ndarray]) -> Tensor:
    """Mean over attributes of ignore-aware CE; all-ignored attributes add 0."""
    names = list(attribute_logits)
    total = None
    for name in names:
        term = T.cross_entropy_ignore(attribute_logits[name], attribute_labels[name],
                                      ignore_index=IGNORE_INDEX)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(names))


def total_loss(gender_term: Tensor, attribute_term: Tensor,
               gender_weight: float = 0.5, attribute_weight: float = 0.5) -> Tensor:
    return T.add(T.mul(gender_term, gender_weight), T.mul(attribute_term, attribute_weight))
