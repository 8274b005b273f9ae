"""Cosine prototypical classifier.

Prototypes are class centroids of embeddings. They carry no trainable
parameters: predictions are differentiable with respect to the embeddings
only, and the centroid matrix enters the graph as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, DimensionError, Node


class PrototypeInitError(ValueError):
    pass


@dataclass
class Prototypes:
    mu: np.ndarray                 # (C, d_embed)
    source_counts: np.ndarray      # (C,)
    target_counts: np.ndarray      # (C,)
    temperature: float = 1.0

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> "Prototypes":
        return replace(self, mu=self.mu.copy(), source_counts=self.source_counts.copy(),
                       target_counts=self.target_counts.copy())


def _unit_rows(mu: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mu, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise DegenerateInputError(f"prototype for class {zero[0]} has zero norm")
    return mu / norms


def proto_predict(p: Prototypes, z) -> Node:
    """Softmax over classes of cos(z_i, mu_c) / temperature."""
    z = ad.as_node(z)
    if z.cols != p.mu.shape[1]:
        raise DimensionError(f"prototypes are {p.mu.shape[1]}-d, embeddings have shape {z.shape}")
    mu_hat = ad.constant(_unit_rows(p.mu).T)
    cos = ad.matmul(ad.normalize_rows(z), mu_hat)
    return ad.row_softmax(ad.scale(cos, 1.0 / p.temperature))


def _argmax(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(probs, axis=1)


def init_from_source(z_s, y_s, num_classes: int | None = None, temperature: float = 1.0) -> Prototypes:
    z = np.asarray(z_s.value if isinstance(z_s, Node) else z_s, dtype=np.float64)
    y = np.asarray(y_s, dtype=np.intp)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    counts = np.bincount(y, minlength=num_classes)
    if counts.size > num_classes:
        raise PrototypeInitError(f"label {int(y.max())} outside 0..{num_classes - 1}")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise PrototypeInitError(f"class {empty[0]} has no source samples")
    mu = np.zeros((num_classes, z.shape[1]))
    np.add.at(mu, y, z)
    mu /= counts[:, None]
    return Prototypes(mu=mu, source_counts=counts, target_counts=np.zeros(num_classes, dtype=np.intp),
                      temperature=temperature)


def refine_on_target(p: Prototypes, z_t, max_steps: int = 3):
    """Alternate pseudo-labelling and centroid updates on target embeddings.

    Stops when assignments repeat or after ``max_steps`` assignment passes.
    Returns the refined prototypes, the last pseudo labels, and the
    probabilities those labels came from.
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    z = np.asarray(z_t.value if isinstance(z_t, Node) else z_t, dtype=np.float64)
    cur = p.copy()
    labels = None
    probs = None
    for _ in range(max_steps):
        probs = proto_predict(cur, z).value
        new = _argmax(probs)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=cur.num_classes)
        sums = np.zeros_like(cur.mu)
        np.add.at(sums, labels, z)
        filled = counts > 0
        cur.mu[filled] = sums[filled] / counts[filled, None]
        cur.target_counts = counts
    return cur, labels, probs
