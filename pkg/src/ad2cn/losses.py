"""Objective terms: source cross-entropy, sliced Wasserstein discrepancy,
class-conditional alignment, and prediction entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Node

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class LabelError(ValueError):
    pass


@dataclass
class ConfidentSubset:
    indices: np.ndarray
    labels: np.ndarray
    classes_present: tuple[int, ...]

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class LossBreakdown:
    l_s: float = 0.0
    l_dis: float = 0.0
    l_c: float = 0.0
    l_d: float = 0.0
    l_em: float = 0.0
    n_confident: int = 0
    classes_present: list[int] = field(default_factory=list)

    @property
    def l_m(self) -> float:
        return self.l_c - self.l_d

    def as_record(self) -> dict:
        return {"l_s": self.l_s, "l_dis": self.l_dis, "l_c": self.l_c, "l_d": self.l_d,
                "l_m": self.l_m, "l_em": self.l_em, "n_confident": self.n_confident,
                "classes_present": list(self.classes_present)}


def _xent(probs: Node, y: np.ndarray) -> Node:
    return ad.scale(ad.mean_all(ad.log(ad.clamp_min(ad.pick(probs, y), LOG_FLOOR))), -1.0)


def source_loss(y_hat_n, y_hat_p, y_s) -> Node:
    """Mean cross-entropy of each classifier on the labelled source batch, summed."""
    y_hat_n, y_hat_p = ad.as_node(y_hat_n), ad.as_node(y_hat_p)
    y = np.asarray(y_s, dtype=np.intp)
    if y_hat_n.shape != y_hat_p.shape:
        raise DimensionError(f"source_loss: prediction shapes differ {y_hat_n.shape} vs {y_hat_p.shape}")
    if y.shape != (y_hat_n.rows,):
        raise DimensionError(f"source_loss: {y.shape[0]} labels for {y_hat_n.rows} predictions")
    if y.size and (y.min() < 0 or y.max() >= y_hat_n.cols):
        raise LabelError(f"labels must lie in 0..{y_hat_n.cols - 1}, got range [{y.min()}, {y.max()}]")
    return ad.add(_xent(y_hat_n, y), _xent(y_hat_p, y))


def draw_projections(num_classes: int, num_projections: int, rng: np.random.Generator) -> np.ndarray:
    """Directions uniform on the unit sphere, one per column."""
    theta = rng.standard_normal((num_classes, num_projections))
    return theta / np.linalg.norm(theta, axis=0, keepdims=True)


def swd(p, q, num_projections: int = 128, rng: np.random.Generator | None = None,
        projections: np.ndarray | None = None) -> Node:
    """Sliced Wasserstein discrepancy between two sets of prediction rows.

    Averages, over random unit directions, the mean squared difference of
    the sorted projections. Pass ``projections`` to reuse a fixed draw.
    """
    p, q = ad.as_node(p), ad.as_node(q)
    if p.shape != q.shape:
        raise DimensionError(f"swd: shape mismatch {p.shape} vs {q.shape}")
    if projections is None:
        if num_projections < 1:
            raise ValueError("num_projections must be >= 1")
        if rng is None:
            raise ValueError("swd needs an rng or explicit projections")
        projections = draw_projections(p.cols, num_projections, rng)
    theta = ad.constant(projections)
    sp = ad.sort_columns_with_grad(ad.matmul(p, theta))
    sq = ad.sort_columns_with_grad(ad.matmul(q, theta))
    d = ad.sub(sp, sq)
    return ad.mean_all(ad.mul(d, d))


def filter_confident(y_hat_p_t, sigma: float) -> ConfidentSubset:
    probs = np.asarray(y_hat_p_t.value if isinstance(y_hat_p_t, Node) else y_hat_p_t)
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must be in [0, 1], got {sigma}")
    labels = np.argmax(probs, axis=1)
    conf = probs[np.arange(probs.shape[0]), labels]
    keep = np.flatnonzero(conf > sigma)
    kept = labels[keep]
    return ConfidentSubset(indices=keep, labels=kept,
                           classes_present=tuple(int(c) for c in np.unique(kept)))


@dataclass
class AlignmentResult:
    l_c: Node
    l_d: Node
    classes: tuple[int, ...]
    skipped: bool = False
    single_class: bool = False

    def __iter__(self):
        return iter((self.l_c, self.l_d))


def _zero() -> Node:
    return ad.constant([[0.0]])


def alignment_loss(z_s, y_s, z_t, subset: ConfidentSubset) -> AlignmentResult:
    """Same-class and cross-class distances between domain class means.

    Only classes with confident target samples that also occur in the source
    batch take part. ``l_c`` averages the same-class distances; ``l_d``
    averages over ordered pairs of distinct classes.
    """
    z_s, z_t = ad.as_node(z_s), ad.as_node(z_t)
    y_s = np.asarray(y_s, dtype=np.intp)
    src_classes = set(np.unique(y_s).tolist())
    classes = tuple(c for c in subset.classes_present if c in src_classes)
    if not classes:
        log.debug("alignment skipped: no confident class present in the source batch")
        return AlignmentResult(_zero(), _zero(), (), skipped=True)

    src_means = {c: ad.mean_rows(ad.take_rows(z_s, np.flatnonzero(y_s == c))) for c in classes}
    tgt_means = {c: ad.mean_rows(ad.take_rows(z_t, subset.indices[subset.labels == c])) for c in classes}

    same = [ad.l2_norm(ad.sub(src_means[c], tgt_means[c])) for c in classes]
    l_c = ad.scale(_total(same), 1.0 / len(same))
    if len(classes) < 2:
        return AlignmentResult(l_c, _zero(), classes, single_class=True)
    cross = [ad.l2_norm(ad.sub(src_means[c], tgt_means[k]))
             for c in classes for k in classes if c != k]
    l_d = ad.scale(_total(cross), 1.0 / len(cross))
    return AlignmentResult(l_c, l_d, classes)


def _total(terms: list[Node]) -> Node:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def entropy_loss(y_hat_n_t, y_hat_p_t) -> Node:
    """Mean over samples of the summed entropies of both classifiers."""
    y_hat_n_t, y_hat_p_t = ad.as_node(y_hat_n_t), ad.as_node(y_hat_p_t)
    if y_hat_n_t.shape != y_hat_p_t.shape:
        raise DimensionError(f"entropy_loss: shape mismatch {y_hat_n_t.shape} vs {y_hat_p_t.shape}")
    n = y_hat_n_t.rows

    def plogp(y):
        return ad.sum_all(ad.mul(y, ad.log(ad.clamp_min(y, LOG_FLOOR))))

    return ad.scale(ad.add(plogp(y_hat_n_t), plogp(y_hat_p_t)), -1.0 / n)
