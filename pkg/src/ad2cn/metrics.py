"""Target-domain accuracy for both classifiers, and a 2-D PCA export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .nn import classifier_forward
from .proto import init_from_source, refine_on_target


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    acc_CN: float
    acc_CP: float
    per_class_acc_CN: list[float]
    per_class_acc_CP: list[float]
    confusion_CN: np.ndarray
    confusion_CP: np.ndarray
    n_eval: int

    @property
    def headline(self) -> float:
        return self.acc_CP

    def to_dict(self) -> dict:
        return {
            "headline": "acc_CP",
            "acc_CN": self.acc_CN,
            "acc_CP": self.acc_CP,
            "n_eval": self.n_eval,
            "per_class_acc_CN": self.per_class_acc_CN,
            "per_class_acc_CP": self.per_class_acc_CP,
            "confusion_CN": self.confusion_CN.tolist(),
            "confusion_CP": self.confusion_CP.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["acc_CN"], d["acc_CP"], list(d["per_class_acc_CN"]), list(d["per_class_acc_CP"]),
                   np.asarray(d["confusion_CN"], dtype=np.int64), np.asarray(d["confusion_CP"], dtype=np.int64),
                   int(d["n_eval"]))


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def _per_class(cm: np.ndarray) -> list[float]:
    totals = cm.sum(axis=1)
    return [float(cm[c, c] / totals[c]) if totals[c] else float("nan") for c in range(cm.shape[0])]


def report_from_predictions(y_true, pred_n, pred_p, num_classes: int) -> EvalReport:
    y = np.asarray(y_true)
    cm_n = confusion_matrix(y, pred_n, num_classes)
    cm_p = confusion_matrix(y, pred_p, num_classes)
    n = int(y.size)
    return EvalReport(acc_CN=float(np.trace(cm_n) / n), acc_CP=float(np.trace(cm_p) / n),
                      per_class_acc_CN=_per_class(cm_n), per_class_acc_CP=_per_class(cm_p),
                      confusion_CN=cm_n, confusion_CP=cm_p, n_eval=n)


def predict(state, features: np.ndarray):
    """Eval-mode predictions (pred_N, pred_P, embeddings) for a batch of target rows.

    The prototypical prediction is the last refinement pass over these
    embeddings, starting from the state's source prototypes.
    """
    from .trainer import embed_eval

    z = embed_eval(state, features)
    probs_n = classifier_forward(state.classifier, z).value
    if state.classifier2 is not None:
        probs_p = classifier_forward(state.classifier2, z).value
    else:
        if state.prototypes is None:
            raise EvaluationError("state has no prototypes; pretrain first")
        _, _, probs_p = refine_on_target(state.prototypes, z, state.cfg.proto_max_steps)
    return np.argmax(probs_n, axis=1), np.argmax(probs_p, axis=1), z


def evaluate(state, target: Dataset) -> EvalReport:
    if not target.labeled:
        raise EvaluationError("evaluation needs a labeled target dataset")
    pred_n, pred_p, _ = predict(state, target.features)
    return report_from_predictions(target.labels, pred_n, pred_p, state.num_classes)


class Projection(NamedTuple):
    coords: np.ndarray
    components: np.ndarray
    degenerate: bool


def pca_project(z) -> Projection:
    """Project onto the top two principal directions.

    Each direction's largest-magnitude entry is made positive so the output
    is deterministic. Zero-variance input gives zeros and ``degenerate``.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if n < 2:
        raise ValueError("pca_project needs at least 2 rows")
    centered = z - z.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    if not np.any(cov):
        return Projection(np.zeros((n, 2)), np.zeros((d, 2)), True)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order]
    idx = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[idx, np.arange(comps.shape[1])])
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((d, 2 - comps.shape[1]))])
    return Projection(centered @ comps, comps, False)


def projection_rows(state, source: Dataset | None, target: Dataset):
    """Rows of (x, y, domain, label, pred) for source and target embeddings."""
    from .trainer import embed_eval

    parts, domains, labels, preds = [], [], [], []
    if source is not None:
        zs = embed_eval(state, source.features)
        if state.classifier2 is not None:
            ps = np.argmax(classifier_forward(state.classifier2, zs).value, axis=1)
        else:
            protos = init_from_source(zs, source.labels, state.num_classes, state.cfg.temperature)
            ps = np.argmax(_cosine(zs, protos.mu), axis=1)
        parts.append(zs)
        domains += ["source"] * source.n
        labels.append(source.labels)
        preds.append(ps)
    _, pt, zt = predict(state, target.features)
    parts.append(zt)
    domains += ["target"] * target.n
    labels.append(target.labels if target.labeled else np.full(target.n, -1))
    preds.append(pt)
    proj = pca_project(np.vstack(parts))
    return proj, domains, np.concatenate(labels), np.concatenate(preds)


def _cosine(z, mu):
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    mn = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    return zn @ mn.T


def write_projection_csv(path, proj: Projection, domains, labels, preds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "domain", "label", "pred"])
        for (x, y), dom, lab, pr in zip(proj.coords, domains, labels, preds):
            w.writerow([repr(float(x)), repr(float(y)), dom, int(lab), int(pr)])
