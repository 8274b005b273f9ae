"""Adversarial dual-classifier training.

Each iteration runs three updates:

* Step A: generator and neural classifier on source cross-entropy.
* Step B: generator frozen; the neural classifier fits the source while
  pushing its target predictions away from the prototypical classifier's.
* Step C: neural classifier frozen; the generator pulls the two target
  predictions together, minimises prediction entropy, and aligns class
  means across domains using confident prototype pseudo labels.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import BatchIterator, Dataset, next_batch
from .losses import (LossBreakdown, alignment_loss, draw_projections, entropy_loss,
                     filter_confident, source_loss, swd)
from .nn import (AdamState, GeneratorNet, NeuralClassifier, adam_step, classifier_forward,
                 freeze, generator_forward, zero_grads)
from .proto import Prototypes, init_from_source, proto_predict, refine_on_target

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_STREAMS = ("init", "init2", "dropout", "swd", "pretrain_batches", "a_batches", "s_batches", "t_batches")


class ConfigurationError(ValueError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    cfg: TrainConfig
    num_classes: int
    generator: GeneratorNet
    classifier: NeuralClassifier
    classifier2: NeuralClassifier | None
    adam_g: AdamState
    adam_c: AdamState
    adam_c2: AdamState | None
    rngs: dict[str, np.random.Generator]
    prototypes: Prototypes | None = None
    iteration: int = 0
    pretrained: bool = False
    iterators: dict[str, BatchIterator] = field(default_factory=dict)
    loss_history: list[dict] = field(default_factory=list)
    metric_history: list[dict] = field(default_factory=list)

    @property
    def g_params(self) -> list[ad.Node]:
        return self.generator.parameters()

    @property
    def c_params(self) -> list[ad.Node]:
        return self.classifier.parameters()

    @property
    def c2_params(self) -> list[ad.Node]:
        return self.classifier2.parameters() if self.classifier2 is not None else []


def init_state(cfg: TrainConfig, d_in: int, num_classes: int) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(_STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(_STREAMS, seeds)}
    gen = GeneratorNet(rngs["init"], d_in, cfg.d_hidden, cfg.d_embed, cfg.dropout_retain)
    cls = NeuralClassifier(rngs["init"], cfg.d_embed, num_classes)
    cls2 = NeuralClassifier(rngs["init2"], cfg.d_embed, num_classes) if cfg.ablation.same_classifier_variant else None
    state = TrainState(
        cfg=cfg, num_classes=num_classes, generator=gen, classifier=cls, classifier2=cls2,
        adam_g=AdamState.for_params(gen.parameters(), lr=cfg.pretrain_lr),
        adam_c=AdamState.for_params(cls.parameters(), lr=cfg.pretrain_lr),
        adam_c2=AdamState.for_params(cls2.parameters(), lr=cfg.pretrain_lr) if cls2 else None,
        rngs=rngs,
    )
    return state


def _check_inputs(source: Dataset, target: Dataset | None, cfg: TrainConfig) -> None:
    if not source.labeled:
        raise ConfigurationError("source dataset must be labeled")
    if target is None:
        return
    if source.d != target.d:
        raise ConfigurationError(f"feature dimensions differ: source {source.d}, target {target.d}")
    if source.class_count != target.class_count:
        raise ConfigurationError(f"label spaces differ: source has {source.class_count} classes, "
                                 f"target {target.class_count}")


# --- forward helpers -------------------------------------------------------

def embed(state: TrainState, x, training: bool) -> ad.Node:
    return generator_forward(state.generator, x, training=training, rng=state.rngs["dropout"])


def embed_eval(state: TrainState, x: np.ndarray) -> np.ndarray:
    return generator_forward(state.generator, x, training=False).value


def predict_second(state: TrainState, z: ad.Node, protos: Prototypes | None) -> ad.Node:
    """Output of the second classifier: prototypes, or the twin network."""
    if state.classifier2 is not None:
        return classifier_forward(state.classifier2, z)
    return proto_predict(protos, z)


def refresh_source_prototypes(state: TrainState, source: Dataset) -> None:
    z = embed_eval(state, source.features)
    state.prototypes = init_from_source(z, source.labels, state.num_classes, state.cfg.temperature)


def target_prototypes(state: TrainState, target: Dataset) -> Prototypes | None:
    if state.classifier2 is not None:
        return None
    refined, _, _ = refine_on_target(state.prototypes, embed_eval(state, target.features),
                                     state.cfg.proto_max_steps)
    return refined


def _finite_or_raise(state: TrainState, bd: LossBreakdown) -> None:
    vals = [bd.l_s, bd.l_dis, bd.l_c, bd.l_d, bd.l_em]
    if not all(np.isfinite(v) for v in vals):
        raise NumericalError(state.iteration, "loss")
    for p in state.g_params + state.c_params + state.c2_params:
        if not np.all(np.isfinite(p.value)):
            raise NumericalError(state.iteration, "parameter")


# --- steps -----------------------------------------------------------------

def _supervised_update(state: TrainState, x_s, y_s) -> LossBreakdown:
    params = state.g_params + state.c_params + state.c2_params
    zero_grads(params)
    z = embed(state, x_s, training=True)
    l_s = source_loss(classifier_forward(state.classifier, z),
                      predict_second(state, z, state.prototypes), y_s)
    l_s.backward()
    adam_step(state.adam_g, state.g_params)
    adam_step(state.adam_c, state.c_params)
    if state.classifier2 is not None:
        adam_step(state.adam_c2, state.c2_params)
    return LossBreakdown(l_s=l_s.item())


def step_A(state: TrainState, source_batch) -> LossBreakdown:
    """Source supervision of the generator and the neural classifier(s)."""
    return _supervised_update(state, *source_batch)


def step_B(state: TrainState, source_batch, target_batch, cfg: TrainConfig,
           tgt_protos: Prototypes | None = None) -> LossBreakdown:
    """Generator frozen: minimise L_s - lambda1 * L_dis over the neural classifier(s)."""
    x_s, y_s = source_batch
    x_t = target_batch[0]
    cls_params = state.c_params + state.c2_params
    zero_grads(cls_params)
    freeze(state.g_params)
    try:
        z_s = embed(state, x_s, training=True)
        z_t = embed(state, x_t, training=True)
        tp = tgt_protos if tgt_protos is not None else state.prototypes
        l_s = source_loss(classifier_forward(state.classifier, z_s),
                          predict_second(state, z_s, state.prototypes), y_s)
        theta = draw_projections(state.num_classes, cfg.num_projections, state.rngs["swd"])
        l_dis = swd(classifier_forward(state.classifier, z_t), predict_second(state, z_t, tp),
                    projections=theta)
        obj = l_s if cfg.ablation.disable_dis else ad.sub(l_s, ad.scale(l_dis, cfg.lambda1))
        obj.backward()
        adam_step(state.adam_c, state.c_params)
        if state.classifier2 is not None:
            adam_step(state.adam_c2, state.c2_params)
    finally:
        freeze(state.g_params, False)
    return LossBreakdown(l_s=l_s.item(), l_dis=l_dis.item())


def step_C(state: TrainState, source_batch, target_batch, cfg: TrainConfig,
           tgt_protos: Prototypes | None = None) -> LossBreakdown:
    """Classifiers frozen: minimise L_s + L_em + lambda1 L_dis + lambda2 L_m over the generator."""
    x_s, y_s = source_batch
    x_t = target_batch[0]
    cls_params = state.c_params + state.c2_params
    zero_grads(state.g_params)
    freeze(cls_params)
    ab = cfg.ablation
    try:
        z_s = embed(state, x_s, training=True)
        z_t = embed(state, x_t, training=True)
        tp = tgt_protos if tgt_protos is not None else state.prototypes
        l_s = source_loss(classifier_forward(state.classifier, z_s),
                          predict_second(state, z_s, state.prototypes), y_s)
        yn_t = classifier_forward(state.classifier, z_t)
        yp_t = predict_second(state, z_t, tp)
        l_em = entropy_loss(yn_t, yp_t)
        theta = draw_projections(state.num_classes, cfg.num_projections, state.rngs["swd"])
        l_dis = swd(yn_t, yp_t, projections=theta)
        subset = filter_confident(yp_t.value, cfg.sigma)
        align = alignment_loss(z_s, y_s, z_t, subset)
        if len(subset) == 0:
            log.info("iteration %d: no confident target samples, alignment skipped", state.iteration)
        elif align.skipped:
            log.info("iteration %d: confident classes absent from source batch, alignment skipped",
                     state.iteration)

        obj = l_s
        if not ab.disable_em:
            obj = ad.add(obj, l_em)
        if not ab.disable_dis:
            obj = ad.add(obj, ad.scale(l_dis, cfg.lambda1))
        if not ab.disable_m and not align.skipped:
            obj = ad.add(obj, ad.scale(ad.sub(align.l_c, align.l_d), cfg.lambda2))
        obj.backward()
        adam_step(state.adam_g, state.g_params)
    finally:
        freeze(cls_params, False)
    return LossBreakdown(l_s=l_s.item(), l_dis=l_dis.item(), l_c=align.l_c.item(),
                         l_d=align.l_d.item(), l_em=l_em.item(), n_confident=len(subset),
                         classes_present=list(align.classes))


# --- schedules -------------------------------------------------------------

def _iterator(state: TrainState, name: str, n: int) -> BatchIterator:
    it = state.iterators.get(name)
    if it is None:
        it = state.iterators[name] = BatchIterator(n, state.cfg.batch_size, state.rngs[name])
    return it


def pretrain(state: TrainState, source: Dataset, cfg: TrainConfig | None = None) -> TrainState:
    """Source-only warm-up of the generator and neural classifier."""
    cfg = cfg or state.cfg
    _check_inputs(source, None, cfg)
    init_from_source(source.features, source.labels, state.num_classes)  # fails early on an empty class
    it = _iterator(state, "pretrain_batches", source.n)
    while state.iteration < cfg.pretrain_iters:
        refresh_source_prototypes(state, source)
        bd = step_A(state, next_batch(it, source))
        _finite_or_raise(state, bd)
        state.iteration += 1
    refresh_source_prototypes(state, source)
    _start_adaptation(state)
    return state


def _start_adaptation(state: TrainState) -> None:
    """Switch from warm-up to the main phase: fresh optimiser moments at the main rate."""
    cfg = state.cfg
    state.adam_g = AdamState.for_params(state.g_params, lr=cfg.lr)
    state.adam_c = AdamState.for_params(state.c_params, lr=cfg.lr)
    if state.classifier2 is not None:
        state.adam_c2 = AdamState.for_params(state.c2_params, lr=cfg.lr)
    state.pretrained = True
    state.iteration = 0


def train_iteration(state: TrainState, source: Dataset, target: Dataset) -> LossBreakdown:
    cfg = state.cfg
    bd_a = step_A(state, next_batch(_iterator(state, "a_batches", source.n), source))
    if cfg.ablation.source_only:
        bd = bd_a
    else:
        refresh_source_prototypes(state, source)
        tp = target_prototypes(state, target)
        sb = next_batch(_iterator(state, "s_batches", source.n), source)
        tb = next_batch(_iterator(state, "t_batches", target.n), target)
        step_B(state, sb, tb, cfg, tp)
        bd = step_C(state, sb, tb, cfg, tp)
    refresh_source_prototypes(state, source)
    _finite_or_raise(state, bd)
    return bd


def train(source: Dataset, target: Dataset, cfg: TrainConfig,
          on_record: Callable[[dict], None] | None = None,
          on_pretrained: Callable[[TrainState], None] | None = None,
          state: TrainState | None = None) -> TrainState:
    """Pretrain, then ``cfg.train_iters`` adversarial iterations.

    ``on_record`` receives every run-log record as it is produced. Target
    labels, when present, are used only for evaluation snapshots. Passing a
    ``state`` restored from a checkpoint resumes where it stopped.
    """
    from .metrics import evaluate

    _check_inputs(source, target, cfg)
    emit = on_record or (lambda rec: None)

    def snapshot():
        if not target.labeled:
            return
        rep = evaluate(state, target)
        rec = {"kind": "eval", "iter": state.iteration, "acc_CN": rep.acc_CN, "acc_CP": rep.acc_CP}
        state.metric_history.append(rec)
        emit(rec)

    if state is None:
        state = init_state(cfg, source.d, source.class_count)
    else:
        state.cfg = cfg
    if not state.pretrained:
        pretrain(state, source, cfg)
        snapshot()
        if on_pretrained is not None:
            on_pretrained(state)
    while state.iteration < cfg.train_iters:
        bd = train_iteration(state, source, target)
        state.iteration += 1
        rec = {"kind": "iter", "iter": state.iteration, **bd.as_record()}
        state.loss_history.append(rec)
        emit(rec)
        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.train_iters:
            snapshot()
    return state


# --- checkpoints -----------------------------------------------------------

def _params_dict(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for prefix, params in (("g", state.g_params), ("c", state.c_params), ("c2", state.c2_params)):
        for i, p in enumerate(params):
            out[f"{prefix}.{i}"] = p.value
    for prefix, adam in (("adam_g", state.adam_g), ("adam_c", state.adam_c), ("adam_c2", state.adam_c2)):
        if adam is None:
            continue
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
    if state.prototypes is not None:
        out["proto.mu"] = state.prototypes.mu
        out["proto.source_counts"] = state.prototypes.source_counts
        out["proto.target_counts"] = state.prototypes.target_counts
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Write weights, optimiser moments, prototypes, RNG and iterator state.

    The archive uses fixed timestamps so identical states give identical bytes.
    """
    meta = {
        "format_version": FORMAT_VERSION,
        "config": state.cfg.to_dict(),
        "num_classes": state.num_classes,
        "d_in": state.generator.d_in,
        "iteration": state.iteration,
        "pretrained": state.pretrained,
        "adam_t": {k: a.t for k, a in (("adam_g", state.adam_g), ("adam_c", state.adam_c),
                                       ("adam_c2", state.adam_c2)) if a is not None},
        "adam_lr": {k: a.lr for k, a in (("adam_g", state.adam_g), ("adam_c", state.adam_c),
                                         ("adam_c2", state.adam_c2)) if a is not None},
        "prototype_temperature": state.prototypes.temperature if state.prototypes is not None else None,
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "iterators": {k: it.get_state() for k, it in state.iterators.items()},
        "loss_history": state.loss_history,
        "metric_history": state.metric_history,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(meta, sort_keys=True))
        for name, arr in sorted(_params_dict(state).items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> TrainState:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in zf.namelist() if n.endswith(".npy")}
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        state = init_state(cfg, meta["d_in"], meta["num_classes"])
        for prefix, params in (("g", state.g_params), ("c", state.c_params), ("c2", state.c2_params)):
            for i, p in enumerate(params):
                arr = arrays[f"{prefix}.{i}"]
                if arr.shape != p.value.shape:
                    raise CheckpointError(f"{path}: {prefix}.{i} has shape {arr.shape}, expected {p.value.shape}")
                p.value = arr.copy()
                p.grad = np.zeros_like(p.value)
        for key in ("adam_g", "adam_c", "adam_c2"):
            adam = getattr(state, key)
            if adam is None:
                continue
            adam.t = meta["adam_t"][key]
            adam.lr = meta["adam_lr"][key]
            adam.m = [arrays[f"{key}.m.{i}"].copy() for i in range(len(adam.m))]
            adam.v = [arrays[f"{key}.v.{i}"].copy() for i in range(len(adam.v))]
        if "proto.mu" in arrays:
            state.prototypes = Prototypes(arrays["proto.mu"].copy(), arrays["proto.source_counts"].copy(),
                                          arrays["proto.target_counts"].copy(), meta["prototype_temperature"])
        for k, st in meta["rngs"].items():
            state.rngs[k].bit_generator.state = st
        for k, st in meta["iterators"].items():
            it = BatchIterator(len(st["perm"]), cfg.batch_size, state.rngs[k])
            it.set_state(st)
            state.iterators[k] = it
        state.iteration = meta["iteration"]
        state.pretrained = meta["pretrained"]
        state.loss_history = meta["loss_history"]
        state.metric_history = meta["metric_history"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint (missing {exc})") from None
    return state
