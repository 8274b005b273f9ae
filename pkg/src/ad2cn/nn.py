"""Feature generator, neural classifier, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Node


class LinearLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Node(rng.uniform(-limit, limit, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Node(np.zeros((1, out_dim)), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.rows

    @property
    def out_dim(self) -> int:
        return self.weight.cols

    def __call__(self, x: Node) -> Node:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Node]:
        return [self.weight, self.bias]


class GeneratorNet:
    """Two-layer embedder: linear, ReLU, dropout, linear."""

    def __init__(self, rng: np.random.Generator, d_in: int = 2048, d_hidden: int = 1024,
                 d_embed: int = 512, dropout_retain: float = 0.5):
        if not 0.0 < dropout_retain <= 1.0:
            raise ValueError(f"dropout_retain must be in (0, 1], got {dropout_retain}")
        self.layer1 = LinearLayer(d_in, d_hidden, rng)
        self.layer2 = LinearLayer(d_hidden, d_embed, rng)
        self.dropout_retain = dropout_retain

    @property
    def d_in(self) -> int:
        return self.layer1.in_dim

    @property
    def d_embed(self) -> int:
        return self.layer2.out_dim

    def parameters(self) -> list[Node]:
        return self.layer1.parameters() + self.layer2.parameters()


class NeuralClassifier:
    def __init__(self, rng: np.random.Generator, d_embed: int = 512, num_classes: int = 31):
        self.layer1 = LinearLayer(d_embed, d_embed, rng)
        self.layer2 = LinearLayer(d_embed, num_classes, rng)

    @property
    def d_embed(self) -> int:
        return self.layer1.in_dim

    @property
    def num_classes(self) -> int:
        return self.layer2.out_dim

    def parameters(self) -> list[Node]:
        return self.layer1.parameters() + self.layer2.parameters()


def generator_forward(g: GeneratorNet, x, training: bool = False,
                      rng: np.random.Generator | None = None) -> Node:
    x = ad.as_node(x)
    if x.cols != g.d_in:
        raise DimensionError(f"generator expects {g.d_in} input features, got shape {x.shape}")
    h = ad.relu(g.layer1(x))
    if training and g.dropout_retain < 1.0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        keep = rng.random(h.shape) < g.dropout_retain
        h = ad.mul(h, ad.constant(keep / g.dropout_retain))
    return g.layer2(h)


def classifier_forward(c: NeuralClassifier, z) -> Node:
    z = ad.as_node(z)
    if z.cols != c.d_embed:
        raise DimensionError(f"classifier expects {c.d_embed}-d embeddings, got shape {z.shape}")
    return ad.row_softmax(c.layer2(ad.relu(c.layer1(z))))


def freeze(params: Iterable[Node], frozen: bool = True) -> None:
    for p in params:
        p.requires_grad = not frozen


def zero_grads(params: Iterable[Node]) -> None:
    ad.zero_grad(params)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Node], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.value) for p in params],
                   v=[np.zeros_like(p.value) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Node], grads: Sequence[np.ndarray | None] | None = None) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` must be the same sequence the state was built for. Parameters
    with ``requires_grad`` off are skipped, as if frozen. ``grads`` defaults to
    each parameter's ``.grad``.
    """
    if len(params) != len(state.m):
        raise ContractError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    if grads is None:
        grads = [p.grad for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            continue
        if g is None:
            raise ContractError(f"missing gradient for active parameter {i}")
        if g.shape != p.value.shape:
            raise ContractError(f"gradient {i} has shape {g.shape}, parameter has {p.value.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        p.value -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
