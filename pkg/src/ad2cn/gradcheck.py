"""Central finite-difference checks for every differentiable op and loss."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .losses import ConfidentSubset, alignment_loss, entropy_loss, source_loss, swd
from .nn import GeneratorNet, NeuralClassifier, classifier_forward, generator_forward
from .proto import Prototypes, proto_predict

EPS = 1e-4
KINK_GAP = 1e-3


def numeric_grad(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], i: int,
                 eps: float = EPS) -> np.ndarray:
    x = xs[i]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(xs)
        x[idx] = orig - eps
        lo = f(xs)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def check(build: Callable[[Sequence[ad.Node]], ad.Node], xs: list[np.ndarray], eps: float = EPS) -> float:
    """Max relative error between backprop and central differences over all inputs."""
    nodes = [ad.Node(x.copy(), requires_grad=True) for x in xs]
    build(nodes).backward()

    def f(vals):
        return build([ad.Node(v) for v in vals]).item()

    vals = [x.copy() for x in xs]
    return max(relative_error(n.grad, numeric_grad(f, vals, i, eps)) for i, n in enumerate(nodes))


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) < KINK_GAP
    x[small] = np.where(x[small] >= 0, KINK_GAP, -KINK_GAP) * 2
    return x


def _column_gaps_ok(m: np.ndarray) -> bool:
    s = np.sort(m, axis=0)
    return m.shape[0] < 2 or float(np.min(np.diff(s, axis=0))) >= KINK_GAP


def _distinct_columns(rng, shape) -> np.ndarray:
    while True:
        x = rng.uniform(-1, 1, shape)
        if _column_gaps_ok(x):
            return x


def _weighted(rng, shape):
    w = ad.constant(rng.uniform(-1, 1, shape))
    return lambda node: ad.sum_all(ad.mul(node, w))


def _cases(rng: np.random.Generator):
    """Yield (name, build, inputs) for one random instance of every check."""
    u = lambda *s: rng.uniform(-1, 1, s)

    w = _weighted(rng, (3, 2))
    yield "matmul", lambda n: w(ad.matmul(n[0], n[1])), [u(3, 4), u(4, 2)]
    w = _weighted(rng, (3, 4))
    yield "add", lambda n: w(ad.add(n[0], n[1])), [u(3, 4), u(3, 4)]
    yield "add_bias", lambda n: w(ad.add(n[0], n[1])), [u(3, 4), u(1, 4)]
    yield "sub", lambda n: w(ad.sub(n[0], n[1])), [u(3, 4), u(3, 4)]
    yield "mul", lambda n: w(ad.mul(n[0], n[1])), [u(3, 4), u(3, 4)]
    yield "scale", lambda n: w(ad.scale(n[0], -2.5)), [u(3, 4)]
    yield "relu", lambda n: w(ad.relu(n[0])), [_away_from_zero(u(3, 4))]
    yield "log", lambda n: w(ad.log(n[0])), [rng.uniform(0.1, 1.1, (3, 4))]
    yield "exp", lambda n: w(ad.exp(n[0])), [u(3, 4)]
    yield "row_softmax", lambda n: w(ad.row_softmax(n[0])), [u(3, 4)]
    yield "sort_columns", lambda n: w(ad.sort_columns_with_grad(n[0])), [_distinct_columns(rng, (3, 4))]
    c31, c14, c34, c43 = (ad.constant(u(*s)) for s in ((3, 1), (1, 4), (3, 4), (4, 3)))
    yield "sum_rows", lambda n: ad.sum_all(ad.mul(ad.sum_rows(n[0]), c31)), [u(3, 4)]
    yield "mean_rows", lambda n: ad.sum_all(ad.mul(ad.mean_rows(n[0]), c14)), [u(3, 4)]
    yield "take_rows", lambda n: ad.sum_all(ad.mul(ad.take_rows(n[0], [2, 0, 2]), c34)), [u(3, 4)]
    yield "pick", lambda n: ad.sum_all(ad.mul(ad.pick(n[0], [1, 3, 0]), c31)), [u(3, 4)]
    yield "l2_norm", lambda n: ad.l2_norm(n[0]), [u(1, 5)]
    yield "normalize_rows", lambda n: w(ad.normalize_rows(n[0])), [u(3, 4)]
    yield "transpose", lambda n: ad.sum_all(ad.mul(ad.transpose(n[0]), c43)), [u(3, 4)]

    # composite losses
    y = rng.integers(0, 3, 5)
    mu = u(3, 4)
    protos = Prototypes(mu, np.ones(3, int), np.zeros(3, int), 1.0)
    yield ("L_s", lambda n: source_loss(ad.row_softmax(n[0]), proto_predict(protos, n[1]), y),
           [u(5, 3), u(5, 4)])

    while True:
        a, b = u(6, 3), u(6, 3)
        theta = rng.standard_normal((3, 8))
        theta /= np.linalg.norm(theta, axis=0)
        pa = ad.row_softmax(ad.Node(a)).value @ theta
        pb = ad.row_softmax(ad.Node(b)).value @ theta
        if _column_gaps_ok(pa) and _column_gaps_ok(pb):
            break
    yield ("L_dis", lambda n: swd(ad.row_softmax(n[0]), ad.row_softmax(n[1]), projections=theta),
           [a, b])

    y_s = np.array([0, 0, 1, 1, 2, 2])
    subset = ConfidentSubset(np.array([0, 1, 2, 3, 4, 5]), np.array([2, 0, 1, 0, 1, 2]), (0, 1, 2))
    yield "L_c", lambda n: alignment_loss(n[0], y_s, n[1], subset).l_c, [u(6, 4), u(6, 4)]
    yield "L_d", lambda n: alignment_loss(n[0], y_s, n[1], subset).l_d, [u(6, 4), u(6, 4)]
    yield ("L_em", lambda n: entropy_loss(ad.row_softmax(n[0]), proto_predict(protos, n[1])),
           [u(5, 3), u(5, 4)])

    x = u(4, 3)
    ym = rng.integers(0, 3, 4)
    while True:
        gen = GeneratorNet(rng, d_in=3, d_hidden=5, d_embed=4)
        cls = NeuralClassifier(rng, d_embed=4, num_classes=3)
        layers = [gen.layer1, gen.layer2, cls.layer1, cls.layer2]
        for layer in layers:
            layer.bias.value = rng.uniform(-0.5, 0.5, layer.bias.shape)
        h1 = x @ gen.layer1.weight.value + gen.layer1.bias.value
        z = np.maximum(h1, 0) @ gen.layer2.weight.value + gen.layer2.bias.value
        h2 = z @ cls.layer1.weight.value + cls.layer1.bias.value
        if min(np.abs(h1).min(), np.abs(h2).min()) >= 10 * KINK_GAP:
            break
    params = [t for layer in layers for t in (layer.weight.value, layer.bias.value)]

    def mlp_loss(n):
        it = iter(n)
        for layer in layers:
            layer.weight, layer.bias = next(it), next(it)
        probs = classifier_forward(cls, generator_forward(gen, x, training=False))
        return ad.scale(ad.mean_all(ad.log(ad.pick(probs, ym))), -1.0)

    yield "mlp_composite", mlp_loss, [p.copy() for p in params]


def run_suite(instances: int = 20, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, build, xs in _cases(rng):
            err = check(build, xs)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
