import numpy as np
import pytest

from ad2cn import autodiff as ad
from ad2cn.autodiff import ContractError, DimensionError, Node
from ad2cn.nn import (AdamState, GeneratorNet, NeuralClassifier, adam_step, classifier_forward,
                      freeze, generator_forward, zero_grads)


@pytest.fixture
def small_gen():
    return GeneratorNet(np.random.default_rng(0), d_in=5, d_hidden=16, d_embed=4)


def test_default_architecture_shapes():
    g = GeneratorNet(np.random.default_rng(0))
    assert g.layer1.weight.shape == (2048, 1024)
    assert g.layer2.weight.shape == (1024, 512)
    assert g.dropout_retain == 0.5
    c = NeuralClassifier(np.random.default_rng(0), num_classes=65)
    assert c.layer1.weight.shape == (512, 512)
    assert c.layer2.weight.shape == (512, 65)


def test_init_is_glorot_uniform_with_zero_bias():
    g = GeneratorNet(np.random.default_rng(3), d_in=30, d_hidden=20, d_embed=10)
    limit = np.sqrt(6 / 50)
    assert np.all(np.abs(g.layer1.weight.value) <= limit)
    assert not np.any(g.layer1.bias.value)


def test_seeded_init_reproducible():
    a = GeneratorNet(np.random.default_rng(11), d_in=4, d_hidden=8, d_embed=3)
    b = GeneratorNet(np.random.default_rng(11), d_in=4, d_hidden=8, d_embed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.value, q.value)


class TestGenerator:
    def test_zero_weights_give_zero_output(self, small_gen):
        for p in small_gen.parameters():
            p.value[:] = 0
        x = np.random.default_rng(1).normal(size=(7, 5))
        assert not np.any(generator_forward(small_gen, x).value)

    def test_eval_mode_deterministic(self, small_gen):
        x = np.random.default_rng(1).normal(size=(7, 5))
        a = generator_forward(small_gen, x, training=False, rng=np.random.default_rng(0)).value
        b = generator_forward(small_gen, x, training=False, rng=np.random.default_rng(1)).value
        np.testing.assert_array_equal(a, b)

    def test_output_shape(self, small_gen):
        assert generator_forward(small_gen, np.zeros((3, 5))).shape == (3, 4)

    def test_width_mismatch(self, small_gen):
        with pytest.raises(DimensionError):
            generator_forward(small_gen, np.zeros((3, 6)))

    def test_dropout_mean_matches_eval(self, small_gen):
        # Monte-Carlo oracle: inverted dropout is unbiased in expectation.
        x = np.random.default_rng(2).normal(size=(3, 5))
        for p in small_gen.parameters():
            p.value += 0.1  # nonzero biases so the check is not trivially centred
        eval_out = generator_forward(small_gen, x, training=False).value
        rng = np.random.default_rng(5)
        draws = 10_000
        total = np.zeros_like(eval_out)
        for _ in range(draws):
            total += generator_forward(small_gen, x, training=True, rng=rng).value
        mean = total / draws
        assert np.linalg.norm(mean - eval_out) / np.linalg.norm(eval_out) < 0.02

    def test_training_dropout_needs_rng(self, small_gen):
        with pytest.raises(ContractError):
            generator_forward(small_gen, np.zeros((2, 5)), training=True)


class TestClassifier:
    def test_zero_weights_give_uniform_rows(self):
        c = NeuralClassifier(np.random.default_rng(0), d_embed=4, num_classes=5)
        for p in c.parameters():
            p.value[:] = 0
        out = classifier_forward(c, np.random.default_rng(1).normal(size=(3, 4))).value
        np.testing.assert_allclose(out, 0.2, rtol=0, atol=1e-15)

    def test_rows_sum_to_one(self):
        c = NeuralClassifier(np.random.default_rng(0), d_embed=4, num_classes=7)
        out = classifier_forward(c, np.random.default_rng(1).normal(size=(9, 4))).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_identical_inputs_identical_rows(self):
        c = NeuralClassifier(np.random.default_rng(0), d_embed=4, num_classes=3)
        row = np.random.default_rng(1).normal(size=(1, 4))
        out = classifier_forward(c, np.repeat(row, 4, axis=0)).value
        assert np.all(out == out[0])

    def test_dimension_error(self):
        c = NeuralClassifier(np.random.default_rng(0), d_embed=4, num_classes=3)
        with pytest.raises(DimensionError):
            classifier_forward(c, np.zeros((2, 5)))


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        w = Node(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
        st = AdamState.for_params([w], lr=0.01)
        g = np.array([[3.0, -0.2, 1e-3]])
        before = w.value.copy()
        adam_step(st, [w], [g])
        np.testing.assert_allclose(w.value - before, -0.01 * np.sign(g), rtol=1e-4)

    def test_zero_gradient_leaves_params(self):
        w = Node(np.array([[1.0, 2.0]]), requires_grad=True)
        st = AdamState.for_params([w])
        for _ in range(10):
            adam_step(st, [w], [np.zeros((1, 2))])
        np.testing.assert_array_equal(w.value, [[1.0, 2.0]])

    def test_scalar_quadratic_converges(self):
        # run-the-oracle: 200 Adam steps on (w - 3)^2 from 0 at lr 0.1
        w = Node(np.array([[0.0]]), requires_grad=True)
        st = AdamState.for_params([w], lr=0.1)
        for _ in range(200):
            zero_grads([w])
            d = ad.sub(w, ad.constant([[3.0]]))
            ad.mul(d, d).backward()
            adam_step(st, [w])
        assert abs(w.value[0, 0] - 3.0) < 0.1
        assert st.t == 200

    def test_missing_grad_for_active_param(self):
        w = Node(np.ones((1, 1)), requires_grad=True)
        with pytest.raises(ContractError):
            adam_step(AdamState.for_params([w]), [w], [None])

    def test_moments_start_at_zero(self):
        w = Node(np.ones((2, 3)), requires_grad=True)
        st = AdamState.for_params([w])
        assert st.t == 0 and not st.m[0].any() and not st.v[0].any()


class TestFreeze:
    def test_zero_grads(self, small_gen):
        x = np.ones((2, 5))
        ad.sum_all(generator_forward(small_gen, x)).backward()
        zero_grads(small_gen.parameters())
        assert all(not p.grad.any() for p in small_gen.parameters())

    def test_frozen_params_unchanged_by_adam(self, small_gen):
        params = small_gen.parameters()
        st = AdamState.for_params(params)
        ad.sum_all(generator_forward(small_gen, np.ones((2, 5)))).backward()
        freeze(params)
        before = [p.value.copy() for p in params]
        adam_step(st, params)
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p.value, b)

    def test_frozen_params_get_no_gradient_and_unfreeze_restores_it(self, small_gen):
        params = small_gen.parameters()
        freeze(params)
        out = ad.sum_all(generator_forward(small_gen, np.ones((2, 5))))
        assert not out.requires_grad
        out.backward()
        assert all(not p.grad.any() for p in params)
        freeze(params, False)
        ad.sum_all(generator_forward(small_gen, np.ones((2, 5)))).backward()
        assert any(p.grad.any() for p in params)
