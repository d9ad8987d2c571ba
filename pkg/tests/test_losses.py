import math

import numpy as np
import pytest

from ifgan import tensor as T
from ifgan.losses import (ConditionTuple, LossWeights, combined_loss, d_loss, expr_loss, expr_loss_parts,
                          g_adv_loss, l1_loss)
from ifgan.tensor import Tape, Tensor


def zeros(*shape):
    return Tensor(np.zeros(shape))


def test_d_loss_at_zero_logits():
    assert abs(d_loss(zeros(2, 1, 6, 6), zeros(2, 1, 6, 6)).item() - 2 * math.log(2)) <= 1e-9


def test_d_loss_perfect_discriminator_limit():
    v = d_loss(Tensor(np.full((2, 1, 3, 3), 60.0)), Tensor(np.full((2, 1, 3, 3), -60.0))).item()
    assert 0 <= v < 1e-20


def test_d_loss_matches_elementwise_oracle(rng):
    r, f = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
    sig = lambda z: 1 / (1 + np.exp(-z))
    oracle = -np.mean(np.log(sig(r))) - np.mean(np.log(1 - sig(f)))
    assert abs(d_loss(Tensor(r), Tensor(f)).item() - oracle) <= 1e-10


def test_d_loss_rejects_nan():
    with pytest.raises(FloatingPointError):
        d_loss(Tensor(np.full((1, 1, 2, 2), np.nan)), zeros(1, 1, 2, 2))


def test_g_adv_loss_value_limit_and_gradient():
    z = zeros(2, 1, 3, 3)
    assert abs(g_adv_loss(z).item() - math.log(2)) <= 1e-9
    assert g_adv_loss(Tensor(np.full((1, 1, 2, 2), 60.0))).item() < 1e-20
    z.requires_grad = True
    with Tape() as tape:
        loss = g_adv_loss(z)
    tape.backward(loss)
    np.testing.assert_allclose(z.grad, -0.5 / z.size, rtol=1e-12)


def test_l1_loss_oracles(rng):
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    assert l1_loss(x, x).item() == 0.0
    assert l1_loss(Tensor(np.ones((2, 1, 4, 4))), zeros(2, 1, 4, 4)).item() == 1.0
    y = rng.standard_normal((2, 1, 4, 4))
    assert abs(l1_loss(x, Tensor(y)).item() - np.mean(np.abs(x.data - y))) <= 1e-12
    with pytest.raises(ValueError):
        l1_loss(x, zeros(2, 1, 4, 5))


def test_expr_loss_uniform_and_perfect():
    labels = [0, 3, 5]
    assert abs(expr_loss(zeros(3, 6), zeros(3, 6), labels).item() - 2 * math.log(6)) <= 1e-9
    sure = np.full((3, 6), -50.0)
    sure[np.arange(3), labels] = 50.0
    assert expr_loss(Tensor(sure), Tensor(sure), labels).item() < 1e-30
    real, fake = expr_loss_parts(zeros(3, 6), zeros(3, 6), labels)
    assert real.item() == pytest.approx(math.log(6)) and fake.item() == pytest.approx(math.log(6))


def test_default_weights_and_generator_objective():
    w = LossWeights()
    assert (w.adversarial, w.l1, w.expression) == (1.0, 200.0, 50.0)
    ln2 = Tensor(np.array(math.log(2)))
    zero = Tensor(np.array(0.0))
    obj = combined_loss(zero, ln2, zero, zero, zero, w)
    assert obj.generator.item() == pytest.approx(math.log(2), abs=1e-15)


def test_pure_cgan_specialization():
    w = LossWeights(1.0, 0.0, 0.0)
    parts = [Tensor(np.array(v)) for v in (1.3, 0.7, 0.4, 2.0, 3.0)]
    obj = combined_loss(*parts, w)
    assert obj.generator.item() == pytest.approx(0.7)
    assert obj.discriminator.item() == pytest.approx(1.3)
    assert obj.classifier.item() == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(1.0, -1.0, 50.0)


def test_condition_tuple_shape_check():
    with pytest.raises(ValueError):
        ConditionTuple(zeros(1, 1, 4, 4), zeros(1, 1, 4, 4), zeros(1, 1, 8, 8), True)


def test_each_objective_differentiates_to_its_network():
    from ifgan.gradsuite import MICRO_D, MICRO_E, MICRO_G
    from ifgan.models import ModelBundle
    from ifgan.tensor import gradcheck

    m = ModelBundle.create(MICRO_G, MICRO_D, MICRO_E, seed=2)
    r = np.random.default_rng(4)
    i_an, i_se, i_ae = (Tensor(np.tanh(r.standard_normal((2, 1, 8, 8)))) for _ in range(3))
    labels = [2, 5]

    def objectives():
        fake = m.generate(i_an, i_se)
        d = d_loss(m.discriminate(i_an, i_se, i_ae), m.discriminate(i_an, i_se, fake))
        g = g_adv_loss(m.discriminate(i_an, i_se, fake))
        logits = m.classify(T.concat([i_se, i_se], 0), T.concat([i_ae, fake], 0), training=True,
                            update_stats=False)
        er, ef = expr_loss_parts(logits[:2], logits[2:], labels)
        return combined_loss(d, g, l1_loss(fake, i_ae), er, ef)

    for attr, store in (("generator", m.g), ("discriminator", m.d), ("classifier", m.e)):
        rep = gradcheck(lambda: getattr(objectives(), attr), store.tensors(), h=1e-6, max_elements=8,
                        names=store.names())
        assert rep.passed, (attr, rep.lines())
