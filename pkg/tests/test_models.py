import numpy as np
import pytest

from ifgan import tensor as T
from ifgan.models import (ClassifierDesc, DiscriminatorDesc, GeneratorDesc, ModelBundle, desc_from_dict,
                          desc_to_dict)
from ifgan.tensor import Tensor, gradcheck



def test_generator_parameter_count():
    # U-Net over 2 input channels, widths 16/32/64/128, 4x4 kernels
    enc = (16 * 2 * 16 + 16) + (32 * 16 * 16 + 2 * 32) + (64 * 32 * 16 + 2 * 64) + (128 * 64 * 16 + 128)
    dec = (128 * 64 * 16 + 2 * 64) + (128 * 32 * 16 + 2 * 32) + (64 * 16 * 16 + 2 * 16) + (32 * 1 * 16 + 1)
    assert GeneratorDesc().param_count() == enc + dec == 386609


def test_discriminator_parameter_count():
    convs = (16 * 3 * 16 + 16) + (32 * 16 * 16 + 64) + (64 * 32 * 16 + 128) + (128 * 64 * 16 + 256)
    assert DiscriminatorDesc().param_count() == convs + 128 * 16 + 1 == 175313


def test_classifier_parameter_count():
    def block(cin, cout):
        n = cout * cin * 9 + 2 * cout + cout * cout * 9 + 2 * cout
        if cin != cout:
            n += cout * cin + 2 * cout
        return n

    stem = 16 * 2 * 9 + 32
    body = sum(block(a, b) + block(b, b) for a, b in [(16, 16), (16, 32), (32, 64), (64, 128)])
    assert ClassifierDesc().param_count() == stem + body + 128 * 6 + 6 == 700806


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle.create(GeneratorDesc(), DiscriminatorDesc(), ClassifierDesc(), seed=0)


def test_generator_shape_and_range(bundle, rng):
    x = Tensor(np.tanh(rng.standard_normal((2, 1, 64, 64))))
    out = bundle.generate(x, x)
    assert out.shape == (2, 1, 64, 64)
    assert np.all(np.abs(out.data) < 1)


def test_generator_zero_output_layer_gives_zeros(rng):
    m = ModelBundle.create(GeneratorDesc(zero_output=True), DiscriminatorDesc(), ClassifierDesc(), seed=0)
    x = Tensor(rng.standard_normal((1, 1, 64, 64)))
    np.testing.assert_array_equal(m.generate(x, x).data, 0.0)


def test_generator_rejects_indivisible_extent(bundle):
    x = Tensor(np.zeros((1, 1, 60, 60)))
    with pytest.raises(ValueError, match="divisible"):
        bundle.generate(x, x)


def test_discriminator_patch_map_and_batch_equivariance(bundle, rng):
    desc = DiscriminatorDesc()
    assert desc.output_extent(64) == 6
    a, s, x = (Tensor(rng.standard_normal((3, 1, 64, 64))) for _ in range(3))
    out = bundle.discriminate(a, s, x)
    assert out.shape == (3, 1, 6, 6)
    perm = [2, 0, 1]
    permuted = bundle.discriminate(*(Tensor(t.data[perm]) for t in (a, s, x)))
    np.testing.assert_allclose(permuted.data, out.data[perm], rtol=1e-12, atol=1e-12)


def test_classifier_shape_and_uniform_head(bundle, rng):
    x = Tensor(rng.standard_normal((4, 1, 64, 64)))
    logits = bundle.classify(x, x, training=False)
    assert logits.shape == (4, 6)
    z = logits.data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(p, 1 / 6)


def test_same_seed_same_parameters():
    a = ModelBundle.create(GeneratorDesc(), DiscriminatorDesc(), ClassifierDesc(), seed=5)
    b = ModelBundle.create(GeneratorDesc(), DiscriminatorDesc(), ClassifierDesc(), seed=5)
    for sa, sb in ((a.g, b.g), (a.d, b.d), (a.e, b.e)):
        for name in sa:
            np.testing.assert_array_equal(sa[name].data, sb[name].data)


@pytest.mark.parametrize("desc", [GeneratorDesc(), DiscriminatorDesc(stages=2), ClassifierDesc(pair_input=False)])
def test_descriptor_dict_round_trip(desc):
    assert desc_from_dict(desc_to_dict(desc)) == desc


MICRO = dict(g=GeneratorDesc(base_width=4, depth=2), d=DiscriminatorDesc(base_width=4, stages=1),
             e=ClassifierDesc(base_width=4, stages=2, blocks=1, zero_head=False))


def micro_inputs(seed):
    r = np.random.default_rng(seed)
    return [Tensor(np.tanh(r.standard_normal((2, 1, 8, 8)))) for _ in range(3)]


def test_generator_gradients_micro():
    m = ModelBundle.create(MICRO["g"], MICRO["d"], MICRO["e"], seed=1)
    a, s, _ = micro_inputs(0)
    rep = gradcheck(lambda: T.mean(m.generate(a, s)), m.g.tensors(), h=1e-6, names=m.g.names())
    assert rep.passed, rep.lines()


def test_discriminator_gradients_micro():
    m = ModelBundle.create(MICRO["g"], MICRO["d"], MICRO["e"], seed=1)
    a, s, x = micro_inputs(1)
    rep = gradcheck(lambda: T.mean(m.discriminate(a, s, x)), m.d.tensors(), h=1e-6, names=m.d.names())
    assert rep.passed, rep.lines()


def test_classifier_gradients_micro():
    m = ModelBundle.create(MICRO["g"], MICRO["d"], MICRO["e"], seed=1)
    _, s, x = micro_inputs(2)
    r = np.random.default_rng(0).standard_normal((2, 6))
    f = lambda: T.sum(T.mul(m.classify(s, x, training=True, update_stats=False), Tensor(r)))
    rep = gradcheck(f, m.e.tensors(), h=1e-6, names=m.e.names())
    assert rep.passed, rep.lines()
