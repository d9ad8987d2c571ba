"""Finite-difference verification of every primitive and of the joint objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import LossWeights, combined_loss, d_loss, expr_loss_parts, g_adv_loss, l1_loss
from .models import ClassifierDesc, DiscriminatorDesc, GeneratorDesc, ModelBundle
from .tensor import Tensor, gradcheck


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float
    detail: list[str]


def _away_from_zero(rng, shape, margin=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(r)))


def primitive_cases(scale: int = 1, seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, f, inputs) triples; each f reduces one op's output to a scalar."""
    rng = np.random.default_rng([seed, 7])
    s = max(1, int(scale))
    n, c, hw = 2, 3, 4 * s
    cases = []

    def add_case(name, op, *shapes, positive_away=False):
        xs = [Tensor(_away_from_zero(rng, sh) if positive_away else rng.standard_normal(sh)) for sh in shapes]
        probe = op(*xs)
        r = rng.standard_normal(probe.shape)
        cases.append((name, lambda: _weighted_sum(op(*xs), r), xs))

    v = (n, c, hw, hw)
    add_case("add", T.add, v, v)
    add_case("sub", T.sub, v, v)
    add_case("mul", T.mul, v, v)
    add_case("neg", T.neg, v)
    add_case("abs", T.abs, v, positive_away=True)
    add_case("tanh", T.tanh, v)
    add_case("sigmoid", T.sigmoid, v)
    add_case("relu", T.relu, v, positive_away=True)
    add_case("leaky_relu", lambda x: T.leaky_relu(x, 0.2), v, positive_away=True)
    add_case("matmul", T.matmul, (3 * s, 4), (4, 5))
    add_case("bias_add", lambda x, b: T.bias_add(x, b, axis=1), v, (c,))
    add_case("concat", lambda a, b: T.concat([a, b], 1), v, (n, 2, hw, hw))
    add_case("slice", lambda x: T.slice(x, (slice(None), slice(1, 3))), v)
    add_case("reshape", lambda x: T.reshape(x, (n, -1)), v)
    add_case("upsample_nearest", lambda x: T.upsample_nearest(x, 2), v)
    add_case("avgpool", lambda x: T.avgpool(x, 2), v)
    add_case("pad_zero", lambda x: T.pad_zero(x, 1), v)
    add_case("flip_horizontal", T.flip_horizontal, v)
    add_case("sum", lambda x: T.reshape(T.sum(x, (2, 3)), (n * c,)), v)
    add_case("mean", lambda x: T.reshape(T.mean(x, (0, 2, 3)), (c,)), v)
    add_case("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1), v, (4, c, 3, 3), (4,))
    add_case("conv2d_stride2", lambda x, w: T.conv2d(x, w, None, stride=2, pad=1), v, (4, c, 4, 4))
    add_case("conv_transpose2d", lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, pad=1),
             v, (c, 2, 4, 4), (2,))
    add_case("norm2d_batch", lambda x, g, b: T.norm2d(x, g, b, mode="batch"), v, (c,), (c,))
    add_case("norm2d_instance", lambda x, g, b: T.norm2d(x, g, b, mode="instance"), v, (c,), (c,))

    logits = Tensor(rng.standard_normal((n, 1, hw, hw)))
    targets = rng.integers(0, 2, size=logits.shape).astype(np.float64)
    cases.append(("bce_with_logits", lambda: T.bce_with_logits(logits, targets), [logits]))
    scores = Tensor(rng.standard_normal((3 * s, 6)))
    labels = rng.integers(0, 6, size=3 * s)
    cases.append(("cross_entropy", lambda: T.cross_entropy(scores, labels), [scores]))
    return cases


MICRO_G = GeneratorDesc(channels=1, base_width=4, depth=2)
MICRO_D = DiscriminatorDesc(channels=1, base_width=4, stages=1)
MICRO_E = ClassifierDesc(channels=1, num_classes=6, base_width=4, stages=2, blocks=1, zero_head=False)


def joint_objective_case(seed: int = 0, weights: LossWeights = LossWeights()):
    """Weighted joint objective of G, D and E on a 2-sample 8x8 micro-batch.

    The scalar is the sum of the three per-network objectives with the
    generated image kept on the tape, so every parameter of every network
    and every loss term is exercised.
    """
    models = ModelBundle.create(MICRO_G, MICRO_D, MICRO_E, seed, np.float64)
    rng = np.random.default_rng([seed, 9])
    i_an = Tensor(np.tanh(rng.standard_normal((2, 1, 8, 8))))
    i_se = Tensor(np.tanh(rng.standard_normal((2, 1, 8, 8))))
    i_ae = Tensor(np.tanh(rng.standard_normal((2, 1, 8, 8))))
    labels = np.array([1, 4])

    def f():
        fake = models.generate(i_an, i_se)
        d = d_loss(models.discriminate(i_an, i_se, i_ae), models.discriminate(i_an, i_se, fake))
        g_adv = g_adv_loss(models.discriminate(i_an, i_se, fake))
        l1 = l1_loss(fake, i_ae)
        logits = models.classify(T.concat([i_se, i_se], 0), T.concat([i_ae, fake], 0),
                                 training=True, update_stats=False)
        er, ef = expr_loss_parts(logits[:2], logits[2:], labels)
        obj = combined_loss(d, g_adv, l1, er, ef, weights)
        return T.add(T.add(obj.generator, obj.discriminator), obj.classifier)

    names, inputs = [], []
    for store in (models.g, models.d, models.e):
        for name, t in store.items():
            names.append(name)
            inputs.append(t)
    return f, inputs, names


def run_suite(scale: int = 1, tol: float = 1e-4, seed: int = 0, joint_elements: int = 6,
              joint_h: float = 1e-6, log: Callable[[str], None] | None = None) -> list[CaseResult]:
    results = []
    for name, f, xs in primitive_cases(scale, seed):
        t0 = time.perf_counter()
        rep = gradcheck(f, xs, tol=tol, seed=seed)
        results.append(CaseResult(name, rep.max_rel_error, rep.passed, time.perf_counter() - t0, rep.lines()))
        if log:
            log(f"{'PASS' if rep.passed else 'FAIL'} {name:<20} max_rel_err {rep.max_rel_error:.3e}")
    f, xs, names = joint_objective_case(seed)
    t0 = time.perf_counter()
    # ReLUs after small-population batch norm sit close to their kinks; a
    # smaller step keeps central differences on one side of them.
    rep = gradcheck(f, xs, h=joint_h, tol=tol, seed=seed, max_elements=joint_elements, names=names)
    results.append(CaseResult("joint_objective", rep.max_rel_error, rep.passed, time.perf_counter() - t0,
                              rep.lines()))
    if log:
        log(f"{'PASS' if rep.passed else 'FAIL'} {'joint_objective':<20} max_rel_err {rep.max_rel_error:.3e}"
            f" ({len(xs)} parameter tensors)")
    return results
