"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor


class NondeterministicFunction(RuntimeError):
    pass


@dataclass
class InputReport:
    name: str
    checked: int
    total: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray


@dataclass
class GradcheckReport:
    tol: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def lines(self) -> list[str]:
        out = []
        for r in self.inputs:
            out.append(f"{r.name:<32} checked {r.checked:>5}/{r.total:<6} max_rel_err {r.max_rel_error:.3e}")
        return out


def rel_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); ``floor`` keeps near-zero gradients from dominating."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = 64,
    floor: float = 1e-6,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads the (mutated in place) ``inputs``.
    Inputs larger than ``max_elements`` are checked on a seeded random
    subset of entries.  Gradients below the resolvable difference-quotient
    noise (about eps*|f|/h) are compared against that noise floor rather
    than their own magnitude.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 inputs, got {t.dtype}")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("gradcheck inputs must be finite")

    first = float(f().data)
    second = float(f().data)
    if first != second:
        raise NondeterministicFunction(f"f() returned {first!r} then {second!r}")
    noise = np.finfo(np.float64).eps * max(abs(first), 1.0) / h
    floor = max(floor, noise / tol)

    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t, (rg, g) in zip(inputs, saved):
        t.requires_grad, t.grad = rg, g

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for i, (t, a) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idx = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idx = np.arange(n)
        num = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            num[j] = (fp - fm) / (2 * h)
        ana = a.reshape(-1)[idx]
        err = rel_error(ana, num, floor)
        worst = int(np.argmax(err)) if len(err) else None
        report.inputs.append(InputReport(
            name=names[i] if names else (t.name or f"input{i}"),
            checked=len(idx),
            total=n,
            max_rel_error=float(err.max()) if len(err) else 0.0,
            worst_index=None if worst is None else tuple(int(v) for v in np.unravel_index(idx[worst], t.shape)),
            analytic=ana,
            numeric=num,
        ))
    return report
