"""Parameter registry, initialization and the Adam optimizer."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tensor import RunningStats, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ParamSpec:
    """One trainable tensor of a layer.

    ``kind`` selects the initializer: ``weight`` ~ N(0, 0.02), ``gamma`` ~
    N(1, 0.02), ``bias``/``beta``/``zero`` are zeros.
    """

    name: str
    shape: tuple[int, ...]
    kind: str = "weight"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def count(self) -> int:
        return sum(t.size for t in self._entries.values())

    def merge(self, other: "ParamStore") -> "ParamStore":
        return ParamStore(list(self.items()) + list(other.items()))

    def checksum(self) -> float:
        return float(sum(np.abs(t.data).sum() + t.data.sum() for t in self._entries.values()))


def init_params(specs: Iterable[ParamSpec], seed: int, dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in specs:
        if not spec.shape or any(n <= 0 for n in spec.shape):
            raise ValueError(f"parameter {spec.name!r} has empty shape {spec.shape}")
        if spec.kind == "weight":
            data = rng.normal(0.0, INIT_STD, size=spec.shape)
        elif spec.kind == "gamma":
            data = rng.normal(1.0, INIT_STD, size=spec.shape)
        elif spec.kind in ("bias", "beta", "zero"):
            data = np.zeros(spec.shape)
        else:
            raise ValueError(f"unknown initializer kind {spec.kind!r} for {spec.name!r}")
        store.add(spec.name, Tensor(data.astype(dtype)))
    return store


def zero_grads(params: ParamStore | Iterable[Tensor]) -> None:
    tensors = params.tensors() if isinstance(params, ParamStore) else params
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        else:
            t.grad.fill(0.0)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises FloatingPointError naming the first parameter whose gradient is
    not finite; nothing is modified in that case.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a ParamStore, reading gradients from ``tensor.grad``."""

    def __init__(self, params: ParamStore, lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        adam_step(self.params, {n: t.grad for n, t in self.params.items()}, self.state)


class Buffers(OrderedDict):
    """Named non-trainable running statistics (batch-norm layers)."""

    def add(self, name: str, channels: int, dtype=np.float64) -> RunningStats:
        if name in self:
            raise KeyError(f"duplicate buffer name {name!r}")
        self[name] = RunningStats(channels, dtype=dtype)
        return self[name]
