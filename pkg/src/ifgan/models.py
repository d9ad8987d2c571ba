"""The three networks: U-Net generator, patch discriminator, residual classifier.

Every network is a descriptor (pure architecture data, serializable) plus a
forward function reading tensors out of a ParamStore by hierarchical name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .nn import Buffers, ParamSpec, ParamStore, init_params
from .tensor import Tensor

Params = Mapping[str, Tensor] | ParamStore

LEAK = 0.2


@dataclass(frozen=True)
class GeneratorDesc:
    """U-Net over the channel-concatenated pair (average neutral, subject)."""

    channels: int = 1
    base_width: int = 16
    depth: int = 4
    max_mult: int = 8
    zero_output: bool = False

    @property
    def in_channels(self) -> int:
        return 2 * self.channels

    def widths(self) -> list[int]:
        F = self.base_width
        return [min(F * 2 ** k, F * self.max_mult) for k in range(self.depth)]

    def param_specs(self, prefix: str = "G") -> list[ParamSpec]:
        L, w = self.depth, self.widths()
        specs = []
        cin = self.in_channels
        for k in range(1, L + 1):
            p = f"{prefix}.enc{k}"
            specs.append(ParamSpec(f"{p}.weight", (w[k - 1], cin, 4, 4)))
            if k == 1 or k == L:
                specs.append(ParamSpec(f"{p}.bias", (w[k - 1],), "bias"))
            else:
                specs += [ParamSpec(f"{p}.gamma", (w[k - 1],), "gamma"),
                          ParamSpec(f"{p}.beta", (w[k - 1],), "beta")]
            cin = w[k - 1]
        for k in range(1, L + 1):
            p = f"{prefix}.dec{k}"
            cin = w[L - 1] if k == 1 else 2 * w[L - k]
            if k < L:
                cout = w[L - k - 1]
                specs.append(ParamSpec(f"{p}.weight", (cin, cout, 4, 4)))
                specs += [ParamSpec(f"{p}.gamma", (cout,), "gamma"),
                          ParamSpec(f"{p}.beta", (cout,), "beta")]
            else:
                kind = "zero" if self.zero_output else "weight"
                specs.append(ParamSpec(f"{p}.weight", (cin, self.channels, 4, 4), kind))
                specs.append(ParamSpec(f"{p}.bias", (self.channels,), "bias"))
        return specs

    def param_count(self) -> int:
        return sum(s.size for s in self.param_specs())


@dataclass(frozen=True)
class DiscriminatorDesc:
    """Patch critic over the channel-concatenated triple (I_AN, I_SE, X)."""

    channels: int = 1
    base_width: int = 16
    stages: int = 3
    max_mult: int = 8

    @property
    def in_channels(self) -> int:
        return 3 * self.channels

    def widths(self) -> list[int]:
        F = self.base_width
        return [min(F * 2 ** k, F * self.max_mult) for k in range(self.stages + 1)]

    def param_specs(self, prefix: str = "D") -> list[ParamSpec]:
        w = self.widths()
        specs = []
        cin = self.in_channels
        for k in range(1, self.stages + 2):
            p = f"{prefix}.conv{k}"
            specs.append(ParamSpec(f"{p}.weight", (w[k - 1], cin, 4, 4)))
            if k == 1:
                specs.append(ParamSpec(f"{p}.bias", (w[0],), "bias"))
            else:
                specs += [ParamSpec(f"{p}.gamma", (w[k - 1],), "gamma"),
                          ParamSpec(f"{p}.beta", (w[k - 1],), "beta")]
            cin = w[k - 1]
        specs += [ParamSpec(f"{prefix}.out.weight", (1, cin, 4, 4)),
                  ParamSpec(f"{prefix}.out.bias", (1,), "bias")]
        return specs

    def param_count(self) -> int:
        return sum(s.size for s in self.param_specs())

    def output_extent(self, side: int) -> int:
        n = side
        for _ in range(self.stages):
            n = (n + 2 - 4) // 2 + 1
        for _ in range(2):
            n = n + 2 - 4 + 1
        return n


@dataclass(frozen=True)
class ClassifierDesc:
    """Residual classifier over the channel-concatenated pair (subject, X_AE)."""

    channels: int = 1
    num_classes: int = 6
    base_width: int = 16
    stages: int = 4
    blocks: int = 2
    zero_head: bool = True
    pair_input: bool = True

    @property
    def in_channels(self) -> int:
        return 2 * self.channels if self.pair_input else self.channels

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** s for s in range(self.stages)]

    def blocks_iter(self):
        """Yield (name, cin, cout, stride) for every residual block."""
        w = self.widths()
        cin = w[0]
        for s in range(self.stages):
            for b in range(self.blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                yield f"s{s + 1}b{b + 1}", cin, w[s], stride
                cin = w[s]

    def param_specs(self, prefix: str = "E") -> list[ParamSpec]:
        w0 = self.widths()[0]
        specs = [ParamSpec(f"{prefix}.stem.weight", (w0, self.in_channels, 3, 3)),
                 ParamSpec(f"{prefix}.stem.gamma", (w0,), "gamma"),
                 ParamSpec(f"{prefix}.stem.beta", (w0,), "beta")]
        for name, cin, cout, stride in self.blocks_iter():
            p = f"{prefix}.{name}"
            specs += [ParamSpec(f"{p}.conv1.weight", (cout, cin, 3, 3)),
                      ParamSpec(f"{p}.conv1.gamma", (cout,), "gamma"),
                      ParamSpec(f"{p}.conv1.beta", (cout,), "beta"),
                      ParamSpec(f"{p}.conv2.weight", (cout, cout, 3, 3)),
                      ParamSpec(f"{p}.conv2.gamma", (cout,), "gamma"),
                      ParamSpec(f"{p}.conv2.beta", (cout,), "beta")]
            if stride != 1 or cin != cout:
                specs += [ParamSpec(f"{p}.short.weight", (cout, cin, 1, 1)),
                          ParamSpec(f"{p}.short.gamma", (cout,), "gamma"),
                          ParamSpec(f"{p}.short.beta", (cout,), "beta")]
        wl = self.widths()[-1]
        specs += [ParamSpec(f"{prefix}.head.weight", (wl, self.num_classes), "zero" if self.zero_head else "weight"),
                  ParamSpec(f"{prefix}.head.bias", (self.num_classes,), "bias")]
        return specs

    def norm_layers(self, prefix: str = "E") -> list[tuple[str, int]]:
        return [(s.name[: -len(".gamma")], s.shape[0]) for s in self.param_specs(prefix) if s.kind == "gamma"]

    def param_count(self) -> int:
        return sum(s.size for s in self.param_specs())


def desc_to_dict(desc) -> dict:
    return {"type": type(desc).__name__, **asdict(desc)}


def desc_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    cls = {c.__name__: c for c in (GeneratorDesc, DiscriminatorDesc, ClassifierDesc)}[kind]
    return cls(**d)


def init_buffers(desc: ClassifierDesc, prefix: str = "E", dtype=np.float64) -> Buffers:
    buf = Buffers()
    for name, ch in desc.norm_layers(prefix):
        buf.add(name, ch, dtype=dtype)
    return buf


# -- forwards ----------------------------------------------------------------


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: input shapes differ, {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ValueError(f"{what}: expected [B,C,H,W] images, got {a.shape}")


def generator_forward(desc: GeneratorDesc, params: Params, i_an: Tensor, i_se: Tensor,
                      prefix: str = "G") -> Tensor:
    _check_pair(i_an, i_se, "generator")
    if i_an.shape[1] != desc.channels:
        raise ValueError(f"generator expects {desc.channels} channels per image, got {i_an.shape[1]}")
    div = 2 ** desc.depth
    H, W = i_an.shape[2:]
    if H % div or W % div:
        raise ValueError(f"generator input {H}x{W} must be divisible by 2**depth = {div}")
    L = desc.depth
    h = T.concat([i_an, i_se], axis=1)
    skips = []
    for k in range(1, L + 1):
        p = f"{prefix}.enc{k}"
        if k == 1 or k == L:
            h = T.conv2d(h, params[f"{p}.weight"], params[f"{p}.bias"], stride=2, pad=1)
        else:
            h = T.conv2d(h, params[f"{p}.weight"], stride=2, pad=1)
            h = T.norm2d(h, params[f"{p}.gamma"], params[f"{p}.beta"], mode="instance")
        h = T.leaky_relu(h, LEAK)
        skips.append(h)
    for k in range(1, L + 1):
        p = f"{prefix}.dec{k}"
        if k > 1:
            h = T.concat([h, skips[L - k]], axis=1)
        if k < L:
            h = T.conv_transpose2d(h, params[f"{p}.weight"], stride=2, pad=1)
            h = T.norm2d(h, params[f"{p}.gamma"], params[f"{p}.beta"], mode="instance")
            h = T.relu(h)
        else:
            h = T.conv_transpose2d(h, params[f"{p}.weight"], params[f"{p}.bias"], stride=2, pad=1)
            h = T.tanh(h)
    return h


def discriminator_forward(desc: DiscriminatorDesc, params: Params, i_an: Tensor, i_se: Tensor,
                          x: Tensor, prefix: str = "D") -> Tensor:
    _check_pair(i_an, i_se, "discriminator")
    _check_pair(i_an, x, "discriminator")
    h = T.concat([i_an, i_se, x], axis=1)
    for k in range(1, desc.stages + 2):
        p = f"{prefix}.conv{k}"
        stride = 2 if k <= desc.stages else 1
        if k == 1:
            h = T.conv2d(h, params[f"{p}.weight"], params[f"{p}.bias"], stride=stride, pad=1)
        else:
            h = T.conv2d(h, params[f"{p}.weight"], stride=stride, pad=1)
            h = T.norm2d(h, params[f"{p}.gamma"], params[f"{p}.beta"], mode="instance")
        h = T.leaky_relu(h, LEAK)
    return T.conv2d(h, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"], stride=1, pad=1)


def _bn(h: Tensor, params: Params, buffers: Buffers | None, name: str, training: bool,
        update_stats: bool) -> Tensor:
    running = buffers.get(name) if buffers is not None else None
    if training:
        return T.norm2d(h, params[f"{name}.gamma"], params[f"{name}.beta"], mode="batch",
                        training=True, running=running if update_stats else None)
    return T.norm2d(h, params[f"{name}.gamma"], params[f"{name}.beta"], mode="batch",
                    training=False, running=running)


def classifier_features(desc: ClassifierDesc, params: Params, x: Tensor, buffers: Buffers | None = None,
                        training: bool = True, update_stats: bool = True, prefix: str = "E") -> Tensor:
    bn = lambda h, name: _bn(h, params, buffers, name, training, update_stats)
    h = T.conv2d(x, params[f"{prefix}.stem.weight"], stride=2, pad=1)
    h = T.relu(bn(h, f"{prefix}.stem"))
    for name, cin, cout, stride in desc.blocks_iter():
        p = f"{prefix}.{name}"
        y = T.conv2d(h, params[f"{p}.conv1.weight"], stride=stride, pad=1)
        y = T.relu(bn(y, f"{p}.conv1"))
        y = T.conv2d(y, params[f"{p}.conv2.weight"], stride=1, pad=1)
        y = bn(y, f"{p}.conv2")
        if f"{p}.short.weight" in params:
            s = T.conv2d(h, params[f"{p}.short.weight"], stride=stride, pad=0)
            s = bn(s, f"{p}.short")
        else:
            s = h
        h = T.relu(T.add(y, s))
    return T.mean(h, axes=(2, 3))


def classifier_forward(desc: ClassifierDesc, params: Params, i_se: Tensor, x_ae: Tensor,
                       buffers: Buffers | None = None, training: bool = True,
                       update_stats: bool = True, prefix: str = "E") -> Tensor:
    """Expression logits [B, K] for the pair (subject image, average-identity image).

    A single-image classifier (the raw baseline) is the same network built
    with ``pair_input=False`` and called with ``x_ae=None``.
    """
    if x_ae is None:
        x = i_se
    else:
        _check_pair(i_se, x_ae, "classifier")
        x = T.concat([i_se, x_ae], axis=1)
    if x.shape[1] != desc.in_channels:
        raise ValueError(f"classifier expects {desc.in_channels} input channels, got {x.shape[1]}")
    feats = classifier_features(desc, params, x, buffers, training, update_stats, prefix)
    return T.bias_add(T.matmul(feats, params[f"{prefix}.head.weight"]), params[f"{prefix}.head.bias"])


@dataclass
class ModelBundle:
    """Descriptors, parameters and buffers of G, D and E."""

    g_desc: GeneratorDesc
    d_desc: DiscriminatorDesc
    e_desc: ClassifierDesc
    g: ParamStore
    d: ParamStore
    e: ParamStore
    e_buffers: Buffers

    @classmethod
    def create(cls, g_desc: GeneratorDesc, d_desc: DiscriminatorDesc, e_desc: ClassifierDesc,
               seed: int, dtype=np.float64) -> "ModelBundle":
        return cls(
            g_desc, d_desc, e_desc,
            init_params(g_desc.param_specs("G"), seed, dtype),
            init_params(d_desc.param_specs("D"), seed + 1, dtype),
            init_params(e_desc.param_specs("E"), seed + 2, dtype),
            init_buffers(e_desc, "E", dtype),
        )

    def generate(self, i_an: Tensor, i_se: Tensor) -> Tensor:
        return generator_forward(self.g_desc, self.g, i_an, i_se)

    def discriminate(self, i_an: Tensor, i_se: Tensor, x: Tensor) -> Tensor:
        return discriminator_forward(self.d_desc, self.d, i_an, i_se, x)

    def classify(self, i_se: Tensor, x_ae: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        return classifier_forward(self.e_desc, self.e, i_se, x_ae, self.e_buffers, training, update_stats)
