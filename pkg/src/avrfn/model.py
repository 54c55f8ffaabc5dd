"""Residual-in-residual super-resolution networks and their ablation variants.

Topology (all variants)::

    x -> head 3x3 (1->F) -> [group -> ... -> group] -> 3x3 -> + head  (long skip)
      -> upsampler (conv + pixel shuffle) -> 3x3 (F->1)

    group(x) = x + 3x3(block(...block(x)))

The block is where the variants differ:

``AVRFN``
    parallel 3x3 convs at each dilation rate, channel concat, a linear 3x3
    fuse conv back to F channels, second-order channel attention, skip.
``DDRR``
    the same dilated branches; the attention stage is replaced by a plain
    linear 3x3 conv, which is the fuse conv itself.
``RRSOCA``
    3x3+ReLU, 3x3+ReLU, channel attention, skip.
``CRCAN``
    as RRSOCA with the second conv dilated by 2.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import numpy as np

from .layers import Conv2d, InitSpec, init_conv, pixel_shuffle
from .soca import NS_ITERATIONS, GateParams, gate_hidden, soca_apply
from .tensor import Tensor, concat_channels, relu

VARIANTS = ("AVRFN", "DDRR", "RRSOCA", "CRCAN")
SCALES = (2, 3, 4)


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "AVRFN"
    groups: int = 3
    blocks: int = 6
    filters: int = 64
    scale: int = 4
    dilation_rates: Tuple[int, ...] = (1, 2, 3)
    reduction: int = 16
    ns_iterations: int = NS_ITERATIONS
    init: str = "he_uniform"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.upper())
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.scale not in SCALES:
            raise ValueError(f"unsupported scale {self.scale}; expected one of {SCALES}")
        for name in ("groups", "blocks", "filters", "reduction", "ns_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.variant in ("AVRFN", "DDRR"):
            rates = self.dilation_rates
            if len(set(rates)) != len(rates) or min(rates) < 1:
                raise ValueError(f"dilation rates must be distinct and >= 1, got {rates}")
            if sum(d > 1 for d in rates) < 2:
                raise ValueError("at least two branches need a dilation rate above 1")

    @property
    def block_dilations(self) -> Tuple[int, ...]:
        if self.variant == "RRSOCA":
            return (1, 1)
        if self.variant == "CRCAN":
            return (1, 2)
        return self.dilation_rates

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class SRModel:
    """A built network: a ModelSpec plus named, ordered conv layers."""

    def __init__(self, spec: ModelSpec, convs: "OrderedDict[str, Conv2d]"):
        self.spec = spec
        self.convs = convs

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, conv in self.convs.items():
            out[f"{name}.kernel"] = conv.kernel
            if conv.bias is not None:
                out[f"{name}.bias"] = conv.bias
        return out

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.params
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def gate(self, prefix: str) -> GateParams:
        return GateParams(self.convs[f"{prefix}.soca.w0"], self.convs[f"{prefix}.soca.w1"])

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


class _Builder:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.convs: "OrderedDict[str, Conv2d]" = OrderedDict()

    def add(self, name: str, k: int, cin: int, cout: int, dilation: int = 1) -> None:
        if name in self.convs:
            raise KeyError(f"duplicate layer name {name}")
        # each layer gets its own stream, keyed by its position
        seed = int(np.random.SeedSequence([self.spec.seed, len(self.convs)]).generate_state(1)[0])
        self.convs[name] = init_conv(InitSpec(self.spec.init, seed), (k, k, cin, cout), dilation)


def build_model(spec: ModelSpec) -> SRModel:
    spec.validate()
    F = spec.filters
    b = _Builder(spec)
    b.add("head", 3, 1, F)
    for gi in range(spec.groups):
        for bi in range(spec.blocks):
            p = f"body.g{gi}.b{bi}"
            if spec.variant in ("AVRFN", "DDRR"):
                for k, rate in enumerate(spec.dilation_rates):
                    b.add(f"{p}.branch{k}", 3, F, F, rate)
                b.add(f"{p}.fuse", 3, F * len(spec.dilation_rates), F)
            else:
                d0, d1 = spec.block_dilations
                b.add(f"{p}.conv0", 3, F, F, d0)
                b.add(f"{p}.conv1", 3, F, F, d1)
            if spec.variant != "DDRR":
                hidden = gate_hidden(F, spec.reduction)
                b.add(f"{p}.soca.w0", 1, F, hidden)
                b.add(f"{p}.soca.w1", 1, hidden, F)
        b.add(f"body.g{gi}.tail", 3, F, F)
    b.add("body.tail", 3, F, F)
    for k, (cout, _) in enumerate(upsampler_stages(spec.scale, F)):
        b.add(f"up.{k}", 3, F, cout)
    b.add("tail", 3, F, 1)
    return SRModel(spec, b.convs)


def upsampler_stages(scale: int, filters: int):
    """``(conv out channels, shuffle factor)`` per stage; x4 is two x2 stages."""
    if scale in (2, 3):
        return [(filters * scale * scale, scale)]
    if scale == 4:
        return [(filters * 4, 2), (filters * 4, 2)]
    raise ValueError(f"unsupported scale {scale}")


def residual_block(x: Tensor, model: SRModel, prefix: str) -> Tensor:
    spec = model.spec
    if x.shape[-1] != spec.filters:
        raise ValueError(f"block expects {spec.filters} channels, got {x.shape[-1]}")
    convs = model.convs
    if spec.variant in ("AVRFN", "DDRR"):
        branches = [convs[f"{prefix}.branch{k}"](x) for k in range(len(spec.dilation_rates))]
        h = convs[f"{prefix}.fuse"](concat_channels(branches))
    else:
        h = relu(convs[f"{prefix}.conv0"](x))
        h = relu(convs[f"{prefix}.conv1"](h))
    if spec.variant != "DDRR":
        h = soca_apply(h, model.gate(prefix), spec.ns_iterations)
    return x + h


def residual_group(x: Tensor, model: SRModel, gi: int) -> Tensor:
    h = x
    for bi in range(model.spec.blocks):
        h = residual_block(h, model, f"body.g{gi}.b{bi}")
    return x + model.convs[f"body.g{gi}.tail"](h)


def rir_forward(x: Tensor, model: SRModel, long_skip: bool = True) -> Tensor:
    h = x
    for gi in range(model.spec.groups):
        h = residual_group(h, model, gi)
    h = model.convs["body.tail"](h)
    return x + h if long_skip else h


def upsampler(x: Tensor, model: SRModel) -> Tensor:
    for k, (_, r) in enumerate(upsampler_stages(model.spec.scale, model.spec.filters)):
        x = pixel_shuffle(model.convs[f"up.{k}"](x), r)
    return x


def forward(model: SRModel, x: Tensor) -> Tensor:
    """Map ``(n, h, w, 1)`` LR images to ``(n, h*r, w*r, 1)``."""
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ValueError(f"expected (n, h, w, 1) input, got {x.shape}")
    shallow = model.convs["head"](x)
    return model.convs["tail"](upsampler(rir_forward(shallow, model), model))
