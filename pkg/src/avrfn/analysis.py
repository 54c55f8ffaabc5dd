"""Parameter counts, receptive fields and effective-receptive-field maps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .layers import receptive_extent
from .model import ModelSpec, SRModel
from .soca import gate_hidden
from .tensor import Tensor


def conv_param_count(k: int, in_ch: int, out_ch: int, bias: bool = True, k_w: Optional[int] = None) -> int:
    k_w = k if k_w is None else k_w
    return k * k_w * in_ch * out_ch + (out_ch if bias else 0)


@dataclass(frozen=True)
class ConvConfig:
    k: int
    dilation: int = 1
    in_ch: int = 3
    out_ch: int = 64
    bias: bool = True

    @property
    def params(self) -> int:
        return conv_param_count(self.k, self.in_ch, self.out_ch, self.bias)

    @property
    def extent(self) -> int:
        return receptive_extent(self.k, self.dilation)

    @property
    def rf_area(self) -> int:
        return self.extent ** 2


def compression_ratio(a: ConvConfig, b: ConvConfig) -> float:
    """Parameter ratio of two convs that see the same receptive field."""
    if a.extent != b.extent:
        raise ValueError(f"receptive extents differ ({a.extent} vs {b.extent}); ratio is only defined at matched extent")
    return a.params / b.params


def stacked_extent(extents: Sequence[int]) -> int:
    """Extent of chained layers: each adds ``extent - 1``."""
    return 1 + sum(e - 1 for e in extents)


def block_extent(spec: ModelSpec) -> int:
    """Theoretical extent of one residual block's non-skip path."""
    if spec.variant in ("AVRFN", "DDRR"):
        widest = max(receptive_extent(3, d) for d in spec.dilation_rates)
        return stacked_extent([widest, 3])
    return stacked_extent([receptive_extent(3, d) for d in spec.block_dilations])


def closed_form_count(spec: ModelSpec) -> int:
    """Total trainable parameters of ``build_model(spec)``, from the architecture arithmetic."""
    F = spec.filters
    conv3 = 9 * F * F + F
    if spec.variant in ("AVRFN", "DDRR"):
        nb = len(spec.dilation_rates)
        block = nb * conv3 + (9 * nb * F * F + F)
    else:
        block = 2 * conv3
    if spec.variant != "DDRR":
        h = gate_hidden(F, spec.reduction)
        block += (F * h + h) + (h * F + F)
    if spec.scale == 4:
        up = 2 * (9 * F * 4 * F + 4 * F)
    else:
        r2 = spec.scale ** 2
        up = 9 * F * F * r2 + F * r2
    head = 9 * F + F
    tail = 9 * F + 1
    return head + spec.groups * (spec.blocks * block + conv3) + conv3 + up + tail


@dataclass
class LayerRow:
    name: str
    kernel: int
    in_ch: int
    out_ch: int
    dilation: int
    params: int
    extent: int


def param_table(model: SRModel) -> List[LayerRow]:
    rows = []
    for name, conv in model.convs.items():
        kh, _, cin, cout = conv.kernel.shape
        rows.append(LayerRow(name, kh, cin, cout, conv.dilation, conv.parameter_count, conv.extent))
    return rows


def count_params(target: Union[ModelSpec, SRModel]) -> int:
    if isinstance(target, ModelSpec):
        return closed_form_count(target)
    return target.num_parameters()


def gate_param_total(spec: ModelSpec) -> int:
    """Parameters in all attention gates of ``spec`` (zero for DDRR)."""
    if spec.variant == "DDRR":
        return 0
    F, h = spec.filters, gate_hidden(spec.filters, spec.reduction)
    return spec.groups * spec.blocks * (F * h + h + h * F + F)


def format_table(rows: Sequence[LayerRow]) -> str:
    header = f"{'layer':<28}{'k':>3}{'in':>6}{'out':>6}{'dil':>5}{'params':>10}{'rf':>5}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.name:<28}{r.kernel:>3}{r.in_ch:>6}{r.out_ch:>6}{r.dilation:>5}{r.params:>10}{r.extent:>5}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<28}{'':>25}{sum(r.params for r in rows):>10}")
    return "\n".join(lines)


def table_csv(rows: Sequence[LayerRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kernel", "in_ch", "out_ch", "dilation", "params", "rf_extent"])
    for r in rows:
        w.writerow([r.name, r.kernel, r.in_ch, r.out_ch, r.dilation, r.params, r.extent])
    return buf.getvalue()


@dataclass
class ErfReport:
    theoretical_rf: Optional[int]
    erf_map: np.ndarray
    erf_area: int
    support_area: int
    tau: float

    @property
    def support(self) -> np.ndarray:
        return self.erf_map > 0


def erf_map(fn: Callable[[Tensor], Tensor], input_shape, output_unit, tau: float = 0.01,
            theoretical_rf: Optional[int] = None, seed: int = 0,
            x: Optional[np.ndarray] = None) -> ErfReport:
    """Input-gradient magnitude of one output unit.

    ``output_unit`` is ``(y, x)`` or ``(y, x, c)`` in the first sample of the
    output.  The map sums ``|d out / d in|`` over input channels.  The ERF area
    counts pixels above ``tau`` times the peak; the support area counts every
    pixel with a nonzero gradient.
    """
    if x is None:
        x = np.random.default_rng(seed).standard_normal(tuple(input_shape))
    inp = Tensor(x, requires_grad=True)
    out = fn(inp)
    unit = tuple(output_unit)
    if len(unit) == 2:
        unit = unit + (0,)
    y, xx, c = unit
    _, oh, ow, oc = out.shape
    if not (0 <= y < oh and 0 <= xx < ow and 0 <= c < oc):
        raise IndexError(f"output unit {unit} outside output of shape {out.shape}")
    seed_grad = np.zeros(out.shape)
    seed_grad[0, y, xx, c] = 1.0
    out.backward(seed_grad)
    mag = np.abs(inp.grad[0]).sum(axis=-1)
    peak = mag.max()
    area = int((mag > tau * peak).sum()) if peak > 0 else 0
    return ErfReport(theoretical_rf, mag, area, int((mag > 0).sum()), tau)
