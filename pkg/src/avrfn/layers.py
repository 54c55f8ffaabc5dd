"""Convolution, activations and pixel shuffle on NHWC tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, relu, sigmoid  # noqa: F401  (re-exported)

PADDING_MODES = ("same", "valid")


def receptive_extent(kernel_size: int, dilation: int = 1) -> int:
    """Extent along one axis of a single dilated conv: ``l*(k-1)+1``."""
    return dilation * (kernel_size - 1) + 1


def _tap_offsets(kh: int, kw: int, dilation: int):
    # out[p] = sum_d x[p - l*d] k[d], d in [-r, r]^2.  With the input padded (or
    # cropped) so that output index o sits at input index o + l*r, kernel entry
    # (i, j) reads input row o + l*(kh-1-i).
    for i in range(kh):
        for j in range(kw):
            yield i, j, dilation * (kh - 1 - i), dilation * (kw - 1 - j)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """Stride-1 dilated convolution.

    ``kernel`` has shape ``(kh, kw, in_ch, out_ch)`` and is applied as a true
    convolution, ``out(p) = sum_d x(p - l*d) k(d)`` with ``d`` centred on the
    kernel.  ``padding="same"`` zero-pads by ``l*(k-1)/2`` so the spatial size
    is kept; ``"valid"`` returns only fully supported outputs.
    """
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sizes must be odd")
    if x.ndim != 4:
        raise ValueError(f"conv2d expects an NHWC tensor, got shape {x.shape}")
    n, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {cin}")

    ext_h, ext_w = receptive_extent(kh, dilation), receptive_extent(kw, dilation)
    if padding == "same":
        ph, pw = (ext_h - 1) // 2, (ext_w - 1) // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        oh, ow = h, w
    else:
        if h < ext_h or w < ext_w:
            raise ValueError(f"input {h}x{w} smaller than effective kernel {ext_h}x{ext_w}")
        ph = pw = 0
        xp = x.data
        oh, ow = h - ext_h + 1, w - ext_w + 1

    kd = kernel.data
    taps = list(_tap_offsets(kh, kw, dilation))
    out = np.zeros((n, oh, ow, cout))
    for i, j, dy, dx in taps:
        out += xp[:, dy:dy + oh, dx:dx + ow, :] @ kd[i, j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, dy, dx in taps:
                gxp[:, dy:dy + oh, dx:dx + ow, :] += g @ kd[i, j].T
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
        if kernel.requires_grad:
            g2 = g.reshape(-1, cout)
            gk = np.empty_like(kd)
            for i, j, dy, dx in taps:
                gk[i, j] = xp[:, dy:dy + oh, dx:dx + ow, :].reshape(-1, cin).T @ g2
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(n, h, w, C*r*r)`` into ``(n, h*r, w*r, C)``.

    Output pixel at row ``y``, column ``x`` and channel ``c`` reads input
    channel ``C*r*(y mod r) + C*(x mod r) + c`` at ``(y//r, x//r)``.
    """
    n, h, w, c = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"channels ({c}) not divisible by r^2 = {r * r}")
    co = c // (r * r)

    def fwd(a):
        return a.reshape(n, h, w, r, r, co).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * r, w * r, co)

    def bw(g):
        return (_unshuffle(g, r),)

    return Tensor._from_op(fwd(x.data), (x,), bw, "pixel_shuffle")


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, H, W, co = a.shape
    h, w = H // r, W // r
    return a.reshape(n, h, r, w, r, co).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, r * r * co)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, H, W, co = x.shape
    if H % r or W % r:
        raise ValueError(f"spatial size {H}x{W} not divisible by {r}")

    def bw(g):
        n_, h, w, c = g.shape
        return (g.reshape(n_, h, w, r, r, c // (r * r)).transpose(0, 1, 3, 2, 4, 5).reshape(n_, H, W, co),)

    return Tensor._from_op(_unshuffle(x.data, r), (x,), bw, "pixel_unshuffle")


# -- parameters -------------------------------------------------------------------


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "he_uniform"
    seed: int = 0


def init_bound(scheme: str, shape) -> float:
    kh, kw, cin, cout = shape
    fan_in, fan_out = kh * kw * cin, kh * kw * cout
    if scheme == "he_uniform":
        return float(np.sqrt(6.0 / fan_in))
    if scheme == "glorot_uniform":
        return float(np.sqrt(6.0 / (fan_in + fan_out)))
    raise ValueError(f"unknown init scheme {scheme!r}")


@dataclass
class Conv2d:
    """Kernel, bias and dilation of one convolutional layer."""

    kernel: Tensor
    bias: Optional[Tensor]
    dilation: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw = self.kernel.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.dilation, self.padding)

    @property
    def parameter_count(self) -> int:
        return self.kernel.size + (self.bias.size if self.bias is not None else 0)

    @property
    def extent(self) -> int:
        return receptive_extent(self.kernel.shape[0], self.dilation)


def init_conv(spec: InitSpec, shape, dilation: int = 1, bias: bool = True,
              padding: str = "same") -> Conv2d:
    """Uniform fan-in/fan-out scaled kernel drawn from ``spec.seed``; zero bias."""
    shape = tuple(int(s) for s in shape)
    bound = init_bound(spec.scheme, shape)
    rng = np.random.default_rng(spec.seed)
    kernel = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    b = Tensor(np.zeros(shape[3]), requires_grad=True) if bias else None
    return Conv2d(kernel, b, dilation, padding)
