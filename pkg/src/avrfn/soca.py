"""Second-order channel attention.

Per sample, the ``HW x C`` feature matrix is turned into a ``C x C`` channel
covariance, trace-normalised, square-rooted with a coupled Newton-Schulz
iteration, rescaled, row-averaged into one statistic per channel, and fed to
a two-layer sigmoid gate that scales the input channels.

All stages are written with differentiable tensor ops so the backward pass
runs through the unrolled iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .layers import Conv2d, InitSpec, init_conv
from .tensor import Tensor, eye, reduce, relu, reshape, sigmoid, sqrt, transpose

TRACE_EPS = 1e-8
NS_ITERATIONS = 5


@dataclass
class CovarianceState:
    """Intermediate matrices of one SOCA evaluation, batched over samples."""

    sigma: Tensor
    sigma_hat: Optional[Tensor] = None
    trace: Optional[Tensor] = None
    y_n: Optional[Tensor] = None
    z_n: Optional[Tensor] = None
    y_hat: Optional[Tensor] = None
    iterates: List[Tensor] = field(default_factory=list)


@dataclass
class GateParams:
    w0: Conv2d
    w1: Conv2d

    @property
    def channels(self) -> int:
        return self.w0.kernel.shape[2]

    @property
    def parameter_count(self) -> int:
        return self.w0.parameter_count + self.w1.parameter_count


def gate_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def init_gate(channels: int, reduction: int = 16, seed: int = 0, scheme: str = "he_uniform") -> GateParams:
    hidden = gate_hidden(channels, reduction)
    ss = np.random.SeedSequence(seed).spawn(2)
    w0 = init_conv(InitSpec(scheme, int(ss[0].generate_state(1)[0])), (1, 1, channels, hidden))
    w1 = init_conv(InitSpec(scheme, int(ss[1].generate_state(1)[0])), (1, 1, hidden, channels))
    return GateParams(w0, w1)


def covariance(x: Tensor) -> CovarianceState:
    """Channel covariance ``(1/s) * sum_p (x_p - mean)(x_p - mean)^T`` per sample.

    Equivalent to ``X^T I_bar X`` with the centring matrix
    ``I_bar = (1/s)(I - (1/s) 1)``, ``s = H*W``, without forming the ``s x s``
    matrix.  Returns shape ``(n, C, C)``.
    """
    n, h, w, c = x.shape
    s = h * w
    feats = reshape(x, (n, s, c))
    centred = feats - reduce("mean", feats, axes=1, keepdims=True)
    sigma = (transpose(centred) @ centred) * (1.0 / s)
    return CovarianceState(sigma=sigma)


def prenormalize(state: CovarianceState, eps: float = TRACE_EPS) -> CovarianceState:
    """Divide each covariance by its trace.

    Traces at or below ``eps`` (constant feature maps) are shifted up by
    ``eps`` so the division stays finite; larger traces are used unchanged.
    """
    tr = reduce("trace", state.sigma)
    tr = tr + Tensor(np.where(tr.data > eps, 0.0, eps))
    state.trace = tr
    state.sigma_hat = state.sigma / reshape(tr, tr.shape + (1, 1))
    return state


def newton_schulz(state: CovarianceState, n_iter: int = NS_ITERATIONS) -> CovarianceState:
    """Coupled iteration ``Y <- Y(3I - ZY)/2``, ``Z <- (3I - ZY)Z/2`` from ``Y0 = S, Z0 = I``.

    ``Y`` tends to ``S^(1/2)`` and ``Z`` to ``S^(-1/2)``.  Every iterate is
    kept on ``state.iterates`` for convergence studies.
    """
    y = state.sigma_hat
    c = y.shape[-1]
    batch = y.shape[0] if y.ndim == 3 else None
    ident = eye(c, batch)
    z = ident
    state.iterates = []
    for k in range(n_iter):
        t = ident * 3.0 - (y if k == 0 else z @ y)  # Z0 = I
        y, z = (y @ t) * 0.5, (t if k == 0 else t @ z) * 0.5
        state.iterates.append(y)
    state.y_n, state.z_n = y, z
    return state


def compensate(state: CovarianceState) -> CovarianceState:
    """Undo the trace normalisation: ``Y_hat = sqrt(trace) * Y_N``."""
    tr = state.trace
    state.y_hat = state.y_n * reshape(sqrt(tr), tr.shape + (1, 1))
    return state


def covariance_pool(state: CovarianceState) -> Tensor:
    """Row mean of ``Y_hat``: one statistic per channel, shape ``(n, C)``."""
    return reduce("mean", state.y_hat, axes=-1)


def attention_gate(z: Tensor, gate: GateParams) -> Tensor:
    """``sigmoid(W1 * relu(W0 * z))`` with 1x1 convs over a ``(n, 1, 1, C)`` map."""
    if z.shape[-1] != gate.channels:
        raise ValueError(f"gate expects {gate.channels} channels, got {z.shape[-1]}")
    z4 = reshape(z, (z.shape[0], 1, 1, z.shape[-1]))
    return sigmoid(gate.w1(relu(gate.w0(z4))))


def soca_state(x: Tensor, n_iter: int = NS_ITERATIONS, eps: float = TRACE_EPS) -> CovarianceState:
    return compensate(newton_schulz(prenormalize(covariance(x), eps), n_iter))


def soca_apply(x: Tensor, gate: GateParams, n_iter: int = NS_ITERATIONS) -> Tensor:
    """Scale each channel of ``x`` by its second-order attention weight."""
    if x.shape[-1] != gate.channels:
        raise ValueError(f"gate expects {gate.channels} channels, got {x.shape[-1]}")
    z = covariance_pool(soca_state(x, n_iter))
    return x * attention_gate(z, gate)
