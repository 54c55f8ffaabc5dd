"""MSE objective, Adam and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Union

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .data import Batch, PatchSampler
from .model import ModelSpec, SRModel, build_model
from .tensor import Tensor, reduce

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return reduce("mean", d * d)


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "decoupled", "step")}

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    @classmethod
    def restore(cls, hyper: dict, arrays: Mapping[str, np.ndarray]) -> "OptimState":
        st = cls(**hyper)
        for k, a in arrays.items():
            kind, name = k.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = np.array(a)
        return st


def adam_step(params: Mapping[str, Tensor], state: OptimState,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """One bias-corrected Adam update, in place.

    Gradients come from ``grads`` or, when omitted, from each tensor's
    ``.grad``.  With ``weight_decay > 0`` the gradient of ``0.5*|theta|^2`` is
    added to the loss gradient, or applied directly to the weights when
    ``decoupled`` is set.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter {name}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and state.decoupled:
            update = update + state.lr * state.weight_decay * p.data
        p.data = p.data - update


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: List[tuple]
    model: SRModel


BatchSource = Union[Batch, Callable[[int], Batch]]


def _batch_at(source: BatchSource, step: int) -> Batch:
    return source if isinstance(source, Batch) else source(step)


def make_checkpoint(model: SRModel, state: OptimState, epoch: int, step: int,
                    source: Optional[BatchSource] = None) -> Checkpoint:
    rng = {"model_seed": model.spec.seed, "next_step": step}
    if isinstance(source, PatchSampler):
        rng["data"] = source.cfg.to_dict()
    return Checkpoint(spec=model.spec.to_dict(), params=model.state_dict(), optim=state.hyper(),
                      optim_arrays=state.arrays(), epoch=epoch, step=step, rng=rng)


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "mse"])
        for step, epoch, mse in history:
            w.writerow([step, epoch, repr(mse)])


def fit(spec: ModelSpec, data: BatchSource, epochs: int, steps_per_epoch: int, seed: Optional[int] = None,
        optim: Optional[OptimState] = None, resume: Optional[Checkpoint] = None,
        checkpoint_every: Optional[int] = None, checkpoint_path=None, loss_log=None,
        log_every: int = 0) -> FitResult:
    """Minimise per-batch MSE with Adam for ``epochs * steps_per_epoch`` steps.

    ``data`` is a fixed batch or a callable ``step -> Batch``.  Everything is
    a function of the seeds and the step index, so resuming from a checkpoint
    continues the run exactly.
    """
    if epochs < 0 or steps_per_epoch < 1:
        raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
    if resume is not None:
        model = build_model(ModelSpec.from_dict(resume.spec))
        model.load_state_dict(resume.params)
        state = OptimState.restore(resume.optim, resume.optim_arrays)
        start = resume.step
    else:
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed)
        model = build_model(spec)
        state = optim if optim is not None else OptimState()
        start = 0

    params = model.params
    history = []
    total = epochs * steps_per_epoch
    for step in range(start, total):
        epoch = step // steps_per_epoch
        batch = _batch_at(data, step)
        for p in params.values():
            p.zero_grad()
        try:
            loss = mse_loss(model(batch.lr), batch.hr)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("loss is not finite")
            loss.backward()
        except FloatingPointError as exc:
            where = batch.provenance[:4] if batch.provenance else "fixed batch"
            raise TrainingDiverged(f"non-finite values at step {step} (epoch {epoch}); batch {where}: {exc}") from exc
        adam_step(params, state)
        history.append((step, epoch, value))
        if log_every and step % log_every == 0:
            log.info("step %d epoch %d mse %.6g", step, epoch, value)
        done = step + 1
        if checkpoint_every and checkpoint_path and done % checkpoint_every == 0 and done < total:
            ckpt_io.save(make_checkpoint(model, state, done // steps_per_epoch, done, data), checkpoint_path)

    final_step = max(total, start)
    final = make_checkpoint(model, state, final_step // steps_per_epoch, final_step, data)
    if checkpoint_path:
        ckpt_io.save(final, checkpoint_path)
    if loss_log:
        write_loss_log(loss_log, history)
    return FitResult(final, history, model)
