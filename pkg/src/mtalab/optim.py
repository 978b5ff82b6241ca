"""AdamW with decoupled weight decay, global-norm clipping and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mtalab.core import Tensor
from mtalab.errors import NumericError


@dataclass
class AdamW:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0


@dataclass
class TrainState:
    """Everything needed to resume a run: step counter, Adam moments and metrics.

    Batches are drawn from counter-based streams keyed by ``(data_seed, step)``,
    so the step is also the position of the data RNG stream.
    """

    step: int = 0
    data_seed: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {"step": self.step, "data_seed": self.data_seed, "metrics": self.metrics}


def cosine_lr(step: int, base_lr: float, warmup: int, total: int, final_frac: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``final_frac * base_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * (final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: TrainState,
    hyper: AdamW,
    lr: float | None = None,
) -> float:
    """One AdamW update of ``params`` from ``grads``. Returns the pre-clip gradient norm.

    Raises NumericError, before touching any parameter, if a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    grads = dict(grads)
    norm = clip_grad_norm(grads, hyper.grad_clip) if hyper.grad_clip is not None else float("nan")
    lr = hyper.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
    return norm
