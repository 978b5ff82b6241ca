"""Central-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mtalab.core.tensor import Tape, Tensor, no_grad
from mtalab.errors import GradCheckError


def _value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    if out.data.size != 1:
        raise GradCheckError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` closes over ``params`` and is re-evaluated after each in-place probe.
    The error per coordinate is ``|an - fd| / max(1, |an|, |fd|)``. With
    ``n_samples`` set, that many coordinates are drawn uniformly over all
    parameters; otherwise every coordinate is probed.
    """
    if not 0.0 < step <= 1e-2:
        raise GradCheckError(f"step must lie in (0, 1e-2], got {step}")
    for p in params:
        if p.data.dtype != np.float64:
            raise GradCheckError(f"grad_check requires float64 parameters, got {p.data.dtype}")

    base = _value(f)
    if _value(f) != base:
        raise GradCheckError("function is not deterministic across repeated evaluations")

    loss = f()
    tape = Tape(loss)
    grads = tape.gradients()
    analytic = [grads.get(id(p), np.zeros_like(p.data)) for p in params]

    coords = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, i in coords:
        flat = params[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = _value(f)
        flat[i] = orig - step
        down = _value(f)
        flat[i] = orig
        fd = (up - down) / (2.0 * step)
        an = float(analytic[k].reshape(-1)[i])
        err = abs(an - fd) / max(1.0, abs(an), abs(fd))
        worst = max(worst, err)
    return worst
