"""Small end-to-end self-checks shared by the CLI and the test-suite."""

from __future__ import annotations

import numpy as np

from mtalab.attention import AttentionConfig
from mtalab.core import grad_check, precision
from mtalab.model import Model, ModelConfig, build_model


def all_stage_config(n_layers: int = 2, model_dim: int = 32, n_heads: int = 4, vocab_size: int = 30,
                     norm_mode: str = "scalar_gating", seed: int = 0) -> ModelConfig:
    """Every MTA stage switched on: even layers run separate key-query and head
    convolutions before and after softmax; odd layers use the fused 3-D kernel
    pre-softmax plus both post-softmax stages."""
    d = model_dim // n_heads
    layers = []
    for i in range(n_layers):
        layers.append(AttentionConfig(
            n_heads, d, c_q=2, c_k=3, c_h=2, kq_enabled=True, kq_pre=True, kq_post=True,
            head_pre=True, head_post=True, fused_3d=bool(i % 2), norm_mode=norm_mode,
        ))
    return ModelConfig(n_layers=n_layers, model_dim=model_dim, n_heads=n_heads, vocab_size=vocab_size,
                       max_seq_len=64, layers=layers, seed=seed)


def perturb_kernels(model: Model, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Add noise to every stage parameter so no kernel sits at its identity value."""
    for block in model.blocks:
        for _, p in block.attn.bank.named_parameters():
            p.data = p.data + rng.normal(0.0, scale, size=p.shape).astype(p.data.dtype)


def model_grad_check(n_layers: int = 2, model_dim: int = 32, n_heads: int = 4, seq_len: int = 8,
                     n_samples: int = 200, seed: int = 0, step: float = 1e-5) -> tuple[float, int]:
    """Max relative error of taped vs central-difference gradients of the LM loss, in 64-bit.

    ``n_samples`` coordinates are drawn uniformly over all parameters, and
    every coordinate of the stage kernels is probed on top of those, since
    uniform draws rarely land in the small kernel tensors.
    Returns ``(max_rel_error, coordinates_probed)``.
    """
    rng = np.random.default_rng(seed)
    with precision("float64"):
        model = build_model(all_stage_config(n_layers, model_dim, n_heads, seed=seed))
        perturb_kernels(model, rng)
        tokens = rng.integers(0, model.config.vocab_size, size=(2, seq_len + 1))
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        params = model.parameters()
        total = sum(p.data.size for p in params)
        n = min(n_samples, total)
        loss = lambda: model.loss(inputs, targets)  # noqa: E731
        err = grad_check(loss, params, step=step, n_samples=n, seed=seed)
        kernels = [p for b in model.blocks for _, p in b.attn.bank.named_parameters()]
        err = max(err, grad_check(loss, kernels, step=step))
    return err, n + sum(p.data.size for p in kernels)
