"""Causal multi-head attention and its multi-token variants.

Stages, in pipeline order, for an attention cube of shape ``(..., M, T, T)``:

* key-query convolution on logits (zero-masked before, ``-inf``-masked after);
* head mixing of logits within groups of ``c_h`` heads;
* softmax;
* key-query convolution on weights, followed by a zero mask;
* head mixing of weights;
* per-head RMS normalisation of the head outputs with an optional scale.

Pre-softmax key-query convolution plus head mixing may be replaced by a single
fused kernel over (head, query, key).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from mtalab.core import Tensor, conv2d_anchored, conv3d_grouped, einsum, get_dtype, rotary, softmax_rows
from mtalab.core import ops
from mtalab.errors import ConfigError, ParamCountMismatch, ShapeError

NORM_MODES = ("scalar_gating", "depth_scaling", "no_scaling", "layernorm_scaling", "none")
DEPTH_MODES = ("depth_scaling", "layernorm_scaling")
KERNEL_INITS = ("identity", "zeros", "constant")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    head_dim: int
    c_q: int = 1
    c_k: int = 1
    c_h: int = 1
    kq_enabled: bool = False
    kq_pre: bool = False
    kq_post: bool = False
    head_pre: bool = False
    head_post: bool = False
    fused_3d: bool = False
    norm_mode: str = "none"
    exact_kq: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_heads", "head_dim", "c_q", "c_k", "c_h"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads % self.c_h:
            raise ConfigError(f"head kernel size c_h={self.c_h} does not divide n_heads={self.n_heads}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if (self.head_pre or self.head_post) and self.c_h < 2:
            raise ConfigError("head mixing needs c_h >= 2")
        if self.fused_3d and not (self.has_kq_pre and self.head_pre):
            raise ConfigError("fused_3d requires both pre-softmax key-query convolution and head mixing")
        if self.exact_kq and (self.head_pre or not self.has_kq_pre):
            raise ConfigError("exact_kq replaces the pre-softmax key-query stage only")

    @property
    def has_kq_pre(self) -> bool:
        return self.kq_enabled and self.kq_pre

    @property
    def has_kq_post(self) -> bool:
        return self.kq_enabled and self.kq_post

    @property
    def groups(self) -> int:
        return self.n_heads // self.c_h

    @property
    def kq_bounds(self) -> tuple[int, int]:
        return (self.c_q, self.c_k) if self.kq_enabled else (1, 1)

    @property
    def is_mta(self) -> bool:
        return (
            self.has_kq_pre or self.has_kq_post or self.head_pre or self.head_post or self.norm_mode != "none"
        )

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes of the extra parameters this layer registers, in registration order."""
        m, d = self.n_heads, self.head_dim
        shapes = []
        if self.fused_3d:
            shapes.append(("fused_pre", (m, self.c_h, self.c_q, self.c_k)))
        else:
            if self.has_kq_pre:
                shapes.append(("kq_pre", (m, self.c_q, self.c_k)))
            if self.head_pre:
                shapes.append(("head_pre", (self.groups, self.c_h, self.c_h)))
        if self.has_kq_post:
            shapes.append(("kq_post", (m, self.c_q, self.c_k)))
        if self.head_post:
            shapes.append(("head_post", (self.groups, self.c_h, self.c_h)))
        if self.norm_mode != "none":
            shapes += [("norm_weight", (d,)), ("norm_bias", (d,))]
        if self.norm_mode == "scalar_gating":
            shapes.append(("gate", (1,)))
        return shapes


def _kq_kernel(m, c_q, c_k, init, value):
    k = np.zeros((m, c_q, c_k))
    if init == "identity":
        k[:, 0, c_k // 2] = 1.0
    elif init == "constant":
        k[:] = value
    return k


def _head_kernel(groups, c_h, init, value):
    if init == "identity":
        return np.tile(np.eye(c_h), (groups, 1, 1))
    return np.full((groups, c_h, c_h), value if init == "constant" else 0.0)


def _fused_kernel(m, c_h, c_q, c_k, init, value):
    k = np.zeros((m, c_h, c_q, c_k))
    if init == "identity":
        for g in range(m):
            k[g, g % c_h, 0, c_k // 2] = 1.0
    elif init == "constant":
        k[:] = value
    return k


@dataclass
class KernelBank:
    """Learnable stage kernels and normalisation parameters of one attention layer.

    Absent stages are ``None``. ``kq_*`` are ``(M, c_q, c_k)``; ``head_*`` are
    ``(M / c_h, c_h, c_h)`` with ``w[group, out, in]``; ``fused_pre`` is
    ``(M, c_h, c_q, c_k)`` indexed by output head then input head of its group.
    """

    kq_pre: Tensor | None = None
    kq_post: Tensor | None = None
    head_pre: Tensor | None = None
    head_post: Tensor | None = None
    fused_pre: Tensor | None = None
    norm_weight: Tensor | None = None
    norm_bias: Tensor | None = None
    gate: Tensor | None = None

    @classmethod
    def init(cls, config: AttentionConfig, kernel_init: str = "identity", value: float = 0.3) -> "KernelBank":
        if kernel_init not in KERNEL_INITS:
            raise ConfigError(f"kernel_init must be one of {KERNEL_INITS}, got {kernel_init!r}")
        m, c_h = config.n_heads, config.c_h
        c_q, c_k = config.c_q, config.c_k
        arrays = {}
        for name, shape in config.param_shapes():
            if name.startswith("kq_"):
                arr = _kq_kernel(m, c_q, c_k, kernel_init, value)
            elif name.startswith("head_"):
                arr = _head_kernel(config.groups, c_h, kernel_init, value)
            elif name == "fused_pre":
                arr = _fused_kernel(m, c_h, c_q, c_k, kernel_init, value)
            elif name == "norm_weight":
                arr = np.ones(shape)
            else:  # norm_bias, gate (sigmoid(0) = 0.5)
                arr = np.zeros(shape)
            arrays[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(**arrays)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for name, t in self.__dict__.items() if t is not None]

    def require(self, name: str) -> Tensor:
        t = getattr(self, name)
        if t is None:
            raise ConfigError(f"kernel bank has no {name!r} parameters")
        return t


# plain stage functions


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products ``Q K^T / sqrt(d)`` per head; no masking."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    d = q.shape[-1]
    if d == 0:
        raise ConfigError("head_dim must be >= 1")
    return ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(d))


def mask_neg_inf(x: Tensor) -> Tensor:
    return ops.causal_fill(x, -np.inf)


def mask_zero(x: Tensor) -> Tensor:
    return ops.causal_fill(x, 0.0)


def kq_conv_logits(scores: Tensor, kernel: Tensor, bounds=None) -> Tensor:
    """Doubly masked key-query convolution of logits, before the softmax."""
    return mask_neg_inf(conv2d_anchored(mask_zero(scores), kernel, bounds))


def kq_conv_pre(scores: Tensor, bank: KernelBank, config: AttentionConfig | None = None) -> Tensor:
    bounds = config.kq_bounds if config else None
    return softmax_rows(kq_conv_logits(scores, bank.require("kq_pre"), bounds))


def kq_conv_post(weights: Tensor, bank: KernelBank, config: AttentionConfig | None = None) -> Tensor:
    """Convolve softmaxed weights and zero the future. Rows are not renormalised."""
    bounds = config.kq_bounds if config else None
    return mask_zero(conv2d_anchored(weights, bank.require("kq_post"), bounds))


def kq_exact_logits(scores: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Loop reference for the key-query convolution with exact per-term causality.

    ``scores`` is the unmasked ``(..., M, T, T)`` logit cube. A term reading key
    ``j - j'`` is kept only when that key is not in the future of query ``i``;
    the final logits above the diagonal are ``-inf``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    lead = scores.shape[:-3]
    m, t = scores.shape[-3], scores.shape[-1]
    c_q, c_k = kernels.shape[-2:]
    flat = scores.reshape((-1, m, t, t))
    out = np.full_like(flat, -np.inf)
    for n in range(flat.shape[0]):
        for h in range(m):
            for i in range(t):
                for j in range(i + 1):
                    acc = 0.0
                    for a in range(c_q):
                        for b in range(-(c_k // 2), (c_k + 1) // 2):
                            r, s = i - a, j - b
                            if r < 0 or not 0 <= s < t or s > i:
                                continue
                            acc += kernels[h, a, b + c_k // 2] * flat[n, h, r, s]
                    out[n, h, i, j] = acc
    return out.reshape(lead + (m, t, t))


def kq_conv_exact(q: Tensor, k: Tensor, bank: KernelBank) -> Tensor:
    """Reference attention weights with exact per-term causality, via explicit loops."""
    qd, kd = np.asarray(q.data, np.float64), np.asarray(k.data, np.float64)
    kernels = np.asarray(bank.require("kq_pre").data, np.float64)
    d = qd.shape[-1]
    lead = qd.shape[:-3]
    m, t = qd.shape[-3], qd.shape[-2]
    qf, kf = qd.reshape((-1, m, t, d)), kd.reshape((-1, m, t, d))
    c_q, c_k = kernels.shape[-2:]
    logits = np.full((qf.shape[0], m, t, t), -np.inf)
    for n in range(qf.shape[0]):
        for h in range(m):
            for i in range(t):
                for j in range(i + 1):
                    acc = 0.0
                    for a in range(c_q):
                        for b in range(-(c_k // 2), (c_k + 1) // 2):
                            if i - a < 0 or not 0 <= j - b < t or i < j - b:
                                continue
                            acc += kernels[h, a, b + c_k // 2] * float(qf[n, h, i - a] @ kf[n, h, j - b]) / math.sqrt(d)
                    logits[n, h, i, j] = acc
    with_dtype = Tensor(logits.reshape(lead + (m, t, t)), dtype=np.float64)
    return softmax_rows(with_dtype)


def head_mix(x: Tensor, kernel: Tensor) -> Tensor:
    """Mix heads within non-overlapping groups: ``out[g] = sum_h w[group, g, h] * x[h]``."""
    groups, c_h, _ = kernel.shape
    m, t = x.shape[-3], x.shape[-1]
    if m != groups * c_h:
        raise ConfigError(f"head kernel {kernel.shape} does not cover {m} heads")
    lead = x.shape[:-3]
    xr = x.reshape(lead + (groups, c_h, t, t))
    return einsum("goh,...ghij->...goij", kernel, xr).reshape(x.shape)


def conv3d_combined(x: Tensor, bank: KernelBank) -> Tensor:
    return conv3d_grouped(x, bank.require("fused_pre"))


def depth_lambda(layer_index: int) -> float:
    return 0.8 - 0.6 * math.exp(-0.3 * (layer_index - 1))


def group_norm_gate(o: Tensor, bank: KernelBank, norm_mode: str, layer_index: int = 1, eps: float = 1e-5) -> Tensor:
    """Per-head RMS normalisation over channels of ``(..., M, T, d)`` followed by a mode-specific scale."""
    if norm_mode not in NORM_MODES:
        raise ConfigError(f"unknown norm_mode {norm_mode!r}")
    if norm_mode == "none":
        return o
    if norm_mode in DEPTH_MODES and layer_index < 1:
        raise ConfigError(f"{norm_mode} needs a 1-based layer index, got {layer_index}")
    ms = (o * o).mean(axis=-1, keepdims=True)
    n = o * (ms + eps) ** -0.5 * bank.require("norm_weight") + bank.require("norm_bias")
    if norm_mode == "scalar_gating":
        return n * ops.sigmoid(bank.require("gate"))
    if norm_mode == "depth_scaling":
        return n * (1.0 - depth_lambda(layer_index))
    if norm_mode == "layernorm_scaling":
        return n * (1.0 / math.sqrt(layer_index))
    return n


def rope_tables(t: int, d: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if d % 2:
        raise ConfigError(f"rotary embeddings need an even head_dim, got {d}")
    inv = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv[None, :]
    dtype = get_dtype()
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, base_theta: float = 10000.0) -> Tensor:
    """Rotate channel pairs of ``(..., T, d)`` by position-dependent angles."""
    cos, sin = rope_tables(x.shape[-2], x.shape[-1], base_theta)
    return rotary(x, cos.astype(x.dtype), sin.astype(x.dtype))


@dataclass
class MTAAttention:
    """One attention sublayer: projections, stage kernels and the forward pipeline."""

    config: AttentionConfig
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bank: KernelBank = field(default_factory=KernelBank)
    layer_index: int = 1
    rope_base: float | None = 10000.0

    @classmethod
    def random(cls, config: AttentionConfig, rng: np.random.Generator, std: float = 0.02,
               out_std: float | None = None, kernel_init: str = "identity", layer_index: int = 1,
               rope_base: float | None = 10000.0) -> "MTAAttention":
        dim = config.n_heads * config.head_dim

        def w(s):
            return Tensor(rng.normal(0.0, s, size=(dim, dim)), requires_grad=True)

        wq, wk, wv = w(std), w(std), w(std)
        wo = w(std if out_std is None else out_std)
        return cls(config, wq, wk, wv, wo, KernelBank.init(config, kernel_init), layer_index, rope_base)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        base = [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]
        return base + self.bank.named_parameters()

    def forward(self, h: Tensor, trace: dict | None = None) -> Tensor:
        cfg = self.config
        m, d = cfg.n_heads, cfg.head_dim
        if h.shape[-1] != m * d:
            raise ShapeError(f"hidden size {h.shape[-1]} != n_heads * head_dim = {m * d}")
        lead, t = h.shape[:-2], h.shape[-2]
        nl = len(lead)
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

        def heads(x):
            return x.reshape(lead + (t, m, d)).transpose(perm)

        q, k, v = heads(h @ self.wq), heads(h @ self.wk), heads(h @ self.wv)
        if self.rope_base is not None:
            q, k = rope(q, self.rope_base), rope(k, self.rope_base)

        if cfg.exact_kq:
            # reference path: no gradient flows through the loop oracle
            weights = kq_conv_exact(q, k, self.bank)
            weights = Tensor(weights.data.astype(h.dtype), dtype=h.dtype)
            if trace is not None:
                trace["logits"] = mask_neg_inf(attention_logits(q, k)).data
                trace["post_softmax"] = weights.data
        else:
            scores = attention_logits(q, k)
            if trace is not None:
                trace["logits"] = mask_neg_inf(scores).data
            x = scores
            if cfg.fused_3d:
                x = conv3d_combined(mask_zero(x), self.bank)
            else:
                if cfg.has_kq_pre:
                    x = conv2d_anchored(mask_zero(x), self.bank.require("kq_pre"), cfg.kq_bounds)
                if cfg.head_pre:
                    x = head_mix(x, self.bank.require("head_pre"))
            x = mask_neg_inf(x)
            if trace is not None:
                trace["pre_softmax_conv"] = x.data
            weights = softmax_rows(x)
            if trace is not None:
                trace["post_softmax"] = weights.data
        if cfg.has_kq_post:
            weights = kq_conv_post(weights, self.bank, cfg)
        if cfg.head_post:
            weights = head_mix(weights, self.bank.require("head_post"))
        if trace is not None:
            trace["final"] = weights.data

        o = ops.matmul(weights, v)
        o = group_norm_gate(o, self.bank, cfg.norm_mode, self.layer_index, cfg.norm_eps)
        inv = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        o = o.transpose(inv).reshape(lead + (t, m * d))
        return o @ self.wo


def mta_layer_forward(h: Tensor, layer: MTAAttention, trace: dict | None = None) -> Tensor:
    return layer.forward(h, trace)


def kq_layer_period(fraction: float) -> int | None:
    """Layer period for key-query convolution: ``1/fraction``, or ``None`` when disabled."""
    if fraction <= 0:
        return None
    period = round(1 / fraction)
    if period < 1 or not math.isclose(1 / period, fraction, rel_tol=1e-9):
        raise ConfigError(f"kq layer fraction must be 1/n for an integer n, got {fraction}")
    return period


def mta_param_count(
    n_layers: int,
    n_heads: int,
    head_dim: int,
    c_q: int,
    c_k: int,
    c_h: int,
    kq_layer_fraction: float | Fraction = Fraction(1, 4),
    kq_stages: int = 2,
    head_stages: int = 2,
    norm_mode: str = "scalar_gating",
) -> int:
    """Closed-form count of parameters MTA adds on top of a standard transformer.

    ``stages * L * M * (c_q * c_k * fraction) + stages * L * M * c_h`` for the
    kernels plus ``L * (2d + 1)`` for normalisation gain, bias and gate. With the
    default two stages this is ``2 L M (c_q c_k / 4 + c_h) + L (2 d + 1)``. Head
    mixing with ``c_h = 1`` is treated as absent.
    """
    for name, v in (("n_layers", n_layers), ("n_heads", n_heads), ("head_dim", head_dim), ("c_q", c_q),
                    ("c_k", c_k), ("c_h", c_h)):
        if v < 1:
            raise ConfigError(f"{name} must be positive, got {v}")
    if norm_mode not in NORM_MODES:
        raise ConfigError(f"unknown norm_mode {norm_mode!r}")
    frac = Fraction(kq_layer_fraction).limit_denominator(10_000)
    total = kq_stages * n_layers * n_heads * c_q * c_k * frac
    if c_h > 1:
        total += head_stages * n_layers * n_heads * c_h
    if norm_mode == "scalar_gating":
        total += n_layers * (2 * head_dim + 1)
    elif norm_mode != "none":
        total += n_layers * 2 * head_dim
    if total.denominator != 1:
        raise ParamCountMismatch(f"formula gives a non-integer count {total}; kq layer fraction does not fit L")
    return int(total)
