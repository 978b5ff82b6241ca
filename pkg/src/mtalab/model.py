"""Decoder-only transformer with pre-normalisation, gated feed-forward and rotary positions."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from mtalab.attention import AttentionConfig, KernelBank, MTAAttention, kq_layer_period, mta_param_count
from mtalab.core import Tensor, cross_entropy, embedding, no_grad, silu
from mtalab.errors import ConfigError, InputError, ParamCountMismatch


def ffn_hidden_size(dim: int, multiple_of: int = 8) -> int:
    hidden = int(8 * dim / 3)
    return multiple_of * math.ceil(hidden / multiple_of)


@dataclass
class ModelConfig:
    n_layers: int = 4
    model_dim: int = 256
    n_heads: int = 2
    vocab_size: int = 30
    max_seq_len: int = 512
    layers: list[AttentionConfig] = field(default_factory=list)
    kernel_init: str = "identity"
    kernel_init_value: float = 0.3
    seed: int = 0
    rope_base: float | None = 10000.0
    tie_embeddings: bool = False
    ffn_multiple_of: int = 8
    norm_eps: float = 1e-5
    kq_layer_fraction: float | None = None

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if not self.layers:
            self.layers = [AttentionConfig(self.n_heads, self.head_dim) for _ in range(self.n_layers)]
        self.layers = [a if isinstance(a, AttentionConfig) else AttentionConfig(**a) for a in self.layers]
        if len(self.layers) != self.n_layers:
            raise ConfigError(f"{len(self.layers)} layer configs for {self.n_layers} layers")
        for i, a in enumerate(self.layers):
            if a.n_heads != self.n_heads or a.head_dim != self.head_dim:
                raise ConfigError(f"layer {i} attention shape ({a.n_heads}, {a.head_dim}) does not match model")
        if self.kq_layer_fraction is not None:
            period = kq_layer_period(self.kq_layer_fraction)
            expected = [period is not None and i % period == 0 for i in range(self.n_layers)]
            actual = [a.kq_enabled for a in self.layers]
            if expected != actual:
                raise ConfigError(f"kq-enabled layers {actual} do not follow fraction {self.kq_layer_fraction}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return ffn_hidden_size(self.model_dim, self.ffn_multiple_of)

    @property
    def is_mta(self) -> bool:
        return any(a.is_mta for a in self.layers)

    @classmethod
    def mta(
        cls,
        n_layers: int,
        model_dim: int,
        n_heads: int,
        c_q: int = 6,
        c_k: int = 11,
        c_h: int = 1,
        kq_layer_fraction: float = 1.0,
        kq_pre: bool = True,
        kq_post: bool = False,
        head_pre: bool = False,
        head_post: bool = False,
        fused_3d: bool = False,
        norm_mode: str = "none",
        **kw,
    ) -> "ModelConfig":
        """Uniform MTA stack; key-query convolution on layers ``i % (1/fraction) == 0`` (0-based)."""
        period = kq_layer_period(kq_layer_fraction)
        head_dim = model_dim // n_heads
        layers = [
            AttentionConfig(
                n_heads, head_dim, c_q, c_k, c_h,
                kq_enabled=period is not None and i % period == 0,
                kq_pre=kq_pre, kq_post=kq_post, head_pre=head_pre, head_post=head_post,
                fused_3d=fused_3d and period is not None and i % period == 0,
                norm_mode=norm_mode,
            )
            for i in range(n_layers)
        ]
        return cls(n_layers=n_layers, model_dim=model_dim, n_heads=n_heads, layers=layers,
                   kq_layer_fraction=kq_layer_fraction, **kw)

    @classmethod
    def toy(cls, arch: str = "mta", block_size: int = 5, **kw) -> "ModelConfig":
        """4 layers, 2 heads, width 256; MTA variant uses pre-softmax key-query conv with c_q=2, c_k=2N-1."""
        kw.setdefault("n_layers", 4)
        kw.setdefault("model_dim", 256)
        kw.setdefault("n_heads", 2)
        if arch == "baseline":
            return cls(**kw)
        if arch != "mta":
            raise ConfigError(f"unknown architecture {arch!r}")
        return cls.mta(c_q=2, c_k=2 * block_size - 1, c_h=1, kq_layer_fraction=1.0, kq_pre=True, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = [dataclasses.asdict(a) for a in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every registered parameter, in initialisation order."""
    dim, hidden, vocab = config.model_dim, config.ffn_hidden, config.vocab_size
    shapes = [("tok_emb", (vocab, dim))]
    for i, attn in enumerate(config.layers):
        p = f"layers.{i}"
        shapes.append((f"{p}.attn_norm", (dim,)))
        shapes += [(f"{p}.attn.{w}", (dim, dim)) for w in ("wq", "wk", "wv", "wo")]
        shapes += [(f"{p}.attn.{name}", s) for name, s in attn.param_shapes()]
        shapes.append((f"{p}.ffn_norm", (dim,)))
        shapes += [(f"{p}.ffn.w1", (dim, hidden)), (f"{p}.ffn.w3", (dim, hidden)), (f"{p}.ffn.w2", (hidden, dim))]
    shapes.append(("final_norm", (dim,)))
    if not config.tie_embeddings:
        shapes.append(("lm_head", (dim, vocab)))
    return shapes


def _is_mta_param(name: str) -> bool:
    return ".attn." in name and name.rsplit(".", 1)[-1] not in ("wq", "wk", "wv", "wo")


def count_parameters(config: ModelConfig, mta_only: bool = False) -> int:
    return sum(int(np.prod(s)) for n, s in parameter_shapes(config) if not mta_only or _is_mta_param(n))


def verify_param_count(config: ModelConfig) -> dict:
    """Compare the closed-form MTA parameter count with the registered parameters of ``config``."""
    layers = config.layers
    first = next((a for a in layers if a.kq_enabled), layers[0])
    kq_layers = sum(a.kq_enabled for a in layers)
    frac = config.kq_layer_fraction if config.kq_layer_fraction is not None else kq_layers / config.n_layers
    kq_stages = int(first.kq_pre) + int(first.kq_post) if kq_layers else 0
    head_stages = int(first.head_pre) + int(first.head_post)
    formula = mta_param_count(
        config.n_layers, config.n_heads, config.head_dim, first.c_q, first.c_k, first.c_h, frac,
        kq_stages=kq_stages, head_stages=head_stages, norm_mode=first.norm_mode,
    )
    walked = count_parameters(config, mta_only=True)
    baseline = count_parameters(config) - walked
    if formula != walked:
        raise ParamCountMismatch(f"formula gives {formula} extra parameters but the model registers {walked}")
    return {"baseline": baseline, "extra": walked, "formula": formula, "total": baseline + walked}


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    return x * ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5 * weight


class Block:
    def __init__(self, index: int, attn: MTAAttention, attn_norm, ffn_norm, w1, w3, w2, eps):
        self.index = index
        self.attn = attn
        self.attn_norm, self.ffn_norm = attn_norm, ffn_norm
        self.w1, self.w3, self.w2 = w1, w3, w2
        self.eps = eps

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        x = x + self.attn.forward(rms_norm(x, self.attn_norm, self.eps), trace)
        h = rms_norm(x, self.ffn_norm, self.eps)
        return x + (silu(h @ self.w1) * (h @ self.w3)) @ self.w2


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.blocks = []
        for i, acfg in enumerate(config.layers):
            p = f"layers.{i}"
            bank = KernelBank(**{
                name: params[f"{p}.attn.{name}"] for name, _ in acfg.param_shapes()
            })
            attn = MTAAttention(
                acfg, params[f"{p}.attn.wq"], params[f"{p}.attn.wk"], params[f"{p}.attn.wv"],
                params[f"{p}.attn.wo"], bank, layer_index=i + 1, rope_base=config.rope_base,
            )
            self.blocks.append(Block(
                i, attn, params[f"{p}.attn_norm"], params[f"{p}.ffn_norm"],
                params[f"{p}.ffn.w1"], params[f"{p}.ffn.w3"], params[f"{p}.ffn.w2"], config.norm_eps,
            ))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"token ids must be integers, got {tokens.dtype}")
        if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
            raise InputError(f"tokens must be (T,) or (B, T), got shape {tokens.shape}")
        if tokens.shape[-1] > self.config.max_seq_len:
            raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    def forward(self, tokens, traces: list | None = None) -> Tensor:
        """Next-token logits ``(..., T, vocab)`` for ``(T,)`` or ``(B, T)`` integer tokens.

        When ``traces`` is a list, one dict of attention-stage cubes per layer is appended.
        """
        tokens = self._check_tokens(tokens)
        x = embedding(self.params["tok_emb"], tokens)
        for block in self.blocks:
            trace = {} if traces is not None else None
            x = block.forward(x, trace)
            if traces is not None:
                traces.append(trace)
        x = rms_norm(x, self.params["final_norm"], self.config.norm_eps)
        if self.config.tie_embeddings:
            return x @ self.params["tok_emb"].transpose(1, 0)
        return x @ self.params["lm_head"]

    __call__ = forward

    def loss(self, inputs: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        return cross_entropy(self.forward(inputs), targets, mask)

    def predict(self, tokens) -> np.ndarray:
        with no_grad():
            return self.forward(tokens).data.argmax(axis=-1)


def lm_forward(model: Model, tokens) -> Tensor:
    return model.forward(tokens)


def build_model(config: ModelConfig) -> Model:
    """Initialise every parameter from ``config.seed``.

    Dense weights are normal(0, 0.02); output projections of attention and the
    feed-forward use std ``0.02 / sqrt(2 L)``. Norm gains start at 1. Stage
    kernels follow ``config.kernel_init`` and draw no random numbers, so a
    baseline and an MTA config with the same seed share all dense weights.
    """
    rng = np.random.default_rng(config.seed)
    std, out_std = 0.02, 0.02 / math.sqrt(2 * config.n_layers)
    banks = {}
    for i, acfg in enumerate(config.layers):
        bank = KernelBank.init(acfg, config.kernel_init, config.kernel_init_value)
        for name, t in bank.named_parameters():
            banks[f"layers.{i}.attn.{name}"] = t
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name in banks:
            params[name] = banks[name]
            continue
        if leaf in ("attn_norm", "ffn_norm", "final_norm"):
            arr = np.ones(shape)
        elif leaf in ("wo", "w2"):
            arr = rng.normal(0.0, out_std, size=shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    for name, t in params.items():
        t.name = name
    return Model(config, params)
