from mtalab.core.gradcheck import grad_check
from mtalab.core.ops import (
    causal_fill,
    conv2d_anchored,
    conv3d_grouped,
    cross_entropy,
    einsum,
    embedding,
    matmul,
    rotary,
    sigmoid,
    silu,
    softmax_rows,
)
from mtalab.core.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "causal_fill",
    "conv2d_anchored",
    "conv3d_grouped",
    "cross_entropy",
    "einsum",
    "embedding",
    "get_dtype",
    "grad_check",
    "matmul",
    "no_grad",
    "precision",
    "rotary",
    "set_precision",
    "sigmoid",
    "silu",
    "softmax_rows",
]
