"""Export learned stage kernels and attention maps as CSV (plus SVG heatmaps)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from mtalab import toytask
from mtalab.checkpoint import load_checkpoint
from mtalab.core import no_grad
from mtalab.errors import InputError
from mtalab.model import Model

KQ_KERNELS = ("kq_pre", "kq_post", "fused_pre")
HEAD_KERNELS = ("head_pre", "head_post")
STAGES = {"logits": "logits", "pre-softmax-conv": "pre_softmax_conv", "post-softmax": "post_softmax", "final": "final"}
MAX_DUMP_LEN = 1024


def _fmt(x) -> str:
    # repr of the float64 image of a float32 value parses back to the same float32
    return repr(float(x))


def key_offsets(c_k: int) -> list[int]:
    return list(range(-(c_k // 2), (c_k + 1) // 2))


def write_kernel_csv(kernel: np.ndarray, path) -> Path:
    """``(c_q, c_k)`` kernel; header row holds key offsets, first column query offsets."""
    path = Path(path)
    c_q, c_k = kernel.shape
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["q_offset\\k_offset"] + key_offsets(c_k))
        for a in range(c_q):
            w.writerow([a] + [_fmt(v) for v in kernel[a]])
    return path


def write_matrix_csv(matrix: np.ndarray, path, row_name="row", col_name="col") -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"{row_name}\\{col_name}"] + list(range(matrix.shape[1])))
        for i, row in enumerate(matrix):
            w.writerow([i] + [_fmt(v) for v in row])
    return path


def read_labeled_csv(path, dtype=np.float32) -> np.ndarray:
    """Inverse of the CSV writers: drop the header row and label column."""
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=dtype)


def head_kernel_stats(kernel: np.ndarray) -> tuple[float, float]:
    """Diagonal mean and mean|off-diagonal| / mean|diagonal| of a ``(c_h, c_h)`` mixing matrix."""
    c_h = kernel.shape[0]
    diag = np.diag(kernel)
    off = kernel[~np.eye(c_h, dtype=bool)]
    dmean = float(diag.mean())
    denom = float(np.abs(diag).mean())
    ratio = float(np.abs(off).mean()) / denom if denom > 0 else float("inf")
    return dmean, ratio


def inspect_kernels(source, out_dir, svg: bool = True) -> list[Path]:
    """Write every stage kernel of a checkpoint (path or Model) under ``out_dir``.

    Files: ``L{l}_{stage}_h{h}.csv`` for key-query kernels (fused kernels add
    ``_in{h'}``), ``L{l}_{stage}_g{g}.csv`` for head-mixing matrices, and
    ``head_kernel_summary.csv``. Raises InputError for a model without MTA kernels.
    """
    model = source if isinstance(source, Model) else load_checkpoint(source)[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary = []
    found = False
    for li, block in enumerate(model.blocks):
        for name, t in block.attn.bank.named_parameters():
            k = t.data
            if name in ("kq_pre", "kq_post"):
                found = True
                for h in range(k.shape[0]):
                    p = write_kernel_csv(k[h], out / f"L{li}_{name}_h{h}.csv")
                    written.append(p)
                    if svg:
                        written.append(_kernel_svg(k[h], p.with_suffix(".svg"), f"layer {li} {name} head {h}"))
            elif name == "fused_pre":
                found = True
                for g in range(k.shape[0]):
                    for j in range(k.shape[1]):
                        p = write_kernel_csv(k[g, j], out / f"L{li}_{name}_h{g}_in{j}.csv")
                        written.append(p)
                        if svg:
                            written.append(_kernel_svg(k[g, j], p.with_suffix(".svg"), f"layer {li} fused head {g} input {j}"))
            elif name in HEAD_KERNELS:
                found = True
                for g in range(k.shape[0]):
                    written.append(write_matrix_csv(k[g], out / f"L{li}_{name}_g{g}.csv", "out_head", "in_head"))
                    dmean, ratio = head_kernel_stats(k[g])
                    summary.append([li, name, g, _fmt(dmean), _fmt(ratio)])
    if not found:
        raise InputError("no MTA kernels in this checkpoint")
    path = out / "head_kernel_summary.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "stage", "group", "diag_mean", "offdiag_diag_ratio"])
        w.writerows(summary)
    written.append(path)
    return written


def _kernel_svg(kernel, path, title):
    from mtalab.plotting import heatmap

    return heatmap(kernel, path, row_labels=range(kernel.shape[0]), col_labels=key_offsets(kernel.shape[1]),
                   title=title, xlabel="key offset (positive = past)", ylabel="query offset")


def import_kernels(model: Model, kernel_dir) -> None:
    """Load key-query and head-mixing CSVs written by :func:`inspect_kernels` back into ``model``."""
    d = Path(kernel_dir)
    for li, block in enumerate(model.blocks):
        for name, t in block.attn.bank.named_parameters():
            k = t.data
            if name in ("kq_pre", "kq_post"):
                for h in range(k.shape[0]):
                    k[h] = read_labeled_csv(d / f"L{li}_{name}_h{h}.csv", k.dtype)
            elif name == "fused_pre":
                for g in range(k.shape[0]):
                    for j in range(k.shape[1]):
                        k[g, j] = read_labeled_csv(d / f"L{li}_{name}_h{g}_in{j}.csv", k.dtype)
            elif name in HEAD_KERNELS:
                for g in range(k.shape[0]):
                    k[g] = read_labeled_csv(d / f"L{li}_{name}_g{g}.csv", k.dtype)


def attention_map(model: Model, text: str, layer: int, head: int, stage: str, max_len: int = MAX_DUMP_LEN) -> np.ndarray:
    """``T x T`` slice of one attention stage for ``text`` (BOS is prepended)."""
    if stage not in STAGES:
        raise InputError(f"unknown stage {stage!r}; choose from {sorted(STAGES)}")
    if not 0 <= layer < len(model.blocks):
        raise InputError(f"layer {layer} out of range [0, {len(model.blocks)})")
    if not 0 <= head < model.config.n_heads:
        raise InputError(f"head {head} out of range [0, {model.config.n_heads})")
    ids = toytask.encode_text(text)
    if len(ids) > max_len:
        raise InputError(f"sequence length {len(ids)} exceeds dump cap {max_len}; raise the cap to override")
    traces: list[dict] = []
    with no_grad():
        model.forward(ids, traces)
    cube = traces[layer].get(STAGES[stage])
    if cube is None:
        raise InputError(f"stage {stage!r} is not computed by layer {layer}")
    return np.array(cube[head])


def dump_attention(source, text: str, layer: int, head: int, stage: str, out_path, max_len: int = MAX_DUMP_LEN,
                   svg: bool = True) -> list[Path]:
    """Write the map as CSV (strict upper triangle is 0 or ``-inf``) and optionally an SVG heatmap."""
    model = source if isinstance(source, Model) else load_checkpoint(source)[0]
    amap = attention_map(model, text, layer, head, stage, max_len)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = [write_matrix_csv(amap, path, "query", "key")]
    if svg:
        from mtalab.plotting import heatmap

        labels = ["^"] + list(text)
        cmap = "viridis" if stage in ("post-softmax", "final") else "RdBu_r"
        written.append(heatmap(amap, path.with_suffix(".svg"), labels, labels, f"layer {layer} head {head} {stage}",
                               "key", "query", cmap=cmap))
    return written


def block_mass(amap: np.ndarray, sample: toytask.ToySample, query_pos: int) -> float:
    """Attention mass of row ``query_pos`` that lands inside the target block (positions include BOS)."""
    blocks = sample.blocks
    start = 1
    for b in blocks:
        if b == sample.target:
            break
        start += len(b) + 1
    return float(amap[query_pos, start:start + len(sample.target)].sum())
