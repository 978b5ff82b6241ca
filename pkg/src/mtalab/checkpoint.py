"""Binary checkpoint format.

Layout (all integers little-endian ``uint32``)::

    magic        8 bytes  b"MTACKPT\\0"
    version      u32      FORMAT_VERSION
    itemsize     u32      4 (float32) or 8 (float64) for every payload
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON: {"model_config": ..., "train_state": ...}
    n_records    u32
    records      n_records times:
                   name_len u32, name (UTF-8), rank u32, dims rank * u32,
                   payload prod(dims) * itemsize bytes, little-endian IEEE floats
    end marker   4 bytes  b"END\\0"

Model parameters use their registered names. Optimizer moments are stored as
``opt.m.<name>`` and ``opt.v.<name>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from mtalab.core import Tensor
from mtalab.errors import CheckpointError, ConfigError
from mtalab.model import Model, ModelConfig, parameter_shapes
from mtalab.optim import TrainState

MAGIC = b"MTACKPT\0"
END = b"END\0"
FORMAT_VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _write_record(buf, name: str, arr: np.ndarray, dtype) -> None:
    raw = name.encode("utf-8")
    buf.write(_u32(len(raw)))
    buf.write(raw)
    buf.write(_u32(arr.ndim))
    for n in arr.shape:
        buf.write(_u32(n))
    buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def save_checkpoint(model: Model, state: TrainState | None, path) -> Path:
    """Write ``model`` (and optimizer ``state`` if given) atomically to ``path``."""
    path = Path(path)
    dtype = model.params["tok_emb"].data.dtype
    state = state or TrainState()
    meta = json.dumps({"model_config": model.config.to_dict(), "train_state": state.meta()}, sort_keys=True)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(FORMAT_VERSION))
    buf.write(_u32(np.dtype(dtype).itemsize))
    raw_meta = meta.encode("utf-8")
    buf.write(_u32(len(raw_meta)))
    buf.write(raw_meta)
    records = [(n, p.data) for n, p in model.named_parameters()]
    records += [(f"opt.m.{n}", a) for n, a in sorted(state.m.items())]
    records += [(f"opt.v.{n}", a) for n, a in sorted(state.v.items())]
    buf.write(_u32(len(records)))
    for name, arr in records:
        _write_record(buf, name, arr, dtype)
    buf.write(END)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[Model, TrainState]:
    """Read a checkpoint written by :func:`save_checkpoint`. Nothing is returned unless every record is valid."""
    try:
        r = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path} is not an MTA checkpoint")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    itemsize = r.u32("itemsize")
    if itemsize not in (4, 8):
        raise CheckpointError(f"unsupported scalar width {itemsize}")
    dtype = np.dtype("<f4" if itemsize == 4 else "<f8")
    meta_len = r.u32("meta length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        config = ModelConfig.from_dict(meta["model_config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc

    records: dict[str, np.ndarray] = {}
    n = r.u32("record count")
    for _ in range(n):
        name_len = r.u32("record name length")
        name = r.take(name_len, "record name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(count * itemsize, f"payload of {name}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.take(len(END), "end marker") != END:
        raise CheckpointError("missing end marker; checkpoint is truncated or corrupt")

    expected = dict(parameter_shapes(config))
    params = {}
    for name, shape in expected.items():
        if name not in records:
            raise CheckpointError(f"record {name!r} missing from checkpoint")
        if records[name].shape != tuple(shape):
            raise CheckpointError(f"record {name!r} has shape {records[name].shape}, config expects {shape}")
        params[name] = Tensor(records[name], requires_grad=True, name=name, dtype=records[name].dtype)
    extra = [k for k in records if k not in expected and not k.startswith("opt.")]
    if extra:
        raise CheckpointError(f"record {extra[0]!r} is not a parameter of the stored config")

    ts = meta.get("train_state", {})
    state = TrainState(step=int(ts.get("step", 0)), data_seed=int(ts.get("data_seed", 0)), metrics=ts.get("metrics", {}))
    for key, arr in records.items():
        if key.startswith("opt."):
            _, which, pname = key.split(".", 2)
            if pname not in expected or arr.shape != tuple(expected[pname]):
                raise CheckpointError(f"record {key!r} does not match parameter {pname!r}")
            (state.m if which == "m" else state.v)[pname] = arr.copy()
    return Model(config, params), state
