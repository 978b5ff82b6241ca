"""Block-search toy task: find the unique letter block holding every question letter.

A sample looks like ``hjnvt.qfjgt.bjtpq#pb``: random blocks of N lowercase
letters joined by '.', then '#', then L question letters. The answer is the
target block (variant ``all``), its first letter or its last letter.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from mtalab.errors import ConfigError, GenerationError, InputError

LETTERS = string.ascii_lowercase
BOS, PAD = "<bos>", "<pad>"
SYMBOLS = list(LETTERS) + [".", "#", BOS, PAD]
STOI = {s: i for i, s in enumerate(SYMBOLS)}
VOCAB_SIZE = len(SYMBOLS)
BOS_ID, PAD_ID = STOI[BOS], STOI[PAD]
VARIANTS = ("all", "first", "last")
SCHEMA_VERSION = 1
MAX_RETRIES = 1000


@dataclass(frozen=True)
class ToySample:
    text: str
    target: str
    answers: dict
    block_count: int
    N: int
    L: int
    uid: str = ""

    @property
    def blocks(self) -> list[str]:
        return self.text.split("#", 1)[0].split(".")

    @property
    def question(self) -> str:
        return self.text.split("#", 1)[1]


def _answers(target: str) -> dict:
    return {"all": target, "first": target[0], "last": target[-1]}


def matching_blocks(blocks: Iterable[str], question: str) -> list[int]:
    """Indices of blocks containing every question letter."""
    need = set(question)
    return [i for i, b in enumerate(blocks) if need <= set(b)]


def parse_sample(text: str) -> ToySample:
    """Build a sample from raw text, locating the target by brute force."""
    if text.count("#") != 1:
        raise InputError(f"sample text needs exactly one '#': {text!r}")
    body, question = text.split("#")
    blocks = body.split(".")
    hits = matching_blocks(blocks, question)
    if len(hits) != 1:
        raise InputError(f"expected exactly one target block, found {len(hits)}")
    target = blocks[hits[0]]
    return ToySample(text, target, _answers(target), len(blocks), len(target), len(question))


def _check_params(N: int, L: int, max_blocks: int) -> None:
    if not 1 <= L < N <= 26:
        raise ConfigError(f"need 1 <= L < N <= 26, got N={N}, L={L}")
    if not 1 <= max_blocks <= 50:
        raise ConfigError(f"max_blocks must be in [1, 50], got {max_blocks}")


def gen_sample(N: int, L: int, max_blocks: int, rng: np.random.Generator) -> ToySample:
    """One sample with a unique target block.

    The block count is uniform in [1, max_blocks]. Question letters are drawn
    without replacement from the target's distinct letters. Any other block
    that also contains them is redrawn.
    """
    _check_params(N, L, max_blocks)
    n_blocks = int(rng.integers(1, max_blocks + 1))

    def block() -> str:
        return "".join(LETTERS[i] for i in rng.integers(0, 26, size=N))

    for _ in range(MAX_RETRIES):
        target = block()
        distinct = sorted(set(target))
        if len(distinct) >= L:
            break
    else:
        raise GenerationError(f"could not draw a block with {L} distinct letters")
    question = "".join(distinct[i] for i in rng.permutation(len(distinct))[:L])
    need = set(question)
    pos = int(rng.integers(0, n_blocks))
    blocks = []
    for i in range(n_blocks):
        if i == pos:
            blocks.append(target)
            continue
        for _ in range(MAX_RETRIES):
            b = block()
            if not need <= set(b):
                break
        else:
            raise GenerationError(f"could not draw a distractor block avoiding {question!r}")
        blocks.append(b)
    text = ".".join(blocks) + "#" + question
    uid = hashlib.sha1(text.encode()).hexdigest()[:12]
    return ToySample(text, target, _answers(target), n_blocks, N, L, uid)


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for sample ``index`` of ``stream`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def gen_dataset(
    N: int, L: int, n_train: int, n_test: int, seed: int, max_blocks: int = 50
) -> tuple[list[ToySample], list[ToySample]]:
    """Train and test sets from disjoint per-sample streams; train texts never appear in test."""
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    test = [gen_sample(N, L, max_blocks, sample_rng(seed, i, stream=1)) for i in range(n_test)]
    held_out = {s.text for s in test}
    train: list[ToySample] = []
    i = 0
    while len(train) < n_train:
        s = gen_sample(N, L, max_blocks, sample_rng(seed, i, stream=0))
        i += 1
        if s.text not in held_out:
            train.append(s)
    return train, test


def max_encoded_len(N: int, L: int, max_blocks: int) -> int:
    """Longest ``encode`` output: BOS, blocks with separators, '#', question, answer."""
    return 1 + max_blocks * (N + 1) + L + N


def encode(sample: ToySample, variant: str = "all", max_seq_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``BOS + text + answer`` and a mask that is true on answer tokens only."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    answer = sample.answers[variant]
    chars = [BOS] + list(sample.text) + list(answer)
    if max_seq_len is not None and len(chars) > max_seq_len:
        raise InputError(f"encoded length {len(chars)} exceeds max_seq_len {max_seq_len}; lower max_blocks")
    try:
        ids = np.array([STOI[c] for c in chars], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"symbol {exc.args[0]!r} is not in the vocabulary") from exc
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(ids) - len(answer):] = True
    return ids, mask


def encode_text(text: str) -> np.ndarray:
    """BOS plus characters, for prompting a model with raw text."""
    try:
        return np.array([BOS_ID] + [STOI[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"symbol {exc.args[0]!r} is not in the vocabulary") from exc


def decode(ids) -> str:
    return "".join(SYMBOLS[i] for i in np.asarray(ids) if i not in (BOS_ID, PAD_ID))


def collate(samples: list[ToySample], variant: str, max_seq_len: int | None = None):
    """Right-padded ``(inputs, targets, mask)`` batch for next-token prediction.

    Position ``t`` of ``inputs`` predicts ``targets[t]``; ``mask[t]`` is true
    where ``targets[t]`` is an answer token.
    """
    encoded = [encode(s, variant, max_seq_len) for s in samples]
    T = max(len(ids) for ids, _ in encoded) - 1
    inputs = np.full((len(samples), T), PAD_ID, dtype=np.int64)
    targets = np.full((len(samples), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(samples), T), dtype=bool)
    for b, (ids, m) in enumerate(encoded):
        n = len(ids) - 1
        inputs[b, :n] = ids[:-1]
        targets[b, :n] = ids[1:]
        mask[b, :n] = m[1:]
    return inputs, targets, mask


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_predictor(model) -> Predictor:
    """Greedy argmax at every position of a teacher-forced batch."""
    def predict(inputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return model.predict(inputs)
    return predict


def eval_error(predictor, samples: list[ToySample], variant: str, batch_size: int = 64) -> float:
    """Percentage of samples with at least one wrong answer token.

    ``predictor`` is a model (anything with ``predict``) or a callable
    ``(inputs, mask) -> predicted ids`` shaped like ``inputs``. Answer tokens
    are scored teacher-forced, which for an exact-match criterion equals
    greedy decoding: the first wrong token already fails the sample.
    """
    if not samples:
        raise InputError("cannot evaluate on an empty test set")
    if hasattr(predictor, "predict"):
        predictor = model_predictor(predictor)
    wrong = 0
    for start in range(0, len(samples), batch_size):
        inputs, targets, mask = collate(samples[start:start + batch_size], variant)
        pred = np.asarray(predictor(inputs, mask))
        ok = np.where(mask, pred == targets, True).all(axis=1)
        wrong += int((~ok).sum())
    return 100.0 * wrong / len(samples)


def save_dataset(samples: list[ToySample], path) -> Path:
    """JSON-lines file; the first line is a header carrying the schema version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({"schema_version": SCHEMA_VERSION, "count": len(samples)}) + "\n")
        for s in samples:
            rec = {"text": s.text, "target": s.target, "N": s.N, "L": s.L, "answers": s.answers}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> list[ToySample]:
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        header = json.loads(f.readline() or "{}")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"{path}: unsupported dataset schema {header.get('schema_version')!r}")
        out = []
        for lineno, line in enumerate(f, start=2):
            try:
                rec = json.loads(line)
                s = parse_sample(rec["text"])
            except (ValueError, KeyError) as exc:
                raise InputError(f"{path}:{lineno}: bad record: {exc}") from exc
            out.append(s)
    return out


def sample_to_dict(s: ToySample) -> dict:
    return asdict(s)
