import numpy as np
import pytest

from mtalab import toytask
from mtalab.errors import ConfigError, GenerationError, InputError
from mtalab.toytask import (
    VOCAB_SIZE,
    collate,
    decode,
    encode,
    eval_error,
    gen_dataset,
    gen_sample,
    load_dataset,
    matching_blocks,
    parse_sample,
    sample_rng,
    save_dataset,
)


def brute_force_targets(text):
    """Independent scan: blocks containing every question letter."""
    body, question = text.split("#")
    hits = []
    for block in body.split("."):
        if all(block.count(c) >= 1 for c in question):
            hits.append(block)
    return hits


def test_vocab():
    assert VOCAB_SIZE == 30
    assert len(set(toytask.SYMBOLS)) == 30
    assert [toytask.STOI[c] for c in "az.#"] == [0, 25, 26, 27]


def test_example_sequence():
    s = parse_sample("hjnvt.qfjgt.whftb.bjtpq.pxjvf.ulhik.qoiax#pb")
    assert s.target == "bjtpq"
    assert s.answers == {"all": "bjtpq", "first": "b", "last": "q"}


def test_single_block_is_target():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = gen_sample(5, 2, 1, rng)
        assert s.block_count == 1 and s.text.split("#")[0] == s.target


def test_uniqueness_scan_10k():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        s = gen_sample(5, 2, 50, rng)
        hits = brute_force_targets(s.text)
        assert hits == [s.target]
        assert set(s.question) <= set(s.target)
        assert len(set(s.question)) == 2
        assert all(len(b) == 5 and b.isalpha() and b.islower() for b in s.blocks)


def test_block_count_covers_range():
    rng = np.random.default_rng(1)
    counts = {gen_sample(5, 2, 4, rng).block_count for _ in range(400)}
    assert counts == {1, 2, 3, 4}


def test_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        gen_sample(5, 5, 10, rng)
    with pytest.raises(ConfigError):
        gen_sample(5, 2, 51, rng)
    with pytest.raises(ConfigError):
        gen_dataset(5, 2, 0, 10, 0)


def test_pathological_params_raise(monkeypatch):
    # a 26-letter block contains any given letter with probability ~0.64, so 3 retries per distractor run out
    monkeypatch.setattr(toytask, "MAX_RETRIES", 3)
    with pytest.raises(GenerationError):
        for seed in range(50):
            gen_sample(26, 1, 50, np.random.default_rng(seed))


def test_dataset_reproducible_and_disjoint():
    a = gen_dataset(5, 2, 300, 100, seed=3)
    b = gen_dataset(5, 2, 300, 100, seed=3)
    assert [s.text for s in a[0]] == [s.text for s in b[0]]
    assert [s.text for s in a[1]] == [s.text for s in b[1]]
    assert not {s.text for s in a[0]} & {s.text for s in a[1]}
    c = gen_dataset(5, 2, 300, 100, seed=4)
    assert [s.text for s in a[0]] != [s.text for s in c[0]]


def test_sample_streams_independent_of_order():
    s1 = gen_sample(5, 2, 10, sample_rng(9, 42))
    _ = gen_sample(5, 2, 10, sample_rng(9, 41))
    assert gen_sample(5, 2, 10, sample_rng(9, 42)) == s1


@pytest.mark.parametrize("variant,n_answer", [("all", 5), ("first", 1), ("last", 1)])
def test_encode_mask(variant, n_answer):
    s = parse_sample("abcde.fghij#ab")
    ids, mask = encode(s, variant)
    assert ids[0] == toytask.BOS_ID
    assert mask.sum() == n_answer
    assert mask[-n_answer:].all()
    assert decode(ids) == s.text + s.answers[variant]
    assert decode(ids[:-n_answer]) == s.text


def test_encode_too_long():
    s = parse_sample("abcde.fghij#ab")
    with pytest.raises(InputError):
        encode(s, "all", max_seq_len=10)
    assert toytask.max_encoded_len(5, 2, 2) == len(encode(s, "all")[0])


def test_collate_shifts_targets():
    samples = [parse_sample("abcde#ab"), parse_sample("abcde.fghij#fg")]
    inputs, targets, mask = collate(samples, "last")
    assert inputs.shape == targets.shape == mask.shape == (2, 15)
    assert decode(targets[0][mask[0]]) == "e"
    assert decode(targets[1][mask[1]]) == "j"
    assert (inputs[0, 9:] == toytask.PAD_ID).all()


def oracle_predictor(samples, variant):
    def predict(inputs, mask):
        _, targets, _ = collate(samples, variant)
        return targets
    return predict


def test_oracle_predictor_zero_error():
    _, test = gen_dataset(5, 2, 1, 50, seed=0, max_blocks=5)
    assert eval_error(oracle_predictor(test, "all"), test, "all", batch_size=len(test)) == 0.0


def test_one_wrong_token_fails_sample():
    samples = [parse_sample("abcde#ab"), parse_sample("vwxyz#yz")]
    _, targets, mask = collate(samples, "all")

    def predict(inputs, m):
        out = targets.copy()
        out[1, np.flatnonzero(mask[1])[2]] = 0
        return out

    assert eval_error(predict, samples, "all") == 50.0


def test_uniform_random_predictor_last():
    _, test = gen_dataset(5, 2, 1, 10_000, seed=11, max_blocks=3)
    rng = np.random.default_rng(0)
    err = eval_error(lambda inputs, mask: rng.integers(0, 26, size=inputs.shape), test, "last", batch_size=2048)
    assert abs(err - 100 * (1 - 1 / 26)) < 1.0


def test_empty_test_set():
    with pytest.raises(InputError):
        eval_error(lambda i, m: i, [], "all")


def test_dataset_file_round_trip(tmp_path):
    train, _ = gen_dataset(5, 2, 20, 1, seed=0, max_blocks=6)
    path = save_dataset(train, tmp_path / "d.jsonl")
    assert load_dataset(path) == [parse_sample(s.text) for s in train]
    lines = path.read_text().splitlines()
    assert '"schema_version": 1' in lines[0]
    path.write_text('{"schema_version": 2}\n')
    with pytest.raises(InputError):
        load_dataset(path)


def test_matching_blocks():
    assert matching_blocks(["abc", "bca", "xyz"], "ab") == [0, 1]
