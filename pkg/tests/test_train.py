import dataclasses
import json

import numpy as np
import pytest

from mtalab import toytask
from mtalab.checkpoint import load_checkpoint
from mtalab.core import Tape
from mtalab.errors import ConfigError, NumericError
from mtalab.model import ModelConfig, build_model
from mtalab.train import (
    TrainConfig,
    compare_architectures,
    loss_and_grads,
    resume,
    summarize,
    train,
)

MAX_BLOCKS = 4


def tiny_model(arch="mta", seed=0):
    return build_model(ModelConfig.toy(arch, n_layers=2, model_dim=32, seed=seed,
                                       max_seq_len=toytask.max_encoded_len(5, 2, MAX_BLOCKS)))


def tiny_cfg(**kw):
    base = dict(total_steps=12, batch_size=6, micro_batch=3, learning_rate=3e-3, warmup_steps=3, max_blocks=MAX_BLOCKS,
                n_train=40, n_test=8, eval_every=4, log_every=1, checkpoint_every=4, seeds=[0])
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return toytask.gen_dataset(5, 2, 40, 8, seed=0, max_blocks=MAX_BLOCKS)


def test_presets():
    desk, full = TrainConfig.desk(), TrainConfig.full()
    assert (desk.total_steps, desk.n_train, desk.batch_size) == (25_000, 100_000, 64)
    assert (full.total_steps, full.n_train, full.batch_size) == (100_000, 1_000_000, 64)
    assert desk.seeds == [0, 1, 2] and desk.eval_every == 1000
    with pytest.raises(ConfigError):
        TrainConfig(seeds=[])
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_loss_ignores_non_answer_targets(data):
    model = tiny_model()
    inputs, targets, mask = toytask.collate(data[0][:4], "all")
    ref = model.loss(inputs, targets, mask).item()
    moved = np.where(mask, targets, (targets + 7) % 30)
    assert model.loss(inputs, moved, mask).item() == ref


def test_micro_batches_match_full_batch(data, f64):
    model = tiny_model()
    samples = data[0][:6]
    loss_full, g_full = loss_and_grads(model, samples, "all", micro_batch=6)
    loss_micro, g_micro = loss_and_grads(model, samples, "all", micro_batch=2)
    assert loss_micro == pytest.approx(loss_full, rel=1e-12)
    for k in g_full:
        np.testing.assert_allclose(g_micro[k], g_full[k], rtol=1e-9, atol=1e-14)


def test_overfit_ten_samples():
    train_set, _ = toytask.gen_dataset(5, 2, 10, 1, seed=0, max_blocks=MAX_BLOCKS)
    model = tiny_model()
    cfg = tiny_cfg(total_steps=300, batch_size=10, micro_batch=10, warmup_steps=20, eval_every=300, log_every=50)
    report = train(model, train_set, train_set, cfg)
    assert report["final_error"] == 0.0


def test_training_deterministic(data):
    reports = [train(tiny_model(), *data, tiny_cfg()) for _ in range(2)]
    assert reports[0]["log"] == reports[1]["log"]


def test_resume_matches_straight_run(tmp_path, data):
    cfg = tiny_cfg()
    straight = tiny_model()
    ref = train(straight, *data, cfg, out_dir=tmp_path / "a")
    part = tiny_model()
    train(part, *data, cfg, out_dir=tmp_path / "b", stop_at=4)
    model, rest = resume(tmp_path / "b" / "last_good.ckpt", *data, cfg, out_dir=tmp_path / "b")
    later = [r for r in ref["log"] if r["step"] > 4]
    assert rest["log"] == later
    for (_, p), (_, q) in zip(straight.named_parameters(), model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    lines = [json.loads(x) for x in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    assert lines == ref["log"]


def test_run_outputs(tmp_path, data):
    train(tiny_model(), *data, tiny_cfg(), out_dir=tmp_path)
    for name in ("metrics.jsonl", "summary.csv", "loss.svg", "last_good.ckpt"):
        assert (tmp_path / name).exists()
    _, state = load_checkpoint(tmp_path / "last_good.ckpt")
    assert state.step == 12


def test_divergence_keeps_last_good(tmp_path, data, monkeypatch):
    import mtalab.train as tr

    model = tiny_model()
    cfg = tiny_cfg()
    train(model, *data, cfg, out_dir=tmp_path, stop_at=4)
    saved = (tmp_path / "last_good.ckpt").read_bytes()
    real = tr.loss_and_grads

    def poisoned(*a, **k):
        loss, grads = real(*a, **k)
        return float("nan"), grads

    monkeypatch.setattr(tr, "loss_and_grads", poisoned)
    _, state = load_checkpoint(tmp_path / "last_good.ckpt")
    with pytest.raises(NumericError, match="step 4"):
        train(model, *data, cfg, out_dir=tmp_path, state=state)
    assert (tmp_path / "last_good.ckpt").read_bytes() == saved


def test_summarize():
    assert summarize([3.0]) == (3.0, 0.0)
    mean, std = summarize([1.0, 3.0])
    assert mean == 2.0 and std == pytest.approx(np.sqrt(2.0))


def test_compare_identical_rows(tmp_path, data):
    cfg = tiny_cfg(total_steps=4, eval_every=4)
    mcfg = tiny_model().config
    rows = compare_architectures({"a": (mcfg, cfg), "b": (mcfg, cfg)}, variants=("last",), out_dir=tmp_path,
                                 datasets={"data": data})
    assert rows[0]["errors"] == rows[1]["errors"]
    assert rows[0]["std"] == 0.0
    assert (tmp_path / "comparison.csv").read_text().startswith("arch,variant,mean_error")
    assert (tmp_path / "comparison.svg").exists()


def test_compare_rejects_mismatched_tasks(data):
    mcfg = tiny_model().config
    with pytest.raises(ConfigError):
        compare_architectures({"a": (mcfg, tiny_cfg()), "b": (mcfg, tiny_cfg(N=6))}, datasets={"data": data})
    with pytest.raises(ConfigError):
        compare_architectures({"a": (mcfg, tiny_cfg())})
    with pytest.raises(ConfigError):
        compare_architectures({"a": (mcfg, tiny_cfg()), "b": (mcfg, dataclasses.replace(tiny_cfg(), seeds=[1]))},
                              datasets={"data": data})


def test_gradients_only_reach_params(data):
    model = tiny_model()
    inputs, targets, mask = toytask.collate(data[0][:2], "first")
    grads = Tape(model.loss(inputs, targets, mask)).gradients()
    assert set(grads) == {id(p) for p in model.parameters()}
