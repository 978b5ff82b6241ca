"""Acceptance criteria, one test per criterion, each at its stated tolerance.

A one-line PASS/FAIL/SKIP verdict per criterion is printed in the pytest
terminal summary under "acceptance criteria".
"""

import itertools
import math
import os

import numpy as np
import pytest

from conftest import record, zeroed_terms
from mtalab import toytask
from mtalab.attention import NORM_MODES, AttentionConfig, MTAAttention, kq_conv_logits, kq_exact_logits
from mtalab.checkpoint import load_checkpoint
from mtalab.checks import model_grad_check
from mtalab.cli import run_cli
from mtalab.core import Tensor, precision, softmax_rows
from mtalab.model import ModelConfig, build_model, verify_param_count
from mtalab.train import TrainConfig, compare_architectures, resume, train


def numpy_attention(h, wq, wk, wv, wo, m):
    """Plain causal multi-head attention without rotary positions."""
    t, dim = h.shape
    d = dim // m
    q = (h @ wq).reshape(t, m, d).transpose(1, 0, 2)
    k = (h @ wk).reshape(t, m, d).transpose(1, 0, 2)
    v = (h @ wv).reshape(t, m, d).transpose(1, 0, 2)
    s = q @ k.transpose(0, 2, 1) / math.sqrt(d)
    s = np.where(np.tril(np.ones((t, t), bool)), s, -np.inf)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    return (a @ v).transpose(1, 0, 2).reshape(t, dim) @ wo, a


def softmax_causal(s):
    t = s.shape[-1]
    s = np.where(np.tril(np.ones((t, t), bool)), s, -np.inf)
    a = np.exp(s - s.max(-1, keepdims=True))
    return a / a.sum(-1, keepdims=True)


DESK_ENV = "MTA_DESK_SCALE"


def test_criterion_1_toy_trend(tmp_path):
    """Desk-scale baseline vs MTA comparison on the block-search task (opt-in: hours of compute)."""
    if os.environ.get(DESK_ENV) != "1":
        record(1, None, f"desk-scale training not run; set {DESK_ENV}=1 to run "
                        "(3 seeds x 3 variants x 2 archs x 25k steps)")
        pytest.skip(f"set {DESK_ENV}=1 to run the desk-scale comparison")
    out = os.environ.get("MTA_DESK_OUT", str(tmp_path))
    tcfg = TrainConfig.desk()
    archs = {
        name: (ModelConfig.toy(name, block_size=5, max_seq_len=toytask.max_encoded_len(5, 2, 50)), tcfg)
        for name in ("baseline", "mta")
    }
    rows = compare_architectures(archs, out_dir=out)
    by = {(r["arch"], r["variant"]): r["mean"] for r in rows}
    mta_ok = all(by[("mta", v)] <= 1.0 for v in toytask.VARIANTS)
    gap_ok = all(by[("baseline", v)] >= 10 * by[("mta", v)] for v in ("all", "first"))
    detail = "  ".join(f"{a}/{v}={by[(a, v)]:.2f}%" for a, v in sorted(by))
    record(1, mta_ok and gap_ok, detail)
    assert mta_ok and gap_ok, detail


def test_criterion_2_param_count(tmp_path, capsys):
    code = run_cli(["count-params", "--layers", "24", "--heads", "16", "--head-dim", "96", "--c-q", "6",
                    "--c-k", "11", "--c-h", "16", "--fraction", "1/4", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    cfg = ModelConfig.mta(24, 1536, 16, c_q=6, c_k=11, c_h=16, kq_layer_fraction=0.25, kq_pre=True,
                          kq_post=True, head_pre=True, head_post=True, norm_mode="scalar_gating",
                          vocab_size=128256, tie_embeddings=True, ffn_multiple_of=256)
    counts = verify_param_count(cfg)
    delta = 876_583_320 - 876_553_728
    ok = (code == 0 and "extra_params=29,592" in out and counts["extra"] == counts["formula"] == delta == 29_592
          and counts["baseline"] == 876_553_728)
    record(2, ok, f"formula={counts['formula']} walked={counts['extra']} reference_delta={delta}")
    assert ok


def test_criterion_3_identity_reduction():
    rng = np.random.default_rng(30)
    worst = worst_ref = 0.0
    for n in range(100):
        m, d = 4, 4
        t = int(rng.integers(1, 65))
        cfg = AttentionConfig(m, d, c_q=int(rng.integers(1, 4)), c_k=int(rng.integers(1, 6)), c_h=2,
                              kq_enabled=True, kq_pre=True, kq_post=True, head_pre=True, head_post=True,
                              fused_3d=bool(n % 2), norm_mode="none")
        with precision("float64"):
            mta = MTAAttention.random(cfg, rng, std=0.3, kernel_init="identity", rope_base=None)
            base = MTAAttention(AttentionConfig(m, d), mta.wq, mta.wk, mta.wv, mta.wo, rope_base=None)
            h = rng.normal(size=(t, m * d))
            a = mta.forward(Tensor(h)).data
            b = base.forward(Tensor(h)).data
        ref, _ = numpy_attention(h, *(w.data for w in (mta.wq, mta.wk, mta.wv, mta.wo)), m)
        worst = max(worst, float(np.abs(a - b).max()))
        worst_ref = max(worst_ref, float(np.abs(b - ref).max()))
    ok = worst <= 1e-6 and worst_ref <= 1e-6
    record(3, ok, f"100 instances, T<=64, all stages at identity vs plain layer: max-abs={worst:.1e}; "
                  f"plain layer vs numpy attention: {worst_ref:.1e} (tol 1e-6)")
    assert ok


def stage_combos():
    for kq_pre, kq_post, head_pre, head_post in itertools.product([False, True], repeat=4):
        yield dict(kq_pre=kq_pre, kq_post=kq_post, head_pre=head_pre, head_post=head_post, fused_3d=False)
    for kq_post, head_post in itertools.product([False, True], repeat=2):
        yield dict(kq_pre=True, kq_post=kq_post, head_pre=True, head_post=head_post, fused_3d=True)


def test_criterion_4_causality():
    rng = np.random.default_rng(40)
    t = 9
    worst, cases = 0.0, 0
    for flags, norm in itertools.product(list(stage_combos()), NORM_MODES):
        cfg = AttentionConfig(4, 4, c_q=2, c_k=3, c_h=2, kq_enabled=True, norm_mode=norm, **flags)
        with precision("float64"):
            layer = MTAAttention.random(cfg, rng, std=0.3, layer_index=3)
            for _, p in layer.bank.named_parameters():
                p.data = p.data + rng.normal(0, 0.3, size=p.shape)
            h = rng.normal(size=(t, 16))
            ref = layer.forward(Tensor(h)).data
            for i in range(t - 1):
                h2 = h.copy()
                h2[i + 1:] = rng.normal(size=(t - i - 1, 16))
                out = layer.forward(Tensor(h2)).data
                worst = max(worst, float(np.abs(out[: i + 1] - ref[: i + 1]).max()))
        cases += 1
    ok = cases == 100 and worst == 0.0
    record(4, ok, f"{cases} stage/norm combinations, max-abs change at positions <= i: {worst:.1e} (tol 0)")
    assert ok


def test_criterion_5_stacked_equivalence():
    rng = np.random.default_rng(50)
    m, d, dim, t = 2, 4, 8, 8
    worst_post = worst_pre = 0.0
    for _ in range(50):
        with precision("float64"):
            post = MTAAttention.random(AttentionConfig(m, d, c_h=2, head_post=True), rng, std=0.4, rope_base=None)
            post.bank.head_post.data = rng.normal(size=(1, 2, 2))
            pre = MTAAttention.random(AttentionConfig(m, d, c_h=2, head_pre=True), rng, std=0.4, rope_base=None)
            pre.bank.head_pre.data = rng.normal(size=(1, 2, 2))
            h = rng.normal(size=(t, dim))
            out_post = post.forward(Tensor(h)).data
            out_pre = pre.forward(Tensor(h)).data

        # post-softmax mixing == one attention per source head with a rank-2d value/output pair
        wq, wk, wv, wo = (x.data for x in (post.wq, post.wk, post.wv, post.wo))
        w = post.bank.head_post.data[0]
        _, a = numpy_attention(h, wq, wk, wv, wo, m)
        wv_hat = np.concatenate([wv[:, g * d:(g + 1) * d] for g in range(m)], axis=1)
        stacked = np.zeros((t, dim))
        for src in range(m):
            wo_hat = np.concatenate([w[g, src] * wo[g * d:(g + 1) * d] for g in range(m)], axis=0)
            stacked += a[src] @ h @ wv_hat @ wo_hat
        worst_post = max(worst_post, float(np.abs(stacked - out_post).max()))

        # pre-softmax mixing == attention whose logits use stacked rank-2d query/key projections
        wq, wk, wv, wo = (x.data for x in (pre.wq, pre.wk, pre.wv, pre.wo))
        w = pre.bank.head_pre.data[0]
        wk_hat = np.concatenate([wk[:, s * d:(s + 1) * d] for s in range(m)], axis=1)
        stacked = np.zeros((t, dim))
        for g in range(m):
            wq_hat = np.concatenate([w[g, s] * wq[:, s * d:(s + 1) * d] for s in range(m)], axis=1)
            logits = h @ wq_hat @ wk_hat.T @ h.T / math.sqrt(d)
            stacked += softmax_causal(logits) @ h @ wv[:, g * d:(g + 1) * d] @ wo[g * d:(g + 1) * d]
        worst_pre = max(worst_pre, float(np.abs(stacked - out_pre).max()))
    ok = worst_post <= 1e-6 and worst_pre <= 1e-6
    record(5, ok, f"50 instances T=8: post-softmax max-abs={worst_post:.1e}, pre-softmax max-abs={worst_pre:.1e}")
    assert ok


def test_criterion_6_gradient_integrity():
    err, n = model_grad_check(n_layers=2, model_dim=32, n_heads=4, seq_len=8, n_samples=200, seed=60)
    ok = err < 1e-4 and n >= 200
    record(6, ok, f"2 layers D=32 T=8 all stages float64: {n} coordinates, max rel error={err:.2e} (tol 1e-4)")
    assert ok


def test_criterion_7_masking_superset():
    exact, double = zeroed_terms(6, 2, 3)
    superset = exact <= double
    rng = np.random.default_rng(70)
    worst = 0.0
    with precision("float64"):
        for _ in range(20):
            # zero band: every entry above the diagonal of the input cube is 0
            scores = np.tril(rng.normal(size=(2, 6, 6)))
            kern = rng.normal(size=(2, 2, 3))
            a = softmax_rows(Tensor(kq_exact_logits(scores, kern))).data
            b = softmax_rows(kq_conv_logits(Tensor(scores), Tensor(kern))).data
            worst = max(worst, float(np.abs(a - b).max()))
    ok = superset and worst <= 1e-6
    record(7, ok, f"T=6 c_q=2 c_k=3: exact drops {len(exact)} terms, double mask drops {len(double)} "
                  f"(superset={superset}); zero-band agreement max-abs={worst:.1e}")
    assert ok


def test_criterion_8_determinism_and_resume(tmp_path):
    blocks = 4
    data_a = toytask.gen_dataset(5, 2, 60, 10, seed=80, max_blocks=blocks)
    data_b = toytask.gen_dataset(5, 2, 60, 10, seed=80, max_blocks=blocks)
    same_data = data_a == data_b
    mcfg = ModelConfig.toy("mta", n_layers=2, model_dim=32, seed=8,
                           max_seq_len=toytask.max_encoded_len(5, 2, blocks))
    m1, m2 = build_model(mcfg), build_model(mcfg)
    same_params = all(np.array_equal(p.data, q.data) for p, q in zip(m1.parameters(), m2.parameters()))
    cfg = TrainConfig(total_steps=16, batch_size=8, micro_batch=4, learning_rate=3e-3, warmup_steps=4,
                      max_blocks=blocks, n_train=60, n_test=10, eval_every=4, log_every=1, checkpoint_every=4)
    r1 = train(m1, *data_a, cfg, out_dir=tmp_path / "a")
    r2 = train(m2, *data_b, cfg)
    same_traj = r1["log"] == r2["log"]
    resume_ok = True
    for k in (4, 8, 12):
        part = build_model(mcfg)
        train(part, *data_a, cfg, out_dir=tmp_path / f"r{k}", stop_at=k)
        stored, _ = load_checkpoint(tmp_path / f"r{k}" / "last_good.ckpt")
        model, rest = resume(tmp_path / f"r{k}" / "last_good.ckpt", *data_a, cfg)
        resume_ok &= rest["log"] == [r for r in r1["log"] if r["step"] > k]
        resume_ok &= all(np.array_equal(p.data, q.data) for p, q in zip(m1.parameters(), model.parameters()))
    ok = same_data and same_params and same_traj and resume_ok
    record(8, ok, f"datasets={same_data} params={same_params} trajectories={same_traj} "
                  f"resume@4,8,12 exact={resume_ok}")
    assert ok
