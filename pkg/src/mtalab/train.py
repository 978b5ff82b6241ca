"""Training loop, evaluation and multi-seed architecture comparison for the toy task."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mtalab import toytask
from mtalab.checkpoint import load_checkpoint, save_checkpoint
from mtalab.core import Tape, precision
from mtalab.errors import ConfigError, NumericError
from mtalab.model import Model, ModelConfig, build_model
from mtalab.optim import AdamW, TrainState, adamw_step, cosine_lr


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 100_000
    learning_rate: float = 3e-4
    warmup_steps: int = 200
    final_lr_frac: float = 0.1
    weight_decay: float = 0.0
    grad_clip_norm: float | None = 1.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    precision: str = "float32"
    variant: str = "all"
    N: int = 5
    L: int = 2
    max_blocks: int = 50
    n_train: int = 1_000_000
    n_test: int = 1_000
    data_seed: int = 1234
    eval_every: int = 1000
    log_every: int = 10
    checkpoint_every: int = 1000
    micro_batch: int = 8

    def __post_init__(self):
        for name in ("batch_size", "total_steps", "n_train", "n_test", "eval_every", "micro_batch", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.variant not in toytask.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 1 <= self.L < self.N <= 26:
            raise ConfigError(f"need 1 <= L < N <= 26, got N={self.N}, L={self.L}")

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """1M training sequences, 100k steps."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """100k training sequences, 25k steps."""
        kw.setdefault("total_steps", 25_000)
        kw.setdefault("n_train", 100_000)
        return cls(**kw)

    @property
    def hyper(self) -> AdamW:
        return AdamW(lr=self.learning_rate, weight_decay=self.weight_decay, grad_clip=self.grad_clip_norm)

    def task_key(self) -> tuple:
        return (self.N, self.L, self.max_blocks, self.n_train, self.n_test, self.data_seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def batch_indices(data_seed: int, run_seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Sample indices for ``step``; a pure function of its arguments so resumed runs see the same batches."""
    rng = np.random.default_rng(np.random.SeedSequence([data_seed, run_seed, 2, step]))
    return rng.integers(0, n, size=batch_size)


def loss_and_grads(model: Model, samples, variant: str, micro_batch: int) -> tuple[float, dict[str, np.ndarray]]:
    """Masked cross-entropy over answer tokens of ``samples`` and its gradients.

    The batch is split into chunks of ``micro_batch`` samples; each chunk's
    mean loss is reweighted by its share of answer tokens so the sum equals
    the loss of the whole batch.
    """
    total = sum(len(s.answers[variant]) for s in samples)
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    params = model.named_parameters()
    for start in range(0, len(samples), micro_batch):
        chunk = samples[start:start + micro_batch]
        inputs, targets, mask = toytask.collate(chunk, variant, model.config.max_seq_len)
        part = model.loss(inputs, targets, mask) * (int(mask.sum()) / total)
        loss += float(part.data)
        g = Tape(part).gradients()
        for name, p in params:
            gp = g.get(id(p))
            if gp is None:
                continue
            grads[name] = gp if name not in grads else grads[name] + gp
    return loss, grads


def _write_jsonl(path: Path | None, rec: dict) -> None:
    if path is None:
        return
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def train(
    model: Model,
    train_set: list,
    test_set: list,
    cfg: TrainConfig,
    run_seed: int = 0,
    out_dir=None,
    state: TrainState | None = None,
    stop_at: int | None = None,
) -> dict:
    """Train ``model`` in place and return a run report.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per logged
    step), ``last_good.ckpt`` every ``checkpoint_every`` steps and at the end,
    and ``loss.svg``. Passing ``state`` from a checkpoint resumes the run;
    ``stop_at`` halts early at that step (used to produce resume points).
    A non-finite loss or gradient raises NumericError; the previous
    checkpoint is left untouched.
    """
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if state is None and metrics_path.exists():
            metrics_path.unlink()
    state = state or TrainState(data_seed=cfg.data_seed)
    hyper = cfg.hyper
    log = []
    evals = []
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    with precision(cfg.precision):
        while state.step < end:
            step = state.step
            idx = batch_indices(cfg.data_seed, run_seed, step, len(train_set), cfg.batch_size)
            loss, grads = loss_and_grads(model, [train_set[i] for i in idx], cfg.variant, cfg.micro_batch)
            if not math.isfinite(loss):
                raise NumericError(f"loss became {loss} at step {step}; last good checkpoint kept")
            lr = cosine_lr(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps, cfg.final_lr_frac)
            norm = adamw_step(model.params, grads, state, hyper, lr=lr)
            rec = {"step": state.step, "loss": loss, "lr": lr, "grad_norm": norm}
            if state.step % cfg.eval_every == 0 or state.step == cfg.total_steps:
                err = toytask.eval_error(model, test_set, cfg.variant, batch_size=cfg.micro_batch)
                rec["eval_error"] = err
                state.metrics["last_eval_error"] = err
                state.metrics["best_eval_error"] = min(err, state.metrics.get("best_eval_error", err))
                evals.append((state.step, err))
            if state.step % cfg.log_every == 0 or "eval_error" in rec:
                log.append(rec)
                _write_jsonl(metrics_path, rec)
            if out is not None and (state.step % cfg.checkpoint_every == 0 or state.step == end):
                save_checkpoint(model, state, out / "last_good.ckpt")
    report = {
        "run_seed": run_seed,
        "steps": state.step,
        "final_error": state.metrics.get("last_eval_error"),
        "log": log,
        "evals": evals,
    }
    if out is not None:
        with (out / "summary.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run_seed", "variant", "steps", "final_error", "best_error"])
            w.writerow([run_seed, cfg.variant, state.step, report["final_error"], state.metrics.get("best_eval_error")])
    if out is not None and log:
        from mtalab.plotting import loss_curve

        loss_curve([r["step"] for r in log], [r["loss"] for r in log], out / "loss.svg", evals=evals)
    return report


def resume(path, train_set, test_set, cfg: TrainConfig, run_seed: int = 0, out_dir=None, stop_at=None):
    """Continue a run from a checkpoint written by :func:`train`."""
    model, state = load_checkpoint(path)
    report = train(model, train_set, test_set, cfg, run_seed, out_dir, state=state, stop_at=stop_at)
    return model, report


def run_seeds(model_cfg: ModelConfig, cfg: TrainConfig, train_set, test_set, out_dir=None) -> list[float]:
    """Final test error for each seed in ``cfg.seeds``; the seed drives initialisation and batch order."""
    errors = []
    for seed in cfg.seeds:
        with precision(cfg.precision):
            model = build_model(dataclasses.replace(model_cfg, seed=seed))
        sub = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        report = train(model, train_set, test_set, cfg, run_seed=seed, out_dir=sub)
        errors.append(report["final_error"])
    return errors


def summarize(errors: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    a = np.asarray(errors, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def compare_architectures(
    archs: dict[str, tuple[ModelConfig, TrainConfig]],
    variants=toytask.VARIANTS,
    out_dir=None,
    datasets: dict | None = None,
) -> list[dict]:
    """Mean and std test error per architecture and variant over each config's seeds.

    Every architecture must share the task parameters and seeds. Writes
    ``comparison.csv``, ``comparison.txt`` and ``comparison.svg`` under
    ``out_dir`` when given.
    """
    if len(archs) < 2:
        raise ConfigError("compare needs at least two architectures")
    cfgs = [c for _, c in archs.values()]
    if len({c.task_key() for c in cfgs}) != 1:
        raise ConfigError("architectures disagree on task parameters (N, L, max_blocks, sizes, data seed)")
    if len({tuple(c.seeds) for c in cfgs}) != 1:
        raise ConfigError("architectures must share the same seeds")
    base = cfgs[0]
    if datasets is None:
        datasets = {"data": toytask.gen_dataset(base.N, base.L, base.n_train, base.n_test, base.data_seed, base.max_blocks)}
    train_set, test_set = datasets["data"]
    rows = []
    for name, (mcfg, tcfg) in archs.items():
        for variant in variants:
            run_cfg = dataclasses.replace(tcfg, variant=variant)
            sub = Path(out_dir) / name / variant if out_dir is not None else None
            errs = run_seeds(mcfg, run_cfg, train_set, test_set, sub)
            mean, std = summarize(errs)
            rows.append({"arch": name, "variant": variant, "mean": mean, "std": std, "errors": errs})
    if out_dir is not None:
        write_comparison(rows, out_dir)
    return rows


def format_comparison(rows: list[dict]) -> str:
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    archs = list(dict.fromkeys(r["arch"] for r in rows))
    lines = ["arch".ljust(12) + "".join(v.rjust(18) for v in variants)]
    for a in archs:
        by = {r["variant"]: r for r in rows if r["arch"] == a}
        cells = [f"{by[v]['mean']:.1f} +- {by[v]['std']:.1f}".rjust(18) if v in by else "-".rjust(18) for v in variants]
        lines.append(a.ljust(12) + "".join(cells))
    return "\n".join(lines)


def write_comparison(rows: list[dict], out_dir) -> list[Path]:
    from mtalab.plotting import error_bars

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "comparison.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arch", "variant", "mean_error", "std_error", "per_seed_errors"])
        for r in rows:
            w.writerow([r["arch"], r["variant"], repr(r["mean"]), repr(r["std"]), ";".join(repr(e) for e in r["errors"])])
    txt = out / "comparison.txt"
    txt.write_text(format_comparison(rows) + "\n")
    svg = error_bars(rows, out / "comparison.svg")
    return [csv_path, txt, svg]
