"""Command-line entry point: ``mtalab <subcommand> [flags]``.

Settings come from built-in defaults, then an optional ``--config`` file
(``key = value`` lines under ``[section]`` headers), then explicit flags.
Every run writes ``resolved_config.ini`` and ``manifest.json`` (sha256 of
each output) into ``--out``. Failures print one line,
``error: <category>: <message>``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from mtalab import toytask
from mtalab.errors import ConfigError, InputError, MTAError

EXIT_ERROR, EXIT_USAGE, EXIT_IO = 1, 2, 3
MODULE_SECTIONS = ("global", "data", "model", "train", "analysis")


class UsageError(Exception):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fraction(s: str) -> float:
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a fraction: {s!r}") from exc


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {s!r}") from exc


def _str_list(s: str) -> list[str]:
    return [x.strip() for x in str(s).split(",") if x.strip()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_task(p):
    p.add_argument("--N", type=int, default=5, help="block length")
    p.add_argument("--L", type=int, default=2, help="question letters")
    p.add_argument("--max-blocks", type=int, default=50)
    p.add_argument("--data-seed", type=int, default=1234)


def _add_model(p):
    p.add_argument("--arch", choices=["baseline", "mta"], default="mta")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--model-dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=2)


def _add_train(p):
    p.add_argument("--preset", choices=["desk", "full"], default="desk")
    p.add_argument("--variant", choices=toytask.VARIANTS, default="all")
    p.add_argument("--steps", type=int, default=None, help="override the preset step count")
    p.add_argument("--n-train", type=int, default=None, help="override the preset training-set size")
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--micro-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--eval-every", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=10)


def build_parser() -> _Parser:
    parser = _Parser(prog="mtalab", description="Multi-token attention verification lab")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=["float32", "float64"], default="float32")
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None, help="key = value config file")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write train/test JSON-lines datasets")
    p.add_argument("--n", type=int, default=1000, help="training samples")
    p.add_argument("--n-test", type=int, default=100)
    _add_task(p)

    p = sub.add_parser("train", parents=[common], help="train one architecture on one variant")
    _add_task(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, default=None, help="halt (with a checkpoint) at this step")

    p = sub.add_parser("eval", parents=[common], help="test error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", choices=toytask.VARIANTS, default="all")
    p.add_argument("--data", default=None, help="JSON-lines dataset; generated from the task flags when absent")
    p.add_argument("--n-test", type=int, default=1000)
    _add_task(p)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of a small all-stage model")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("inspect-kernels", parents=[common], help="export stage kernels as CSV and SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--svg", type=_bool, default=True)

    p = sub.add_parser("dump-attention", parents=[common], help="export one attention map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--stage", choices=["logits", "pre-softmax-conv", "post-softmax", "final"], default="final")
    p.add_argument("--max-len", type=int, default=1024)
    p.add_argument("--svg", type=_bool, default=True)

    p = sub.add_parser("count-params", parents=[common], help="extra parameters of an MTA configuration")
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--head-dim", type=int, default=96)
    p.add_argument("--c-q", type=int, default=6)
    p.add_argument("--c-k", type=int, default=11)
    p.add_argument("--c-h", type=int, default=16)
    p.add_argument("--fraction", type=_fraction, default=0.25, help="share of layers with key-query conv, 1/n")
    p.add_argument("--stages", type=_str_list, default=["kq_pre", "kq_post", "head_pre", "head_post"])
    p.add_argument("--norm-mode", default="scalar_gating")
    p.add_argument("--vocab", type=int, default=128256)
    p.add_argument("--ffn-multiple", type=int, default=256)
    p.add_argument("--tie-embeddings", type=_bool, default=True)

    p = sub.add_parser("compare", parents=[common], help="multi-seed baseline vs MTA comparison")
    _add_task(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--archs", type=_str_list, default=["baseline", "mta"])
    p.add_argument("--variants", type=_str_list, default=list(toytask.VARIANTS))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _all_dests(parser) -> set[str]:
    out = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                out |= {a.dest for a in sp._actions}
    return out


def read_config(path, command: str, sub, known_anywhere: set[str]) -> dict:
    """Values from a config file that apply to ``command``, converted with the flag's type."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{path} line {exc.lineno}: key outside any [section]: {exc.line.strip()!r}") from None
    except configparser.ParsingError as exc:
        lineno, _ = exc.errors[0]
        raise ConfigError(f"{path} line {lineno}: expected 'key = value'") from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", "?")
        raise ConfigError(f"{path} line {line}: {exc.message}") from None
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    actions = {a.dest: a for a in sub._actions}
    values = {}
    for section in cp.sections():
        strict = section in ("global", command)
        if not strict and section not in MODULE_SECTIONS and section not in _COMMANDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if section in _COMMANDS and section != command:
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest in ("config", "help"):
                continue
            if dest not in actions:
                if strict or dest not in known_anywhere:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                continue
            action = actions[dest]
            try:
                val = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from None
            if action.choices is not None and val not in action.choices:
                raise ConfigError(f"{path}: {key!r} must be one of {list(action.choices)}")
            values[dest] = val
    return values


_COMMANDS = ("gen-data", "train", "eval", "grad-check", "inspect-kernels", "dump-attention", "count-params", "compare")


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        values = read_config(args.config, args.command, sub, _all_dests(parser))
        sub.set_defaults(**values)
        # required flags supplied by the file must not trip argparse
        for a in sub._actions:
            if a.dest in values:
                a.required = False
        args = parser.parse_args(argv)
    return args


def write_resolved(args, out: Path) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    section = {}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "config") or v is None:
            continue
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        section[k.replace("_", "-")] = str(v)
    cp[args.command] = section
    path = out / "resolved_config.ini"
    with path.open("w", encoding="utf-8") as f:
        f.write(f"# mtalab {args.command}; rerun with: mtalab {args.command} --config {path.name}\n")
        cp.write(f)
    return path


def write_manifest(out: Path) -> Path:
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries.append({"path": p.relative_to(out).as_posix(), "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                            "bytes": p.stat().st_size})
    path = out / "manifest.json"
    path.write_text(json.dumps({"artifacts": entries}, indent=1) + "\n")
    return path


def _train_config(args, variant=None, seeds=None):
    from mtalab.train import TrainConfig

    kw = dict(
        batch_size=args.batch_size, learning_rate=args.lr, warmup_steps=args.warmup,
        weight_decay=args.weight_decay, grad_clip_norm=args.clip if args.clip > 0 else None,
        seeds=seeds or [args.seed], precision=args.precision, variant=variant or args.variant,
        N=args.N, L=args.L, max_blocks=args.max_blocks, n_test=args.n_test, data_seed=args.data_seed,
        eval_every=args.eval_every, log_every=args.log_every, micro_batch=args.micro_batch,
    )
    if args.steps is not None:
        kw["total_steps"] = args.steps
        kw["checkpoint_every"] = min(1000, args.steps)
    if args.n_train is not None:
        kw["n_train"] = args.n_train
    return TrainConfig.desk(**kw) if args.preset == "desk" else TrainConfig.full(**kw)


def _model_config(args, arch=None):
    from mtalab.model import ModelConfig

    return ModelConfig.toy(
        arch or args.arch, block_size=args.N, n_layers=args.layers, model_dim=args.model_dim, n_heads=args.heads,
        vocab_size=toytask.VOCAB_SIZE, max_seq_len=toytask.max_encoded_len(args.N, args.L, args.max_blocks),
        seed=args.seed,
    )


def cmd_gen_data(args, out: Path) -> None:
    train, test = toytask.gen_dataset(args.N, args.L, args.n, args.n_test, args.seed, args.max_blocks)
    toytask.save_dataset(train, out / "train.jsonl")
    toytask.save_dataset(test, out / "test.jsonl")
    print(f"train_samples={len(train)} test_samples={len(test)}")


def cmd_train(args, out: Path) -> None:
    from mtalab.core import precision
    from mtalab.model import build_model
    from mtalab.train import resume, train

    cfg = _train_config(args)
    train_set, test_set = toytask.gen_dataset(cfg.N, cfg.L, cfg.n_train, cfg.n_test, cfg.data_seed, cfg.max_blocks)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    if args.resume:
        _, report = resume(args.resume, train_set, test_set, cfg, run_seed=args.seed, out_dir=out,
                           stop_at=args.stop_at)
    else:
        with precision(cfg.precision):
            model = build_model(_model_config(args))
        report = train(model, train_set, test_set, cfg, run_seed=args.seed, out_dir=out, stop_at=args.stop_at)
    print(f"steps={report['steps']} final_error={report['final_error']}")


def cmd_eval(args, out: Path) -> None:
    from mtalab.checkpoint import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    if args.data:
        samples = toytask.load_dataset(args.data)
    else:
        samples = toytask.gen_dataset(args.N, args.L, 1, args.n_test, args.data_seed, args.max_blocks)[1]
    err = toytask.eval_error(model, samples, args.variant)
    (out / "eval.json").write_text(json.dumps({"variant": args.variant, "n": len(samples), "error": err}) + "\n")
    print(f"variant={args.variant} samples={len(samples)} error={err:.2f}")


def cmd_grad_check(args, out: Path) -> int:
    from mtalab.checks import model_grad_check

    err, n = model_grad_check(args.layers, args.model_dim, args.heads, args.seq_len, args.samples, args.seed)
    ok = err < args.tolerance
    (out / "grad_check.json").write_text(json.dumps({"max_rel_error": err, "coordinates": n, "pass": ok}) + "\n")
    print(f"coordinates={n} max_rel_error={err:.3e} tolerance={args.tolerance:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_ERROR


def cmd_inspect_kernels(args, out: Path) -> None:
    from mtalab.analysis import inspect_kernels

    files = inspect_kernels(args.checkpoint, out / "kernels", svg=args.svg)
    print(f"wrote {len(files)} files under {out / 'kernels'}")


def cmd_dump_attention(args, out: Path) -> None:
    from mtalab.analysis import dump_attention

    name = f"attn_L{args.layer}_h{args.head}_{args.stage}.csv"
    files = dump_attention(args.checkpoint, args.text, args.layer, args.head, args.stage, out / name,
                           max_len=args.max_len, svg=args.svg)
    print("wrote " + " ".join(str(f) for f in files))


def cmd_count_params(args, out: Path) -> None:
    from mtalab.model import ModelConfig, verify_param_count

    unknown = set(args.stages) - {"kq_pre", "kq_post", "head_pre", "head_post"}
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    cfg = ModelConfig.mta(
        args.layers, args.heads * args.head_dim, args.heads, c_q=args.c_q, c_k=args.c_k, c_h=args.c_h,
        kq_layer_fraction=args.fraction, kq_pre="kq_pre" in args.stages, kq_post="kq_post" in args.stages,
        head_pre="head_pre" in args.stages, head_post="head_post" in args.stages, norm_mode=args.norm_mode,
        vocab_size=args.vocab, tie_embeddings=args.tie_embeddings, ffn_multiple_of=args.ffn_multiple,
    )
    counts = verify_param_count(cfg)
    (out / "param_count.json").write_text(json.dumps(counts, indent=1) + "\n")
    print(f"extra_params={counts['extra']:,}")
    print(f"formula={counts['formula']:,} walked={counts['extra']:,}")
    print(f"baseline_params={counts['baseline']:,} total_params={counts['total']:,}")


def cmd_compare(args, out: Path) -> None:
    from mtalab.train import compare_architectures, format_comparison

    bad = set(args.variants) - set(toytask.VARIANTS)
    if bad:
        raise ConfigError(f"unknown variants {sorted(bad)}")
    archs = {a: (_model_config(args, a), _train_config(args, seeds=args.seeds)) for a in args.archs}
    rows = compare_architectures(archs, args.variants, out_dir=out)
    print(format_comparison(rows))


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "grad-check": cmd_grad_check,
    "inspect-kernels": cmd_inspect_kernels, "dump-attention": cmd_dump_attention,
    "count-params": cmd_count_params, "compare": cmd_compare,
}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        from mtalab.core import set_precision

        set_precision(args.precision)
        np.random.seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(args, out)
        code = HANDLERS[args.command](args, out) or 0
        write_manifest(out)
        return code
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MTAError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        from mtalab.core import set_precision

        set_precision("float32")


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
