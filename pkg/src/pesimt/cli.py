"""Command-line entry point: ``pesimt {gen-data,train,translate,evaluate,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusError, SynthConfig, Vocab, generate_synthetic_corpus, load_parallel, read_lines,
    write_parallel,
)
from .evaluation import EvalRecord, average_lagging, bleu, default_top_sizes, sweep
from .model import Model, ModelConfig
from .policy import (
    DEFAULT_R, DEFAULT_RHO, PolicyConfig, fixed_decode, full_decode, pe_decode, read_trace_tsv,
    write_trace_tsv,
)
from .training import TrainConfig, train

log = logging.getLogger("pesimt")


class UsageError(Exception):
    """Bad input detected after argument parsing (missing file, bad value)."""


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def vocab_paths(checkpoint) -> tuple[Path, Path]:
    ckpt = Path(checkpoint)
    return ckpt.with_name(ckpt.name + ".src.vocab"), ckpt.with_name(ckpt.name + ".tgt.vocab")


def load_checkpoint(path) -> tuple[Model, Vocab, Vocab]:
    ckpt = _existing(path)
    sv_path, tv_path = vocab_paths(ckpt)
    return Model.load(ckpt), Vocab.load(_existing(sv_path)), Vocab.load(_existing(tv_path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        vocab_size=args.vocab_size, min_len=args.min_len, max_len=args.max_len,
        mapping_seed=args.mapping_seed, swap_prob=args.swap, insert_prob=args.insert,
        n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, pairs in generate_synthetic_corpus(cfg).items():
        write_parallel(pairs, out / split)
        print(f"{split}: {len(pairs)} pairs -> {out / split}.src/.tgt")
    return 0


def cmd_train(args) -> int:
    src, tgt = _existing(args.src), _existing(args.tgt)
    cfg = TrainConfig.from_file(_existing(args.config)) if args.config else TrainConfig()
    overrides = {
        "peak_lr": args.lr, "warmup_steps": args.warmup, "max_tokens": args.max_tokens,
        "max_epochs": args.max_epochs, "max_steps": args.max_steps, "time_budget": args.time_budget,
        "dropout": args.dropout, "path_mode": args.path_mode, "lambda_s": args.lambda_s,
        "lambda_t": args.lambda_t,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.seed = args.seed
    cfg.__post_init__()
    pairs, sv, tv, oov = load_parallel(src, tgt, min_freq=args.min_freq, shared=args.shared_vocab)
    print(f"{len(pairs)} pairs, vocab {len(sv)}/{len(tv)}, OOV src {oov['src']:.4f} tgt {oov['tgt']:.4f}")
    mc = ModelConfig(src_vocab=len(sv), tgt_vocab=len(tv), d_model=args.d_model, ffn_dim=4 * args.d_model,
                     layers=args.layers, heads=args.heads, routing_iters=args.routing_iters)
    result = train(pairs, mc, cfg, history_csv=args.history,
                   log_fn=None if args.quiet else (lambda msg: print(msg, flush=True)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    sv_path, tv_path = vocab_paths(out)
    sv.save(sv_path)
    tv.save(tv_path)
    print(f"trained {result.steps} steps / {result.epochs} epochs in {result.seconds:.0f}s -> {out}")
    return 0


def _decode_one(model, ids, args):
    if args.policy == "pe":
        return pe_decode(model, ids, PolicyConfig(k=args.k, rho=args.rho, r=args.r, max_len=args.max_len))
    if args.policy == "waitk":
        return fixed_decode(model, ids, args.k, args.max_len)
    return full_decode(model, ids, args.max_len)


def cmd_translate(args) -> int:
    model, sv, tv = load_checkpoint(args.checkpoint)
    sources = read_lines(_existing(args.input))
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir is not None:
        trace_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for n, toks in enumerate(sources):
        res = _decode_one(model, sv.encode(toks), args)
        lines.append(" ".join(tv.decode(res.tokens)))
        if trace_dir is not None:
            write_trace_tsv(res, trace_dir / f"{n:06d}.tsv", tv.itos)
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    hyps = [line.split() for line in _existing(args.hyp).read_text(encoding="utf-8").splitlines()]
    refs = read_lines(_existing(args.ref))
    if len(hyps) != len(refs):
        raise UsageError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    metrics = {"BLEU": bleu(hyps, refs), "sentences": len(refs)}
    if args.traces:
        if not args.source:
            raise UsageError("--traces needs --source to know the source lengths")
        sources = read_lines(_existing(args.source))
        trace_dir = _existing(args.traces)
        als = []
        for n, (src, hyp) in enumerate(zip(sources, hyps)):
            path = read_trace_tsv(_existing(trace_dir / f"{n:06d}.tsv"))
            als.append(average_lagging(np.minimum(path.g, len(src)), len(src), max(len(hyp), 1)))
        metrics["AL"] = float(np.mean(als))
    print(json.dumps(metrics, indent=None if args.compact else 2))
    return 0


def cmd_sweep(args) -> int:
    model, sv, tv = load_checkpoint(args.checkpoint)
    pairs, _, _, _ = load_parallel(_existing(args.src), _existing(args.tgt), vocabs=(sv, tv))
    if args.limit:
        pairs = pairs[: args.limit]
    grid = []
    for policy in args.policies:
        for k in args.k:
            if policy == "pe":
                grid.extend(("pe", k, rho) for rho in args.rho)
            else:
                grid.append((policy, k, None))
    overlap = None
    if args.overlap:
        n_t, n_s = default_top_sizes(pairs)
        overlap = (args.top_target or n_t, args.top_source or n_s)
    records = sweep(model, pairs, tv, grid, csv_path=args.out, overlap=overlap)
    for rec in records:
        print(_format_record(rec))
    return 0


def _format_record(rec: EvalRecord) -> str:
    extra = "" if rec.R_T is None else f" R_T={rec.R_T:.3f} R_S={rec.R_S:.3f}"
    rho = "" if rec.rho is None else f" rho={rec.rho:g}"
    return f"{rec.policy:6s} k={rec.k}{rho} AL={rec.AL:.3f} BLEU={rec.BLEU:.2f}{extra}"


# ---------------------------------------------------------------------------
# parser


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=("waitk", "pe", "full"), default="pe",
                   help="read/write policy (default: pe)")
    p.add_argument("--k", type=int, default=3, help="initial reads for pe, lag for wait-k (default: 3)")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO,
                   help=f"pe write threshold on the degree increase (default: {DEFAULT_RHO})")
    p.add_argument("--r", type=int, default=DEFAULT_R,
                   help=f"pe limit on consecutive reads (default: {DEFAULT_R})")
    p.add_argument("--max-len", type=int, default=None,
                   help="maximum output length (default: 2 * source length + 10)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=1, help="master random seed (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="pesimt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic parallel corpus")
    p.add_argument("--out", required=True, help="output directory for {train,dev,test}.{src,tgt}")
    p.add_argument("--vocab-size", type=int, default=64, help="source vocabulary size incl. reserved ids")
    p.add_argument("--min-len", type=int, default=5, help="shortest source sentence")
    p.add_argument("--max-len", type=int, default=12, help="longest source sentence")
    p.add_argument("--mapping-seed", type=int, default=0, help="seed of the token mapping permutation")
    p.add_argument("--swap", type=float, default=0.3, help="adjacent-swap probability")
    p.add_argument("--insert", type=float, default=0.15, help="function-token insertion probability")
    p.add_argument("--n-train", type=int, default=4000, help="training pairs")
    p.add_argument("--n-dev", type=int, default=200, help="development pairs")
    p.add_argument("--n-test", type=int, default=500, help="test pairs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model with disturbed-path training")
    p.add_argument("--src", required=True, help="training source file")
    p.add_argument("--tgt", required=True, help="training target file")
    p.add_argument("--out", required=True, help="checkpoint path (.npz); vocab files are written beside it")
    p.add_argument("--config", help="JSON file of training hyperparameters")
    p.add_argument("--history", help="CSV file for the per-step loss history")
    p.add_argument("--min-freq", type=int, default=5, help="vocabulary frequency threshold (default: 5)")
    p.add_argument("--shared-vocab", action="store_true", help="one vocabulary for both sides")
    p.add_argument("--d-model", type=int, default=64, help="model width")
    p.add_argument("--layers", type=int, default=2, help="encoder and decoder layers")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--routing-iters", type=int, default=3, help="capsule routing iterations")
    p.add_argument("--lr", type=float, help="peak learning rate (overrides config)")
    p.add_argument("--warmup", type=int, help="warmup steps (overrides config)")
    p.add_argument("--max-tokens", type=int, help="tokens per batch (overrides config)")
    p.add_argument("--max-epochs", type=int, help="epoch limit (overrides config)")
    p.add_argument("--max-steps", type=int, help="update limit (overrides config)")
    p.add_argument("--time-budget", type=float, help="wall-clock limit in seconds (overrides config)")
    p.add_argument("--dropout", type=float, help="dropout rate (overrides config)")
    p.add_argument("--path-mode", choices=("disturbed", "waitk", "full"), help="training paths (overrides config)")
    p.add_argument("--lambda-s", type=float, help="segment loss weight (overrides config)")
    p.add_argument("--lambda-t", type=float, help="token loss weight (overrides config)")
    p.add_argument("--quiet", action="store_true", help="no per-step log lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="simultaneously translate a source file")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--input", required=True, help="source sentences, one per line")
    p.add_argument("--output", help="hypothesis file (default: stdout)")
    p.add_argument("--trace-dir", help="directory for one read/write trace TSV per sentence")
    _policy_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="score hypotheses (BLEU, and AL when traces are given)")
    p.add_argument("--hyp", required=True, help="hypothesis file")
    p.add_argument("--ref", required=True, help="reference file")
    p.add_argument("--source", help="source file (needed for AL)")
    p.add_argument("--traces", help="trace directory written by translate")
    p.add_argument("--compact", action="store_true", help="single-line JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="latency-quality sweep over a policy grid")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--src", required=True, help="evaluation source file")
    p.add_argument("--tgt", required=True, help="evaluation reference file")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--policies", nargs="+", choices=("waitk", "pe", "constant", "full"),
                   default=["waitk", "pe"], help="policies to evaluate")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5, 7], help="k values")
    p.add_argument("--rho", type=float, nargs="+", default=[DEFAULT_RHO], help="rho values for pe")
    p.add_argument("--limit", type=int, help="only the first N sentences")
    p.add_argument("--overlap", action="store_true", help="also report the R_T/R_S overlap rates")
    p.add_argument("--top-target", type=int, help="Top-n size for R_T (default: half the mean target length)")
    p.add_argument("--top-source", type=int, help="Top-n size for R_S (default: mean source length)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, CorpusError, ValueError, OSError) as exc:
        print(f"pesimt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
