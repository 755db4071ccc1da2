"""Latency and quality metrics, capsule overlap rates, and policy sweeps."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import SentencePair, Vocab
from .model import BOS, EOS, Model
from .paths import TranslationPath
from .policy import PolicyConfig, constant_decode, fixed_decode, full_decode, pe_decode

SWEEP_COLUMNS = ("policy", "k", "rho", "AL", "BLEU", "R_T", "R_S", "sentences")
BLEU_FLOOR = 1e-9


def average_lagging(g, n_src: int, n_hyp: int) -> float:
    """Average lagging of a path (``TranslationPath`` or g vector) over ``n_src``.

    ``AL = (1/tau) sum_{t<=tau} g(t) - (t-1) * n_src / n_hyp`` with ``tau``
    the first step whose availability reaches ``n_src`` (the whole path when
    it never does).
    """
    if n_src <= 0 or n_hyp <= 0:
        raise ValueError("source and hypothesis lengths must be positive")
    if isinstance(g, TranslationPath):
        g = g.g
    g = np.asarray(g, dtype=float)
    if len(g) == 0:
        raise ValueError("empty path")
    full = np.flatnonzero(g >= n_src)
    tau = int(full[0]) + 1 if len(full) else len(g)
    t = np.arange(tau)
    return float(np.mean(g[:tau] - t * n_src / n_hyp))


def sentence_latency(path: TranslationPath, n_src: int, n_hyp: int) -> float:
    """AL over real source tokens: reading the source ``<eos>`` costs nothing extra."""
    return average_lagging(np.minimum(path.g, n_src), n_src, max(n_hyp, 1))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[str], ref: Sequence[str], max_n: int = 4) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n]."""
    stats = [len(hyp), len(ref)]
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats.append(sum(min(c, r[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return np.asarray(stats, dtype=float)


def bleu_from_stats(stats: np.ndarray, max_n: int = 4) -> float:
    hyp_len, ref_len = stats[0], stats[1]
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        match, total = stats[2 + 2 * n], stats[3 + 2 * n]
        # the count floor also covers orders with no hypothesis n-grams at all
        log_p += math.log(max(match, BLEU_FLOOR) / max(total, 1.0))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU on whitespace tokens, 0..100."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    total = sum(bleu_stats(list(h), list(r), max_n) for h, r in zip(hypotheses, references))
    return bleu_from_stats(total, max_n)


# ---------------------------------------------------------------------------
# overlap rates


def top_n(log_probs: np.ndarray, n: int) -> set[int]:
    return set(np.argsort(-log_probs, kind="stable")[:n].tolist())


def overlap_rate(step_log_probs: Sequence[np.ndarray], references: Sequence[Sequence[int]], n: int,
                 skip_empty: bool = True) -> float:
    """Mean over steps of ``|Top_n(p_t) & ref_t| / |ref_t|``.

    ``ref_t`` is treated as a set of token types. Steps whose reference is
    empty are skipped.
    """
    rates = []
    for lp, ref in zip(step_log_probs, references):
        ref = set(int(x) for x in ref)
        if not ref:
            if skip_empty:
                continue
            raise ValueError("empty reference at some step")
        rates.append(len(top_n(lp, n) & ref) / len(ref))
    return float(np.mean(rates)) if rates else 0.0


def _capsule_bags(model: Model, source: Sequence[int], target: Sequence[int], g: Sequence[int]):
    """Per-step bag log-probabilities when ``target`` is produced under path ``g``."""
    src = np.array([[*source, EOS]])
    tgt_in = np.array([[BOS, *target[:-1]]])
    g = np.asarray(g)[None, : len(target)]
    with nx.no_grad():
        z = model.encode(src)
        h = model.decode(tgt_in, z, g)
        caps = model.route(z, h, g)
        lp_d = model.predict_target_bag(caps.phi_translated).data[0]
        lp_e = model.predict_source_bag(caps.phi_translated, caps.phi_untranslated).data[0]
    return lp_d, lp_e


def corpus_overlap_rates(model: Model, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                         paths: Sequence[Sequence[int]], n_target: int, n_source: int) -> tuple[float, float]:
    """Corpus-averaged target/source overlap rates of the capsule predictors.

    ``targets`` are the generated token sequences (including the final
    ``<eos>`` when one was written) and ``paths`` their availability vectors.
    At step t the translated capsules' top ``n_target`` target tokens are
    compared with the prefix y_{<t}, and all capsules' top ``n_source``
    source tokens with the read source x_{<=g(t)}.
    """
    rt, rs = [], []
    for src, tgt, g in zip(sources, targets, paths):
        tgt = [int(v) for v in tgt]
        if not tgt:
            continue
        stream = [*src, EOS]
        lp_d, lp_e = _capsule_bags(model, src, tgt, g)
        steps = range(len(tgt))
        rt.append(overlap_rate([lp_d[t] for t in steps], [tgt[:t] for t in steps], n_target))
        rs.append(overlap_rate([lp_e[t] for t in steps], [stream[: g[t]] for t in steps], n_source))
    return float(np.mean(rt)), float(np.mean(rs))


def overlap_rate_target(model: Model, sources, targets, paths, n: int) -> float:
    return corpus_overlap_rates(model, sources, targets, paths, n, 1)[0]


def overlap_rate_source(model: Model, sources, targets, paths, n: int) -> float:
    return corpus_overlap_rates(model, sources, targets, paths, 1, n)[1]


def default_top_sizes(corpus: Sequence[SentencePair]) -> tuple[int, int]:
    """Half the mean target length and the mean source length, rounded up."""
    mean_tgt = np.mean([p.M for p in corpus])
    mean_src = np.mean([p.I for p in corpus])
    return max(1, math.ceil(mean_tgt / 2)), max(1, math.ceil(mean_src))


# ---------------------------------------------------------------------------
# sweep


@dataclass
class EvalRecord:
    policy: str
    k: int
    rho: float | None
    AL: float
    BLEU: float
    sentences: int
    R_T: float | None = None
    R_S: float | None = None

    def row(self) -> dict:
        d = asdict(self)
        return {c: ("" if d[c] is None else d[c]) for c in SWEEP_COLUMNS}


def decode_corpus(model: Model, corpus: Sequence[SentencePair], policy: str, k: int,
                  rho: float = 0.24, r: int = 2, max_len: int | None = None):
    if policy == "waitk":
        return [fixed_decode(model, p.x, k, max_len) for p in corpus]
    if policy == "pe":
        cfg = PolicyConfig(k=k, rho=rho, r=r, max_len=max_len)
        return [pe_decode(model, p.x, cfg) for p in corpus]
    if policy == "constant":
        return [constant_decode(model, p.x, k, max_len) for p in corpus]
    if policy == "full":
        return [full_decode(model, p.x, max_len) for p in corpus]
    raise ValueError(f"unknown policy {policy!r}")


def score_outputs(outputs, corpus: Sequence[SentencePair], tgt_vocab: Vocab) -> tuple[float, float]:
    hyps = [tgt_vocab.decode(o.tokens) for o in outputs]
    refs = [tgt_vocab.decode(p.y) for p in corpus]
    als = [sentence_latency(o.path, p.I, len(o.tokens)) for o, p in zip(outputs, corpus)]
    return bleu(hyps, refs), float(np.mean(als))


def evaluate_policy(model: Model, corpus: Sequence[SentencePair], tgt_vocab: Vocab, policy: str, k: int,
                    rho: float = 0.24, r: int = 2, overlap: tuple[int, int] | None = None) -> EvalRecord:
    outputs = decode_corpus(model, corpus, policy, k, rho, r)
    b, al = score_outputs(outputs, corpus, tgt_vocab)
    rec = EvalRecord(policy, k, rho if policy == "pe" else None, al, b, len(corpus))
    if overlap is not None:
        # rates are measured on what the policy actually generated, along its own path
        targets = [o.tokens if o.truncated else [*o.tokens, EOS] for o in outputs]
        paths = [o.path.g for o in outputs]
        rec.R_T, rec.R_S = corpus_overlap_rates(model, [p.x for p in corpus], targets, paths, *overlap)
    return rec


def sweep(model: Model, corpus: Sequence[SentencePair], tgt_vocab: Vocab, grid: Iterable[tuple],
          csv_path=None, overlap: tuple[int, int] | None = None) -> list[EvalRecord]:
    """Evaluate every ``(policy, k, rho)`` grid point; rows sorted by AL."""
    records = []
    for policy, k, rho in grid:
        records.append(evaluate_policy(model, corpus, tgt_vocab, policy, k,
                                       rho if rho is not None else 0.24, overlap=overlap))
    records.sort(key=lambda r: (r.AL, r.policy, r.k))
    if csv_path is not None:
        write_sweep_csv(records, csv_path)
    return records


def write_sweep_csv(records: Sequence[EvalRecord], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for rec in records:
            w.writerow(rec.row())


def read_sweep_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
