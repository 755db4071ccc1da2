"""Parallel-corpus handling: synthetic generation, text I/O, vocabularies, batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
FUNCTION_TOKEN = "the"


class CorpusError(ValueError):
    pass


class Vocab:
    """Token <-> id bijection with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Iterable[str] = (), freqs: dict[str, int] | None = None):
        self.itos: list[str] = list(RESERVED)
        self.freqs = dict(freqs or {})
        for tok in tokens:
            if tok not in RESERVED:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = 5) -> Vocab:
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept, freqs=dict(counts))

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos:
                fh.write(f"{tok}\t{self.freqs.get(tok, 0)}\n")

    @classmethod
    def load(cls, path) -> Vocab:
        tokens, freqs = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, _, freq = line.rstrip("\n").partition("\t")
                tokens.append(tok)
                freqs[tok] = int(freq or 0)
        if tuple(tokens[:4]) != RESERVED:
            raise CorpusError(f"{path}: first four entries must be the reserved tokens")
        return cls(tokens[4:], freqs)


@dataclass
class SentencePair:
    x: list[int]
    y: list[int]

    @property
    def I(self) -> int:
        return len(self.x)

    @property
    def M(self) -> int:
        return len(self.y)


@dataclass
class SynthConfig:
    """Synthetic translation task.

    Target = per-token dictionary image of the source. A fixed, seeded subset
    of source types (fraction ``swap_prob``) swaps places with the following
    token, and another subset (fraction ``insert_prob``) is preceded on the
    target side by a function token that has no source counterpart.
    """

    vocab_size: int = 64
    min_len: int = 5
    max_len: int = 12
    mapping_seed: int = 0
    swap_prob: float = 0.3
    insert_prob: float = 0.15
    n_train: int = 4000
    n_dev: int = 200
    n_test: int = 500
    seed: int = 1

    def __post_init__(self):
        if self.vocab_size < 8:
            raise CorpusError("vocab_size must be >= 8 (4 reserved ids plus content)")
        for name in ("swap_prob", "insert_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise CorpusError(f"{name}={p} outside [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")


class SyntheticLanguage:
    """The fixed source->target rules behind a :class:`SynthConfig`."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng(cfg.mapping_seed)
        n = cfg.vocab_size - len(RESERVED)
        self.source_tokens = [f"s{i}" for i in range(n)]
        perm = rng.permutation(n)
        self.mapping = {f"s{i}": f"t{perm[i]}" for i in range(n)}
        self.swappers = {f"s{i}" for i in np.flatnonzero(rng.random(n) < cfg.swap_prob)}
        self.inserters = {f"s{i}" for i in np.flatnonzero(rng.random(n) < cfg.insert_prob)}

    def translate(self, src: Sequence[str]) -> list[str]:
        out: list[str] = []
        i = 0
        while i < len(src):
            unit = [i + 1, i] if src[i] in self.swappers and i + 1 < len(src) else [i]
            for j in unit:
                if src[j] in self.inserters:
                    out.append(FUNCTION_TOKEN)
                out.append(self.mapping[src[j]])
            i += len(unit)
        return out


def generate_synthetic_corpus(cfg: SynthConfig) -> dict[str, list[tuple[list[str], list[str]]]]:
    """Build disjoint train/dev/test splits of (source, target) token lists."""
    lang = SyntheticLanguage(cfg)
    rng = np.random.default_rng(cfg.seed)
    wanted = cfg.n_train + cfg.n_dev + cfg.n_test
    n_types = len(lang.source_tokens)
    capacity = sum(n_types ** L for L in range(cfg.min_len, cfg.max_len + 1))
    if wanted > capacity:
        raise CorpusError(f"cannot draw {wanted} distinct sentences from {capacity} possible")
    seen: set[tuple[str, ...]] = set()
    sources: list[tuple[str, ...]] = []
    attempts = 0
    while len(sources) < wanted:
        attempts += 1
        if attempts > 50 * wanted + 1000:
            raise CorpusError("could not draw enough distinct sentences")
        L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        sent = tuple(lang.source_tokens[j] for j in rng.integers(0, n_types, size=L))
        if sent not in seen:
            seen.add(sent)
            sources.append(sent)
    order = rng.permutation(wanted)
    sources = [sources[i] for i in order]
    pairs = [(list(s), lang.translate(s)) for s in sources]
    a, b = cfg.n_train, cfg.n_train + cfg.n_dev
    return {"train": pairs[:a], "dev": pairs[a:b], "test": pairs[b:]}


def write_parallel(pairs, prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    src, tgt = prefix.with_suffix(".src"), prefix.with_suffix(".tgt")
    with open(src, "w", encoding="utf-8") as fs, open(tgt, "w", encoding="utf-8") as ft:
        for x, y in pairs:
            fs.write(" ".join(x) + "\n")
            ft.write(" ".join(y) + "\n")
    return src, tgt


def read_lines(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def read_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise CorpusError(f"line count mismatch: {src_path} has {len(src)} lines, "
                          f"{tgt_path} has {len(tgt)}")
    for n, (x, y) in enumerate(zip(src, tgt), start=1):
        if not x or not y:
            raise CorpusError(f"empty line {n} in {src_path if not x else tgt_path}")
    return list(zip(src, tgt))


def oov_rate(sentences, vocab: Vocab) -> float:
    total = sum(len(s) for s in sentences)
    miss = sum(1 for s in sentences for t in s if t not in vocab)
    return miss / total if total else 0.0


def build_vocabs(raw, min_freq: int = 5, shared: bool = False) -> tuple[Vocab, Vocab]:
    """Source/target vocabularies from ``(source tokens, target tokens)`` pairs."""
    if shared:
        v = Vocab.build([s for pair in raw for s in pair], min_freq)
        return v, v
    return Vocab.build([x for x, _ in raw], min_freq), Vocab.build([y for _, y in raw], min_freq)


def encode_pairs(raw, src_vocab: Vocab, tgt_vocab: Vocab) -> list[SentencePair]:
    return [SentencePair(src_vocab.encode(x), tgt_vocab.encode(y)) for x, y in raw]


def load_parallel(src_path, tgt_path, min_freq: int = 5, shared: bool = False,
                  vocabs: tuple[Vocab, Vocab] | None = None):
    """Read a line-aligned corpus and map it to ids.

    Builds vocabularies (tokens rarer than ``min_freq`` become ``<unk>``)
    unless ``vocabs`` is given. Returns ``(pairs, src_vocab, tgt_vocab, oov)``
    where ``oov`` holds the source/target OOV rates.
    """
    raw = read_parallel(src_path, tgt_path)
    if vocabs is None:
        vocabs = build_vocabs(raw, min_freq, shared)
    sv, tv = vocabs
    oov = {"src": oov_rate([x for x, _ in raw], sv), "tgt": oov_rate([y for _, y in raw], tv)}
    log.info("loaded %d pairs from %s; OOV src=%.4f tgt=%.4f", len(raw), src_path, oov["src"], oov["tgt"])
    pairs = encode_pairs(raw, sv, tv)
    return pairs, sv, tv, oov


@dataclass
class Batch:
    """Padded arrays for a group of pairs.

    ``src`` carries the source plus ``<eos>``; ``tgt_in`` is ``<bos>`` + target
    and ``tgt_out`` is target + ``<eos>``. Lengths include the ``<eos>``.
    """

    index: np.ndarray
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def collate(pairs: Sequence[SentencePair], index=None) -> Batch:
    B = len(pairs)
    I = max(p.I for p in pairs) + 1
    M = max(p.M for p in pairs) + 1
    src = np.full((B, I), PAD, dtype=np.int64)
    tgt_in = np.full((B, M), PAD, dtype=np.int64)
    tgt_out = np.full((B, M), PAD, dtype=np.int64)
    for b, p in enumerate(pairs):
        src[b, : p.I + 1] = [*p.x, EOS]
        tgt_in[b, : p.M + 1] = [BOS, *p.y]
        tgt_out[b, : p.M + 1] = [*p.y, EOS]
    return Batch(
        index=np.arange(B) if index is None else np.asarray(index),
        src=src, tgt_in=tgt_in, tgt_out=tgt_out,
        src_len=np.array([p.I + 1 for p in pairs]), tgt_len=np.array([p.M + 1 for p in pairs]),
    )


def make_batches(pairs: Sequence[SentencePair], max_tokens: int, seed: int | None = 0,
                 shuffle: bool = True) -> list[Batch]:
    """Length-bucketed batches of at most ``max_tokens`` (rows x longest side).

    Padding positions are marked by ``PAD`` ids and excluded from every loss.
    """
    sizes = np.array([max(p.I, p.M) for p in pairs])
    for n, s in enumerate(sizes):
        if s > max_tokens:
            raise CorpusError(f"sentence {n} has {s} tokens, more than max_tokens={max_tokens}")
    rng = np.random.default_rng(seed)
    tiebreak = rng.random(len(pairs)) if shuffle else np.arange(len(pairs))
    order = np.lexsort((tiebreak, sizes))
    groups: list[list[int]] = []
    cur: list[int] = []
    longest = 0
    for i in order:
        new_longest = max(longest, sizes[i])
        if cur and new_longest * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, new_longest = [], sizes[i]
        cur.append(int(i))
        longest = new_longest
    if cur:
        groups.append(cur)
    if shuffle:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([pairs[i] for i in g], index=g) for g in groups]
