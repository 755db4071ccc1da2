"""Streaming decoders: fixed wait-k schedules and the post-evaluation policy.

The post-evaluation (PE) decoder generates a candidate token, routes the
encoder states with the decoder state before and after that candidate, and
writes the candidate only if some available source token's translation
degree rose by at least ``rho``. Otherwise it reads another source token and
re-decides. At most ``r`` consecutive reads are allowed, and once the whole
source has been read every step writes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, Model, translation_degree
from .paths import TranslationPath, g_from_actions, waitk_g

DEFAULT_RHO = 0.24
DEFAULT_R = 2

TRACE_COLUMNS = ("step", "action", "i", "t", "candidate", "max_delta", "degrees")


@dataclass
class PolicyConfig:
    k: int = 3
    rho: float = DEFAULT_RHO
    r: int = DEFAULT_R
    max_len: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.r < 1:
            raise ValueError("r must be >= 1")

    def length_limit(self, n_src: int) -> int:
        return self.max_len if self.max_len is not None else 2 * n_src + 10


def max_select(v) -> float:
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("max_select of an empty vector")
    return float(v.max())


def delta_degree(d_t, d_next) -> np.ndarray:
    """Elementwise non-negative increase ``max(d_next - d_t, 0)``."""
    d_t, d_next = np.asarray(d_t), np.asarray(d_next)
    if d_t.shape != d_next.shape:
        raise ValueError(f"degree vectors differ in length: {d_t.shape} vs {d_next.shape}")
    return np.maximum(d_next - d_t, 0.0)


@dataclass
class Evaluation:
    write: bool
    candidate: int
    d_t: np.ndarray
    d_next: np.ndarray
    delta: np.ndarray

    @property
    def max_delta(self) -> float:
        return max_select(self.delta)


@dataclass
class DecodeResult:
    tokens: list[int]
    path: TranslationPath
    truncated: bool = False
    trace: list[dict] = field(default_factory=list)
    degrees: list[np.ndarray] = field(default_factory=list)

    @property
    def actions(self) -> str:
        return self.path.actions


class DecodeSession:
    """Mutable state of one streaming translation.

    ``source`` is the full source id list *without* ``<eos>``; it is revealed
    to the model one token at a time (``<eos>`` is appended as the final
    source token).
    """

    def __init__(self, model: Model, source: Sequence[int]):
        if len(source) < 1:
            raise ValueError("empty source sentence")
        self.model = model
        self.stream = [int(s) for s in source] + [EOS]
        self.encoder = model.start_encoder()
        self.prefix: list[int] = []
        self.g: list[int] = []
        self.actions: list[str] = []
        self.consecutive_reads = 0
        self.trace: list[dict] = []
        self.degrees: list[np.ndarray] = []
        self._states = None

    @property
    def I(self) -> int:
        return len(self.stream)

    @property
    def i(self) -> int:
        return len(self.encoder)

    @property
    def t(self) -> int:
        return len(self.prefix) + 1

    @property
    def states(self) -> np.ndarray:
        if self._states is None or len(self._states) != self.i:
            self._states = self.encoder.states
        return self._states

    def read(self, count_as_policy_read: bool = True) -> None:
        if self.i >= self.I:
            raise ValueError("source exhausted")
        self.encoder.append(self.stream[self.i])
        self.actions.append("R")
        if count_as_policy_read:
            self.consecutive_reads += 1

    def read_until(self, n: int) -> None:
        while self.i < min(n, self.I):
            self.read(count_as_policy_read=False)

    def write(self, token: int) -> None:
        self.prefix.append(int(token))
        self.g.append(self.i)
        self.actions.append("W")
        self.consecutive_reads = 0

    def step_logits(self, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Decoder state/logits for the step after ``prefix`` at the current ``i``."""
        g_vec = np.asarray(self.g + [self.i] * (len(prefix) + 1 - len(self.g)))
        return self.model.decode_step(prefix, self.states, g_vec)

    def greedy(self, logits: np.ndarray) -> int:
        masked = np.array(logits, copy=True)
        masked[[PAD, BOS]] = -np.inf
        return int(np.argmax(masked))

    def result(self, truncated: bool) -> DecodeResult:
        path = TranslationPath(np.asarray(self.g, dtype=np.int64), k=0, actions="".join(self.actions))
        tokens = self.prefix[:-1] if self.prefix and self.prefix[-1] == EOS else list(self.prefix)
        return DecodeResult(tokens, path, truncated, self.trace, self.degrees)


def pe_evaluate(session: DecodeSession, rho: float) -> Evaluation:
    """Generate a candidate and compare translation degrees around it."""
    if session.i < 1:
        raise ValueError("read at least one source token before evaluating")
    model = session.model
    h_t, logits = session.step_logits(session.prefix)
    cand = session.greedy(logits)
    h_next, _ = session.step_logits(session.prefix + [cand])
    caps = model.route_step(session.states, np.stack([h_t, h_next]), session.i)
    d = translation_degree(caps)
    delta = delta_degree(d[0], d[1])
    return Evaluation(max_select(delta) >= rho, cand, d[0], d[1], delta)


def _log(session: DecodeSession, action: str, ev: Evaluation | None, candidate: int) -> None:
    row = {
        "step": len(session.trace) + 1,
        "action": action,
        "i": session.i,
        "t": session.t,
        "candidate": candidate,
        "max_delta": ev.max_delta if ev else "",
        "degrees": ";".join(f"{v:.6f}" for v in ev.d_t) if ev else "",
    }
    session.trace.append(row)
    if ev is not None:
        session.degrees.append(ev.d_t)


def pe_decode(model: Model, source: Sequence[int], cfg: PolicyConfig) -> DecodeResult:
    """Post-evaluation decoding of one sentence."""
    s = DecodeSession(model, source)
    s.read_until(cfg.k)
    limit = cfg.length_limit(len(source))
    while True:
        if len(s.prefix) >= limit:
            return s.result(truncated=True)
        ev = pe_evaluate(s, cfg.rho)
        if s.i >= s.I or s.consecutive_reads >= cfg.r or ev.write:
            _log(s, "W", ev, ev.candidate)
            s.write(ev.candidate)
            if ev.candidate == EOS:
                return s.result(truncated=False)
        else:
            _log(s, "R", ev, ev.candidate)
            s.read()


def schedule_decode(model: Model, source: Sequence[int], schedule: Callable[[int, int], int],
                    max_len: int | None = None) -> DecodeResult:
    """Greedy decoding where target step t sees ``schedule(t, I)`` source tokens."""
    s = DecodeSession(model, source)
    limit = max_len if max_len is not None else 2 * len(source) + 10
    while True:
        if len(s.prefix) >= limit:
            return s.result(truncated=True)
        s.read_until(max(1, schedule(s.t, s.I)))
        _, logits = s.step_logits(s.prefix)
        tok = s.greedy(logits)
        _log(s, "W", None, tok)
        s.write(tok)
        if tok == EOS:
            return s.result(truncated=False)


def fixed_decode(model: Model, source: Sequence[int], k: int, max_len: int | None = None) -> DecodeResult:
    """Wait-k greedy decoding (k larger than the source reads everything first)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    result = schedule_decode(model, source, lambda t, I: waitk_g(t, k, I), max_len)
    result.path.k = k
    return result


def constant_decode(model: Model, source: Sequence[int], k: int, max_len: int | None = None) -> DecodeResult:
    """Read ``min(k, I)`` tokens, then write until ``<eos>`` (PE with rho = 0)."""
    return schedule_decode(model, source, lambda t, I: min(k, I), max_len)


def full_decode(model: Model, source: Sequence[int], max_len: int | None = None) -> DecodeResult:
    return schedule_decode(model, source, lambda t, I: I, max_len)


def write_trace_tsv(result: DecodeResult, path, itos: Sequence[str] | None = None) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, delimiter="\t")
        w.writeheader()
        for row in result.trace:
            row = dict(row)
            if itos is not None:
                row["candidate"] = itos[int(row["candidate"])]
            w.writerow(row)


def read_trace_tsv(path) -> TranslationPath:
    """Rebuild the translation path (g over written tokens) from a trace file."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    g = [int(row["i"]) for row in rows if row["action"] == "W"]
    return TranslationPath(np.asarray(g, dtype=np.int64), k=g[0] if g else 0)


__all__ = [
    "DEFAULT_R", "DEFAULT_RHO", "DecodeResult", "DecodeSession", "Evaluation", "PolicyConfig",
    "TRACE_COLUMNS", "constant_decode", "delta_degree", "fixed_decode", "full_decode",
    "g_from_actions", "max_select", "pe_decode", "pe_evaluate", "read_trace_tsv",
    "schedule_decode", "waitk_g", "write_trace_tsv",
]
