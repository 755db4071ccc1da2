"""Training objective and optimisation loop.

The per-sentence objective is

    NLL(y | x, path) + lambda_S * L_S + lambda_T * L_T

where the NLL conditions every target step on the source prefix given by
the sampled path, ``L_S`` ties the translated/untranslated capsules to
averages of decoder and encoder states, and ``L_T`` asks the capsules to
predict the bag of already generated target tokens and the bag of
available source tokens.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import Batch, SentencePair, collate, make_batches
from .model import Model, ModelConfig
from .numerics import Tensor
from .paths import TranslationPath, full_path, sample_disturbed_path, waitk_path

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "nll", "loss_S", "loss_T", "total", "lr")


@dataclass
class TrainConfig:
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    r: int = 2
    peak_lr: float = 5e-4
    warmup_steps: int = 4000
    warmup_init_lr: float = 1e-7
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    dropout: float = 0.3
    max_tokens: int = 16000
    max_epochs: int = 100
    max_steps: int | None = None
    time_budget: float | None = None
    path_mode: str = "disturbed"
    seed: int = 1
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise ValueError("loss weights must be non-negative")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.path_mode not in ("disturbed", "waitk", "full"):
            raise ValueError(f"unknown path_mode {self.path_mode!r}")

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        """Read a JSON object whose keys are TrainConfig field names."""
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


def sample_path(mode: str, n_src: int, n_tgt: int, r: int, rng: np.random.Generator) -> TranslationPath:
    if mode == "disturbed":
        return sample_disturbed_path(n_src, n_tgt, r, rng)
    if mode == "waitk":
        return waitk_path(int(rng.integers(1, n_src + 1)), n_src, n_tgt)
    return full_path(n_src, n_tgt)


# ---------------------------------------------------------------------------
# averaging operators (constants given a path)


def prefix_average(M: int, M_pad: int | None = None) -> np.ndarray:
    """``A[t, tau] = 1/(t-1)`` for ``tau < t``; row t=1 is zero (empty prefix)."""
    M_pad = M_pad or M
    A = np.zeros((M_pad, M_pad))
    for t in range(1, M):
        A[t, :t] = 1.0 / t
    return A


def suffix_average(M: int, M_pad: int | None = None) -> np.ndarray:
    """``A[t, tau] = 1/(M-t+1)`` for ``t <= tau <= M`` (1-based)."""
    M_pad = M_pad or M
    A = np.zeros((M_pad, M_pad))
    for t in range(M):
        A[t, t:M] = 1.0 / (M - t)
    return A


def unread_average(g: np.ndarray, I: int, I_pad: int | None = None) -> np.ndarray:
    """``A[t, i] = 1/(I-g(t))`` for unread positions; zero rows when g(t) = I."""
    I_pad = I_pad or I
    A = np.zeros((len(g), I_pad))
    for t, gt in enumerate(g):
        if gt < I:
            A[t, gt:I] = 1.0 / (I - gt)
    return A


def read_average(g: np.ndarray, I_pad: int) -> np.ndarray:
    """``A[t, i] = 1/g(t)`` for ``i < g(t)``."""
    A = np.zeros((len(g), I_pad))
    for t, gt in enumerate(g):
        A[t, :gt] = 1.0 / gt
    return A


@dataclass
class LossContext:
    """Averaging operators for a batch under fixed paths.

    Applied to decoder states ``h`` (B, M, D) / encoder states ``z`` (B, I, D)
    they give the generated-prefix mean, remaining-target mean, unread-source
    mean and available-source mean at every step.
    """

    prefix: np.ndarray
    suffix: np.ndarray
    unread: np.ndarray
    read: np.ndarray
    step_mask: np.ndarray
    tgt_len: np.ndarray

    @classmethod
    def build(cls, g: np.ndarray, src_len: Sequence[int], tgt_len: Sequence[int],
              I_pad: int, M_pad: int) -> LossContext:
        B = len(src_len)
        pre = np.zeros((B, M_pad, M_pad))
        suf = np.zeros((B, M_pad, M_pad))
        unr = np.zeros((B, M_pad, I_pad))
        rd = np.zeros((B, M_pad, I_pad))
        mask = np.zeros((B, M_pad))
        for b in range(B):
            M, I = int(tgt_len[b]), int(src_len[b])
            gb = np.asarray(g[b][:M])
            pre[b] = prefix_average(M, M_pad)
            suf[b] = suffix_average(M, M_pad)
            unr[b, :M] = unread_average(gb, I, I_pad)
            rd[b, :M] = read_average(gb, I_pad)
            mask[b, :M] = 1.0
        return cls(pre, suf, unr, rd, mask, np.asarray(tgt_len, dtype=float))


# ---------------------------------------------------------------------------
# loss terms


def segment_loss(model: Model, phi_t: Tensor, phi_u: Tensor, h: Tensor, z: Tensor,
                 ctx: LossContext) -> Tensor:
    """Per-sentence segment constraint, shape (B,).

    ``(1/M) sum_t |Phi^T_t - W^T H^T_t|^2 + |Phi^U_t + W^U_e Z_t - W^U_d H^U_t|^2``
    """
    if np.any(ctx.tgt_len == 0):
        raise ValueError("segment loss needs M >= 1")
    P = model.params
    HT = nx.einsum("bts,bsd->btd", ctx.prefix, h)
    HU = nx.einsum("bts,bsd->btd", ctx.suffix, h)
    Z = nx.einsum("bti,bid->btd", ctx.unread, z)
    dT = phi_t - nx.matmul(HT, P["seg.WT"])
    dU = phi_u + nx.matmul(Z, P["seg.WUe"]) - nx.matmul(HU, P["seg.WUd"])
    per_step = nx.squared_norm(dT) + nx.squared_norm(dU)
    return (per_step * ctx.step_mask).sum(axis=1) / ctx.tgt_len


def token_loss(model: Model, phi_t: Tensor, phi_u: Tensor, tgt_out: np.ndarray, src: np.ndarray,
               ctx: LossContext) -> Tensor:
    """Per-sentence token constraint, shape (B,).

    Bag-of-tokens likelihoods: at step t the translated capsules score every
    generated token y_1..y_{t-1} and all capsules score every available
    source token; each bag contributes its mean log-probability.
    """
    lp_d = model.predict_target_bag(phi_t)
    lp_e = model.predict_source_bag(phi_t, phi_u)
    y_onehot = np.eye(lp_d.shape[-1], dtype=lp_d.dtype)[tgt_out]
    x_onehot = np.eye(lp_e.shape[-1], dtype=lp_e.dtype)[src]
    at_y = nx.einsum("btv,bsv->bts", lp_d, y_onehot)
    at_x = nx.einsum("btv,biv->bti", lp_e, x_onehot)
    log_pd = (at_y * ctx.prefix).sum(axis=2)
    log_pe = (at_x * ctx.read).sum(axis=2)
    return -((log_pd + log_pe) * ctx.step_mask).sum(axis=1) / ctx.tgt_len


@dataclass
class BatchLosses:
    nll: Tensor          # (B,) label-smoothed NLL summed over target tokens
    plain_nll: np.ndarray  # (B,) unsmoothed NLL, for reporting
    seg: Tensor          # (B,)
    tok: Tensor          # (B,)
    total: Tensor        # (B,)
    n_tokens: int


def paths_to_array(paths: Sequence[TranslationPath], M_pad: int) -> np.ndarray:
    g = np.ones((len(paths), M_pad), dtype=np.int64)
    for b, p in enumerate(paths):
        g[b, : len(p.g)] = p.g
    return g


def batch_losses(model: Model, batch: Batch, paths: Sequence[TranslationPath], cfg: TrainConfig,
                 training: bool = False, rng: np.random.Generator | None = None) -> BatchLosses:
    B, M_pad = batch.tgt_in.shape
    I_pad = batch.src.shape[1]
    for b, p in enumerate(paths):
        if len(p.g) != batch.tgt_len[b] or not p.is_valid(int(batch.src_len[b])):
            raise ValueError(f"path {b} does not fit its sentence")
    g = paths_to_array(paths, M_pad)
    z = model.encode(batch.src, training=training, rng=rng)
    h = model.decode(batch.tgt_in, z, g, training=training, rng=rng)
    ctx = LossContext.build(g, batch.src_len, batch.tgt_len, I_pad, M_pad)

    logits = model.logits(h)
    tok_nll = nx.label_smoothed_nll(logits, batch.tgt_out, cfg.label_smoothing)
    nll = (tok_nll * ctx.step_mask).sum(axis=1)
    if cfg.label_smoothing:
        lp = logits.data - logits.data.max(-1, keepdims=True)
        lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
        plain = -np.take_along_axis(lp, batch.tgt_out[..., None], -1)[..., 0]
        plain_nll = (plain * ctx.step_mask).sum(axis=1)
    else:
        plain_nll = nll.data.copy()

    total = nll
    zero = Tensor(np.zeros(B))
    seg = tok = zero
    if cfg.lambda_s or cfg.lambda_t:
        caps = model.route(z, h, g)
        phi_t, phi_u = caps.phi_translated, caps.phi_untranslated
        if cfg.lambda_s:
            seg = segment_loss(model, phi_t, phi_u, h, z, ctx)
            total = total + seg * cfg.lambda_s
        if cfg.lambda_t:
            tok = token_loss(model, phi_t, phi_u, batch.tgt_out, batch.src, ctx)
            total = total + tok * cfg.lambda_t
    return BatchLosses(nll, plain_nll, seg, tok, total, int(batch.tgt_len.sum()))


def total_loss(model: Model, pair: SentencePair, path: TranslationPath, cfg: TrainConfig) -> Tensor:
    """Objective for one sentence pair under ``path`` (dropout off).

    The path covers the target plus its ``<eos>`` step and counts the source
    ``<eos>`` as the last source token.
    """
    return batch_losses(model, collate([pair]), [path], cfg).total.sum()


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    epochs: int = 0
    seconds: float = 0.0


class DivergenceError(RuntimeError):
    pass


def train(corpus: Sequence[SentencePair], model_config: ModelConfig | None, cfg: TrainConfig,
          model: Model | None = None, history_csv=None, log_fn=None) -> TrainResult:
    """Optimise ``model`` (fresh from ``model_config`` when not given) on ``corpus``.

    One path is sampled per sentence per epoch. Deterministic for a fixed
    ``cfg.seed``; the run stops at ``max_epochs``, ``max_steps`` or
    ``time_budget`` seconds, whichever comes first.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    if model is None:
        if model_config is None:
            raise ValueError("need a model or a model config")
        model_config = dataclasses.replace(model_config, dropout=cfg.dropout)
        model = Model(model_config, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = nx.Adam(model.params, betas=cfg.betas, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    writer = None
    fh = None
    if history_csv is not None:
        fh = open(history_csv, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.max_epochs):
            for batch in make_batches(corpus, cfg.max_tokens, seed=cfg.seed + epoch):
                paths = [sample_path(cfg.path_mode, int(I), int(M), cfg.r, rng)
                         for I, M in zip(batch.src_len, batch.tgt_len)]
                step += 1
                lr = nx.inverse_sqrt_lr(step, cfg.peak_lr, cfg.warmup_steps, cfg.warmup_init_lr)
                opt.zero_grad()
                losses = batch_losses(model, batch, paths, cfg, training=True, rng=rng)
                objective = losses.total.mean()
                if not np.isfinite(objective.item()):
                    raise DivergenceError(f"non-finite loss at step {step}")
                objective.backward()
                opt.step(lr)
                row = {
                    "step": step,
                    "nll": float(losses.plain_nll.sum() / losses.n_tokens),
                    "loss_S": float(losses.seg.data.mean()),
                    "loss_T": float(losses.tok.data.mean()),
                    "total": objective.item(),
                    "lr": lr,
                }
                result.history.append(row)
                if writer:
                    writer.writerow(row)
                if log_fn and step % cfg.log_every == 0:
                    log_fn(row)
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                if cfg.time_budget and time.perf_counter() - start > cfg.time_budget:
                    break
            result.epochs = epoch + 1
            if (cfg.max_steps and step >= cfg.max_steps) or (
                    cfg.time_budget and time.perf_counter() - start > cfg.time_budget):
                break
    finally:
        if fh:
            fh.close()
    result.steps = step
    result.seconds = time.perf_counter() - start
    return result


def write_history(history: Sequence[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        w.writerows(history)


def mean_token_nll(model: Model, corpus: Sequence[SentencePair], path_fn=None,
                   max_tokens: int = 2000) -> float:
    """Unsmoothed per-token NLL over ``corpus`` (full-sentence paths by default)."""
    cfg = TrainConfig(lambda_s=0.0, lambda_t=0.0, label_smoothing=0.0)
    tot = 0.0
    n = 0
    with nx.no_grad():
        for batch in make_batches(corpus, max_tokens, shuffle=False):
            paths = [(path_fn or full_path)(int(I), int(M)) for I, M in zip(batch.src_len, batch.tgt_len)]
            losses = batch_losses(model, batch, paths, cfg)
            tot += float(losses.nll.data.sum())
            n += losses.n_tokens
    return tot / max(n, 1)


__all__ = [
    "BatchLosses", "DivergenceError", "HISTORY_COLUMNS", "LossContext", "TrainConfig", "TrainResult",
    "batch_losses", "mean_token_nll", "prefix_average", "read_average", "sample_path", "segment_loss",
    "suffix_average", "token_loss", "total_loss", "train", "unread_average", "write_history",
]
