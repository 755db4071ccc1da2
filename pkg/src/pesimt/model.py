"""Encoder-decoder transformer with a routing head over encoder states.

The encoder is causal (each source position sees only earlier ones), so a
stream of source tokens can be encoded one at a time without touching the
states already produced. The decoder's cross-attention is limited per target
step to the first ``g[t]`` source positions. On top of both sits a capsule
layer: encoder states vote for ``J`` "translated" and ``N`` "untranslated"
output capsules, steered by the decoder state, and the share of each source
token's routing mass that lands on the translated capsules is its
translation degree.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CHECKPOINT_VERSION = 1

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    ffn_dim: int = 256
    layers: int = 2
    heads: int = 4
    capsule_dim: int | None = None
    n_translated: int = 2
    n_untranslated: int = 2
    routing_iters: int = 3
    dropout: float = 0.1
    max_len: int = 256
    dtype: str = "float64"

    def __post_init__(self):
        if self.capsule_dim is None:
            self.capsule_dim = max(1, self.d_model // 2)
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.n_translated < 1 or self.n_untranslated < 1 or self.routing_iters < 1:
            raise ValueError("need J >= 1, N >= 1 and at least one routing iteration")

    @property
    def n_capsules(self) -> int:
        return self.n_translated + self.n_untranslated


@dataclass
class CapsuleState:
    """Routing result for one or more decode steps.

    Leading axes (if any) index decode steps; ``c`` and ``b`` end in
    ``(source position, capsule)``, ``phi`` in ``(capsule, capsule dim)``.
    """

    b: np.ndarray
    c: np.ndarray
    phi: Tensor
    g: np.ndarray
    n_translated: int
    c_tensor: Tensor | None = None
    history: list[np.ndarray] = field(default_factory=list)

    @property
    def phi_translated(self) -> Tensor:
        """Translated capsules concatenated into one vector per step."""
        p = self.phi[..., : self.n_translated, :]
        return p.reshape(p.shape[:-2] + (-1,))

    @property
    def phi_untranslated(self) -> Tensor:
        p = self.phi[..., self.n_translated:, :]
        return p.reshape(p.shape[:-2] + (-1,))


def translation_degree(caps: CapsuleState) -> np.ndarray:
    """Per-source-token mass routed to translated capsules (zero past ``g``)."""
    return caps.c[..., : caps.n_translated].sum(axis=-1)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f, c = cfg.d_model, cfg.ffn_dim, cfg.capsule_dim
    J, N, K = cfg.n_translated, cfg.n_untranslated, cfg.n_capsules

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    p: dict[str, np.ndarray] = {
        "src_embed": rng.normal(0.0, d ** -0.5, size=(cfg.src_vocab, d)),
        "tgt_embed": rng.normal(0.0, d ** -0.5, size=(cfg.tgt_vocab, d)),
        "out_proj": dense(d, cfg.tgt_vocab),
    }
    p["src_embed"][PAD] = 0.0
    p["tgt_embed"][PAD] = 0.0

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = dense(d, d)

    def ffn(prefix):
        p[f"{prefix}.w1"] = dense(d, f)
        p[f"{prefix}.b1"] = np.zeros(f)
        p[f"{prefix}.w2"] = dense(f, d)
        p[f"{prefix}.b2"] = np.zeros(d)

    for l in range(cfg.layers):
        norm(f"enc.{l}.ln1"); attn(f"enc.{l}.self"); norm(f"enc.{l}.ln2"); ffn(f"enc.{l}.ffn")
        norm(f"dec.{l}.ln1"); attn(f"dec.{l}.self"); norm(f"dec.{l}.ln2"); attn(f"dec.{l}.cross")
        norm(f"dec.{l}.ln3"); ffn(f"dec.{l}.ffn")
    norm("enc.ln")
    norm("dec.ln")

    p["caps.W"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(K, d, c))
    p["caps.U"] = dense(d, c)
    p["seg.WT"] = dense(d, J * c)
    p["seg.WUe"] = dense(d, N * c)
    p["seg.WUd"] = dense(d, N * c)
    p["tok.Vd"] = dense(J * c, cfg.tgt_vocab)
    p["tok.bd"] = np.zeros(cfg.tgt_vocab)
    p["tok.Ve"] = dense(K * c, cfg.src_vocab)
    p["tok.be"] = np.zeros(cfg.src_vocab)
    return p


class Model:
    """Parameters plus the forward computations.

    Parameters are :class:`Tensor` leaves keyed by name. During inference the
    model is read-only and may be shared between decode sessions.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        raw = params if params is not None else _init_params(config, np.random.default_rng(seed))
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in raw.items()
        }
        self._pos = sinusoid_table(config.max_len + 2, config.d_model).astype(dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> Model:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r} in {path}")
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        return cls(ModelConfig(**meta["config"]), params)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- building blocks --------------------------------------------------
    def _split_heads(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        H = self.config.heads
        return x.reshape(B, T, H, -1).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, H, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, stable: bool) -> Tensor:
        """Multi-head attention core on (B, H, T, dh) tensors.

        ``mask`` broadcasts to (B, H, Tq, Tk). The stable variant reduces over
        keys strictly left to right so a query row's result does not depend on
        how many (masked) keys follow it.
        """
        scale = 1.0 / math.sqrt(q.shape[-1])
        if stable:
            scores = nx.einsum("bhqd,bhkd->bhqk", q, k, stable=True) * scale
            p = nx.masked_softmax(scores, mask, axis=-1, sequential=True)
            weighted = nx.mul(p.reshape(p.shape + (1,)), k_expand(v))
            return nx.tsum(weighted, axis=3, sequential=True)
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        p = nx.masked_softmax(scores, mask, axis=-1)
        return nx.matmul(p, v)

    def _mha(self, prefix: str, x_q: Tensor, x_kv: Tensor, mask, stable: bool) -> Tensor:
        P = self.params
        q = self._split_heads(nx.linear(x_q, P[f"{prefix}.wq"], stable=stable))
        k = self._split_heads(nx.linear(x_kv, P[f"{prefix}.wk"], stable=stable))
        v = self._split_heads(nx.linear(x_kv, P[f"{prefix}.wv"], stable=stable))
        out = self._merge_heads(self._attend(q, k, v, mask, stable))
        return nx.linear(out, P[f"{prefix}.wo"], stable=stable)

    def _ffn(self, prefix: str, x: Tensor, stable: bool, drop) -> Tensor:
        P = self.params
        h = nx.relu(nx.linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"], stable=stable))
        return nx.linear(drop(h), P[f"{prefix}.w2"], P[f"{prefix}.b2"], stable=stable)

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _dropper(self, rng, training: bool):
        rate = self.config.dropout
        return lambda t: nx.dropout(t, rate, rng, training)

    def _embed(self, table: str, ids: np.ndarray, offset: int = 0) -> Tensor:
        ids = np.asarray(ids)
        T = ids.shape[-1]
        if offset + T > self._pos.shape[0]:
            raise ValueError(f"sequence of length {offset + T} exceeds max_len={self.config.max_len}")
        emb = nx.embedding(self.params[table], ids) * math.sqrt(self.config.d_model)
        return emb + self._pos[offset: offset + T]

    # -- encoder ----------------------------------------------------------
    def encode(self, src: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Causal encoding of a (B, I) batch of source ids -> (B, I, D)."""
        src = np.atleast_2d(src)
        drop = self._dropper(rng, training)
        x = drop(self._embed("src_embed", src))
        mask = nx.causal_mask(src.shape[1])
        for l in range(self.config.layers):
            h = self._ln(f"enc.{l}.ln1", x)
            x = x + drop(self._mha(f"enc.{l}.self", h, h, mask, stable=True))
            h = self._ln(f"enc.{l}.ln2", x)
            x = x + drop(self._ffn(f"enc.{l}.ffn", h, True, drop))
        return self._ln("enc.ln", x)

    def start_encoder(self) -> IncrementalEncoder:
        return IncrementalEncoder(self)

    # -- decoder ----------------------------------------------------------
    def decode(self, tgt_in: np.ndarray, enc: Tensor, available, training: bool = False,
               rng=None) -> Tensor:
        """Decoder hidden states for every target position.

        ``tgt_in`` is (B, M) (``<bos>`` followed by the shifted target) and
        ``available`` is (B, M) holding how many source states position ``t``
        may attend to (an int broadcasts to all positions).
        """
        tgt_in = np.atleast_2d(tgt_in)
        B, M = tgt_in.shape
        I = enc.shape[1]
        avail = np.broadcast_to(np.asarray(available), (B, M))
        if np.any(avail < 1):
            raise ValueError("every target step needs at least one source token")
        if np.any(avail > I):
            raise ValueError(f"availability exceeds the {I} encoded source states")
        drop = self._dropper(rng, training)
        self_mask = nx.causal_mask(M)
        cross_mask = nx.prefix_mask(avail, I)[:, None]
        x = drop(self._embed("tgt_embed", tgt_in))
        for l in range(self.config.layers):
            h = self._ln(f"dec.{l}.ln1", x)
            x = x + drop(self._mha(f"dec.{l}.self", h, h, self_mask, stable=False))
            h = self._ln(f"dec.{l}.ln2", x)
            x = x + drop(self._mha(f"dec.{l}.cross", h, enc, cross_mask, stable=False))
            h = self._ln(f"dec.{l}.ln3", x)
            x = x + drop(self._ffn(f"dec.{l}.ffn", h, False, drop))
        return self._ln("dec.ln", x)

    def logits(self, hidden: Tensor) -> Tensor:
        return nx.matmul(hidden, self.params["out_proj"])

    def decode_step(self, prefix, enc_states, g) -> tuple[np.ndarray, np.ndarray]:
        """Hidden state and vocabulary logits for the next target token.

        ``prefix`` holds y_1..y_{t-1} (without ``<bos>``); ``enc_states`` is an
        (I, D) array or tensor. ``g`` is either one count used for every
        position or a per-position sequence of length t.
        """
        enc = enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states)
        if enc.ndim == 2:
            enc = enc.reshape((1,) + enc.shape)
        tgt_in = np.array([[BOS, *prefix]], dtype=np.int64)
        g_arr = np.asarray(g)
        if g_arr.ndim == 0:
            g_arr = np.full(tgt_in.shape[1], int(g_arr))
        if g_arr.shape[-1] != tgt_in.shape[1]:
            raise ValueError("per-position availability must cover the prefix plus the new step")
        with nx.no_grad():
            h = self.decode(tgt_in, enc, g_arr[None])
            logits = self.logits(h[:, -1])
        return h.data[0, -1], logits.data[0]

    # -- routing head -----------------------------------------------------
    def route(self, enc: Tensor, hidden: Tensor, available, record: bool = False) -> CapsuleState:
        """Guided dynamic routing for a batch of decode steps.

        ``enc`` is (B, I, D), ``hidden`` is (B, M, D) and ``available`` (B, M).
        Votes are ``W_j z_i + U h_t``; each iteration takes a softmax over
        capsules for every available position, squashes the weighted vote
        sums and adds the vote/capsule agreement to the routing logits.
        The vote tensor is never materialised: its two additive parts are
        contracted separately.
        """
        cfg = self.config
        P = self.params
        B, I, _ = enc.shape
        M = hidden.shape[1]
        avail = np.broadcast_to(np.asarray(available), (B, M))
        if np.any(avail < 1):
            raise ValueError("routing needs at least one available source token")
        mask = nx.prefix_mask(avail, I)[..., None]
        vote_enc = nx.einsum("bid,kdc->bikc", enc, P["caps.W"])
        vote_dec = nx.matmul(hidden, P["caps.U"])
        b = Tensor(np.zeros((B, M, I, cfg.n_capsules), dtype=enc.dtype))
        history = []
        for _ in range(cfg.routing_iters):
            c = nx.masked_softmax(b, mask, axis=-1)
            if record:
                history.append(c.data.copy())
            mass = c.sum(axis=2)
            s = nx.einsum("bmik,bikc->bmkc", c, vote_enc)
            s = s + mass.reshape(mass.shape + (1,)) * vote_dec.reshape((B, M, 1, -1))
            phi = nx.squash(s)
            agree = nx.einsum("bmkc,bikc->bmik", phi, vote_enc)
            guide = nx.einsum("bmkc,bmc->bmk", phi, vote_dec)
            b = b + agree + guide.reshape((B, M, 1, cfg.n_capsules))
        return CapsuleState(b=b.data, c=c.data, phi=phi, g=avail.copy(),
                            n_translated=cfg.n_translated, c_tensor=c, history=history)

    def route_step(self, enc_states, hidden, g, record: bool = False) -> CapsuleState:
        """Routing for single decode steps: ``hidden`` is (D,) or (S, D)."""
        enc = enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states)
        if enc.ndim == 2:
            enc = enc.reshape((1,) + enc.shape)
        h = np.atleast_2d(hidden.data if isinstance(hidden, Tensor) else hidden)
        with nx.no_grad():
            caps = self.route(enc, Tensor(h[None]), np.full((1, h.shape[0]), g), record=record)
        squeeze = np.ndim(hidden.data if isinstance(hidden, Tensor) else hidden) == 1
        idx = (0, 0) if squeeze else (0,)
        return CapsuleState(b=caps.b[idx], c=caps.c[idx], phi=caps.phi[idx],
                            g=np.asarray(caps.g[idx]), n_translated=caps.n_translated,
                            history=[h_[idx] for h_ in caps.history])

    def predict_target_bag(self, phi_t: Tensor) -> Tensor:
        """Log-distribution over target tokens from translated capsules."""
        return nx.log_softmax(nx.linear(phi_t, self.params["tok.Vd"], self.params["tok.bd"]))

    def predict_source_bag(self, phi_t: Tensor, phi_u: Tensor) -> Tensor:
        """Log-distribution over source tokens from all capsules."""
        both = nx.concat([phi_t, phi_u], axis=-1)
        return nx.log_softmax(nx.linear(both, self.params["tok.Ve"], self.params["tok.be"]))


def k_expand(v: Tensor) -> Tensor:
    """(B, H, K, dh) -> (B, H, 1, K, dh) for broadcasting against queries."""
    return v.reshape(v.shape[:2] + (1,) + v.shape[2:])


def route_capsules(model: Model, enc_states, hidden, g: int, record: bool = False) -> CapsuleState:
    if g < 1:
        raise ValueError("g must be >= 1")
    n = (enc_states.shape[-2])
    if g > n:
        raise ValueError(f"g={g} exceeds the {n} encoder states")
    return model.route_step(enc_states, hidden, g, record=record)


class IncrementalEncoder:
    """Token-at-a-time causal encoder with per-layer key/value caches.

    Produces exactly (bitwise) the rows that :meth:`Model.encode` produces for
    the same prefix.
    """

    def __init__(self, model: Model, limit: int | None = None):
        self.model = model
        self.limit = limit
        self.closed = False
        self.keys: list[Tensor | None] = [None] * model.config.layers
        self.values: list[Tensor | None] = [None] * model.config.layers
        self.rows: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def states(self) -> np.ndarray:
        d = self.model.config.d_model
        if not self.rows:
            return np.zeros((0, d), dtype=self.model.config.dtype)
        return np.stack(self.rows)

    def append(self, token: int) -> np.ndarray:
        """Encode one more source token; returns all states so far, shape (i, D)."""
        if self.closed:
            raise ValueError("source already ended with <eos>; cannot append")
        if self.limit is not None and len(self.rows) >= self.limit:
            raise ValueError(f"source declared with {self.limit} tokens; cannot append more")
        m = self.model
        pos = len(self.rows)
        with nx.no_grad():
            x = m._embed("src_embed", np.array([[token]]), offset=pos)
            for l in range(m.config.layers):
                h = m._ln(f"enc.{l}.ln1", x)
                P = m.params
                q = m._split_heads(nx.linear(h, P[f"enc.{l}.self.wq"], stable=True))
                k = m._split_heads(nx.linear(h, P[f"enc.{l}.self.wk"], stable=True))
                v = m._split_heads(nx.linear(h, P[f"enc.{l}.self.wv"], stable=True))
                if self.keys[l] is not None:
                    k = nx.concat([self.keys[l], k], axis=2)
                    v = nx.concat([self.values[l], v], axis=2)
                self.keys[l], self.values[l] = k, v
                att = m._merge_heads(m._attend(q, k, v, np.ones((1, 1, 1, pos + 1), bool), stable=True))
                x = x + nx.linear(att, P[f"enc.{l}.self.wo"], stable=True)
                h = m._ln(f"enc.{l}.ln2", x)
                x = x + m._ffn(f"enc.{l}.ffn", h, True, lambda t: t)
            z = m._ln("enc.ln", x)
        self.rows.append(z.data[0, 0])
        if token == EOS:
            self.closed = True
        return self.states
