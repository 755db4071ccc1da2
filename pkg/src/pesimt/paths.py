"""Translation paths: how many source tokens are visible at each target step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TranslationPath:
    """``g[t-1]`` = number of source tokens available when writing target token t."""

    g: np.ndarray
    k: int
    gammas: np.ndarray | None = None
    actions: str = field(default="")

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.int64)
        if not self.actions:
            self.actions = actions_from_g(self.g)

    def __len__(self) -> int:
        return len(self.g)

    def is_valid(self, n_src: int) -> bool:
        g = self.g
        return bool(len(g) == 0 or (np.all(np.diff(g) >= 0) and g[0] >= 1 and g[-1] <= n_src))


def actions_from_g(g) -> str:
    """READ/WRITE trace (``R``/``W``) implied by a path."""
    out = []
    read = 0
    for gt in np.asarray(g):
        out.append("R" * int(gt - read))
        out.append("W")
        read = int(gt)
    return "".join(out)


def g_from_actions(actions: str) -> np.ndarray:
    g, read = [], 0
    for a in actions:
        if a == "R":
            read += 1
        elif a == "W":
            g.append(read)
        else:
            raise ValueError(f"unknown action {a!r}")
    return np.asarray(g, dtype=np.int64)


def waitk_g(t: int, k: int, n_src: int) -> int:
    """Wait-k availability ``min(k + t - 1, I)`` for 1-based step ``t``."""
    if t < 1 or k < 1 or n_src < 1:
        raise ValueError("t, k and I must all be >= 1")
    return min(k + t - 1, n_src)


def waitk_path(k: int, n_src: int, n_tgt: int) -> TranslationPath:
    t = np.arange(1, n_tgt + 1)
    return TranslationPath(np.minimum(k + t - 1, n_src), k=k)


def full_path(n_src: int, n_tgt: int) -> TranslationPath:
    return TranslationPath(np.full(n_tgt, n_src), k=n_src)


def sample_disturbed_path(n_src: int, n_tgt: int, r: int, rng: np.random.Generator,
                          k: int | None = None) -> TranslationPath:
    """Wait-k path with random read increments.

    ``k ~ U{1..I}`` (unless given), then ``g(1) = min(k + gamma_1, I)`` and
    ``g(t) = min(g(t-1) + gamma_t, I)`` with ``gamma_t ~ U{0..r}`` i.i.d.
    """
    if n_src < 1 or n_tgt < 1 or r < 1:
        raise ValueError("need I >= 1, M >= 1 and r >= 1")
    if k is None:
        k = int(rng.integers(1, n_src + 1))
    gammas = rng.integers(0, r + 1, size=n_tgt)
    # clamping commutes with the running sum because increments are >= 0
    g = np.minimum(k + np.cumsum(gammas), n_src)
    return TranslationPath(g, k=k, gammas=gammas)
