"""Seeded, named random streams for reproducible fixtures.

Every tensor a scenario needs is drawn from its own PCG64 stream keyed by
(seed, stream id), so adding a tensor never perturbs the others and two runs
with the same seed are bit-identical across platforms.
"""

from __future__ import annotations

import numpy as np

from .config import AttentionConfig

_STREAM_IDS = {"q": 1, "k": 2, "v": 3, "gates": 4, "scores": 5, "dout": 6}


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in _STREAM_IDS:
        raise ValueError(f"unknown stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_IDS[name]]))


def make_qkv(cfg: AttentionConfig, seed: int):
    q = stream(seed, "q").standard_normal((cfg.N, cfg.d_K, cfg.h))
    k = stream(seed, "k").standard_normal((cfg.N, cfg.d_K, cfg.h_K))
    v = stream(seed, "v").standard_normal((cfg.N, cfg.d_V, cfg.h_K))
    return q, k, v


def make_gates(cfg: AttentionConfig, seed: int) -> np.ndarray:
    return stream(seed, "gates").uniform(0.0, 1.0, size=(cfg.N, 3))


def make_scores(cfg: AttentionConfig, seed: int) -> np.ndarray:
    return stream(seed, "scores").uniform(0.0, 1.0, size=(cfg.h_K, cfg.N, cfg.b))


def make_dout(cfg: AttentionConfig, seed: int) -> np.ndarray:
    return stream(seed, "dout").standard_normal((cfg.N, cfg.d_V, cfg.h))
