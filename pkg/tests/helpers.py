"""Independent oracles and shared fixtures for the test suite.

The brute-force attention implementations here deliberately avoid the
package's vectorized code paths: plain Python loops over scalars, so they can
serve as an independent route for the equivalence tests.
"""

from __future__ import annotations

import math

import numpy as np

from blockattn import make_config
from blockattn.rng import make_dout, make_qkv, make_scores
from blockattn.selection import select_topk_blocks


def brute_force_masked(Q, K, V, allow, cfg):
    """Per-token gather-softmax loop. allow: (h_K, N, N) boolean."""
    N, d_V, h = cfg.N, cfg.d_V, cfg.h
    out = np.zeros((N, d_V, h))
    lse = np.zeros((h, N))
    for j in range(h):
        kh = j // cfg.g
        for t in range(N):
            positions = [s for s in range(N) if allow[kh, t, s]]
            logits = []
            for s in positions:
                acc = 0.0
                for c in range(cfg.d_K):
                    acc += Q[t, c, j] * K[s, c, kh]
                logits.append(acc / math.sqrt(cfg.d_K))
            m = max(logits)
            weights = [math.exp(z - m) for z in logits]
            denom = sum(weights)
            for w, s in zip(weights, positions):
                for c in range(d_V):
                    out[t, c, j] += (w / denom) * V[s, c, kh]
            lse[j, t] = m + math.log(denom)
    return out, lse


def brute_force_full(Q, K, V, cfg):
    allow = np.zeros((cfg.h_K, cfg.N, cfg.N), dtype=bool)
    for t in range(cfg.N):
        allow[:, t, : t + 1] = True
    return brute_force_masked(Q, K, V, allow, cfg)


def central_differences(loss, arrays, step=1e-5):
    """Finite-difference gradients of ``loss()`` w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss()
            flat[idx] = orig - step
            down = loss()
            flat[idx] = orig
            fd_flat[idx] = (up - down) / (2 * step)
        grads.append(fd)
    return grads


def max_rel_error(fd, analytic, floor=1e-4):
    """Per-entry relative error with a denominator floor for tiny entries."""
    denom = np.maximum.reduce([np.abs(fd), np.abs(analytic), np.full_like(fd, floor)])
    return float((np.abs(fd - analytic) / denom).max())


def random_scenario_configs(rng, count, *, max_n=1024, max_d=64):
    """Valid random configs for the oracle-equivalence sweeps."""
    configs = []
    while len(configs) < count:
        N = int(rng.choice([64, 128, 256, 512, max_n]))
        B_K = int(rng.choice([4, 8, 16, 32]))
        if N % B_K:
            continue
        b = N // B_K
        g = int(rng.choice([1, 2, 4, 8]))
        h_K = int(rng.choice([1, 2]))
        d = int(rng.choice([8, 16, 32, max_d]))
        T = int(rng.integers(1, min(b, 8) + 1))
        B_Q = int(rng.choice([4, 8, 16]))
        configs.append(
            make_config(N=N, d_K=d, d_V=d, h=g * h_K, h_K=h_K, B_K=B_K, T=T, B_Q=B_Q)
        )
    return configs


def scenario_instance(cfg, seed):
    Q, K, V = make_qkv(cfg, seed)
    sel = select_topk_blocks(make_scores(cfg, seed), cfg)
    dOut = make_dout(cfg, seed)
    return Q, K, V, sel, dOut
