"""Seeded benchmark/verification scenarios.

A scenario pins everything a run needs: the validated config, the seed that
determines every tensor and the selection, the selection policy, and the
repeat count for timing. Equal scenarios produce byte-identical reports
except for wall-clock columns.
"""

from __future__ import annotations

import dataclasses

from . import rng
from .branches import compress_kv
from .config import AttentionConfig, validate_config
from .selection import (
    SelectionTensor,
    full_selection,
    importance_scores_from_compressed,
    select_topk_blocks,
    self_block_selection,
)

SELECTION_MODES = ("random_uniform", "from_scores", "self_block_only", "full")


@dataclasses.dataclass
class Scenario:
    cfg: AttentionConfig
    seed: int = 0
    selection_mode: str = "random_uniform"
    repeat: int = 3

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")


def resolve(scn: Scenario) -> tuple[AttentionConfig, SelectionTensor]:
    """Materialize the scenario's config and selection tensor.

    ``full`` mode widens T to b so every causal block is selected.
    """
    cfg = scn.cfg
    if scn.selection_mode == "full" and cfg.T != cfg.b:
        cfg = validate_config(dataclasses.replace(cfg, T=cfg.b))
    if scn.selection_mode == "random_uniform":
        sel = select_topk_blocks(rng.make_scores(cfg, scn.seed), cfg)
    elif scn.selection_mode == "from_scores":
        Q, K, V = rng.make_qkv(cfg, scn.seed)
        cmp = compress_kv(K, V, cfg)
        sel = select_topk_blocks(importance_scores_from_compressed(Q, cmp.K_cmp, cfg), cfg)
    elif scn.selection_mode == "self_block_only":
        sel = self_block_selection(cfg)
    else:
        sel = full_selection(cfg)
    return cfg, sel


def tensors(cfg: AttentionConfig, seed: int):
    return rng.make_qkv(cfg, seed)
