"""Block-selected sparse attention simulator.

Exact dense oracles, two instrumented CPU engines for the selected-attention
schedule (query-major and KV-block-major), compressed/sliding branches with
gated combination, and the closed-form memory/FLOP cost model, all over a
shared (token, feature, head) tensor layout. Numeric inner loops run on a
compiled core when available, with a pure-numpy fallback selected at import.
"""

from ._kernels import available_backends, get_backend, set_backend
from .branches import (
    CompressedKV,
    compress_kv,
    compressed_attention_forward,
    gated_combine,
    sliding_attention_forward,
)
from .config import (
    AttentionConfig,
    ConfigError,
    load_config_file,
    make_config,
    parse_config_text,
    validate_config,
)
from .costmodel import (
    CostBreakdown,
    analytic_breakdown,
    cost_ratio,
    kv_major_analytic_cost,
    measured_cost,
    query_major_analytic_cost,
)
from .meter import PhaseCounters, TrafficMeter
from .oracle import (
    AttentionOutput,
    BlockMask,
    band_mask,
    causal_mask,
    dense_backward,
    full_attention_forward,
    mask_from_selection,
    masked_attention_forward,
)
from .scenario import Scenario
from .selection import (
    InverseIndex,
    SelectionError,
    SelectionTensor,
    build_inverse_index,
    full_selection,
    importance_scores_from_compressed,
    load_selection,
    save_selection,
    select_topk_blocks,
    selection_from_inverse,
    self_block_selection,
    validate_selection,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "BlockMask",
    "CompressedKV",
    "ConfigError",
    "CostBreakdown",
    "InverseIndex",
    "PhaseCounters",
    "Scenario",
    "SelectionError",
    "SelectionTensor",
    "TrafficMeter",
    "analytic_breakdown",
    "available_backends",
    "band_mask",
    "build_inverse_index",
    "causal_mask",
    "compress_kv",
    "compressed_attention_forward",
    "cost_ratio",
    "dense_backward",
    "full_attention_forward",
    "full_selection",
    "gated_combine",
    "get_backend",
    "importance_scores_from_compressed",
    "kv_major_analytic_cost",
    "load_config_file",
    "load_selection",
    "make_config",
    "mask_from_selection",
    "masked_attention_forward",
    "measured_cost",
    "parse_config_text",
    "query_major_analytic_cost",
    "save_selection",
    "select_topk_blocks",
    "selection_from_inverse",
    "self_block_selection",
    "set_backend",
    "sliding_attention_forward",
    "validate_config",
    "validate_selection",
]
