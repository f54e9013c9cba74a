"""Configuration records and shared tensor conventions.

Tensor layout used throughout the package: attention tensors are float64
ndarrays with axes (token, feature, head):

    Q   : (N, d_K, h)    query tensor
    K   : (N, d_K, h_K)  key tensor
    V   : (N, d_V, h_K)  value tensor
    out : (N, d_V, h)    attention output
    lse : (h, N)         per (head, token) log-sum-exp of attended logits

Query head ``j`` reads KV head ``j // g`` where ``g = h / h_K`` is the
query-group size. Logits are scaled by ``1 / sqrt(d_K)``.

All arithmetic is double precision. ``bytes_per_elem`` only affects traffic
accounting, never the numerics.
"""

from __future__ import annotations

import dataclasses

import numpy as np


class ConfigError(ValueError):
    """Raised when an AttentionConfig violates its invariants."""


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    """Shape, sparsity, and modeled-hardware parameters.

    ``B_Q`` and ``W`` default to ``min(16, N)`` and ``min(512, N)`` when left
    unset; they are resolved by :func:`validate_config`. ``g`` and ``b`` are
    derived there as well.
    """

    N: int
    d_K: int
    d_V: int
    h: int
    h_K: int
    B_K: int
    T: int
    B_Q: int | None = None
    W: int | None = None
    bytes_per_elem: int = 2
    min_tile: int = 8
    g: int = dataclasses.field(default=0, compare=True)
    b: int = dataclasses.field(default=0, compare=True)

    @property
    def d(self) -> int:
        """Uniform head dimension; defined only when d_K == d_V."""
        if self.d_K != self.d_V:
            raise ConfigError("non-uniform head dims (d_K=%d, d_V=%d)" % (self.d_K, self.d_V))
        return self.d_K

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.d_K))


_DEFAULT_B_Q = 16
_DEFAULT_W = 512


def validate_config(cfg: AttentionConfig) -> AttentionConfig:
    """Check every config invariant and return the config with derived fields.

    Unset ``B_Q``/``W`` are clamped to the sequence length. All violated
    invariants are reported by name in a single ConfigError. Validation is
    idempotent: validating a validated config returns an equal record.
    """
    problems = []
    for name in ("N", "d_K", "d_V", "h", "h_K", "B_K", "T"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))

    B_Q = cfg.B_Q if cfg.B_Q is not None else min(_DEFAULT_B_Q, cfg.N)
    W = cfg.W if cfg.W is not None else min(_DEFAULT_W, cfg.N)

    if cfg.h % cfg.h_K != 0:
        problems.append("h not divisible by h_K")
    if cfg.N % cfg.B_K != 0:
        problems.append("N not divisible by B_K")
    b = cfg.N // cfg.B_K
    if cfg.N % cfg.B_K == 0 and cfg.T > b:
        problems.append(f"T exceeds b={b}")
    if not 1 <= B_Q <= cfg.N:
        problems.append("B_Q out of range [1, N]")
    if not 1 <= W <= cfg.N:
        problems.append("W out of range [1, N]")
    if cfg.min_tile < 1:
        problems.append("min_tile must be >= 1")
    if cfg.bytes_per_elem not in (2, 4, 8):
        problems.append("bytes_per_elem not in {2, 4, 8}")
    if problems:
        raise ConfigError("; ".join(problems))

    return dataclasses.replace(cfg, B_Q=B_Q, W=W, g=cfg.h // cfg.h_K, b=b)


def make_config(**kwargs) -> AttentionConfig:
    """Construct and validate a config in one step."""
    return validate_config(AttentionConfig(**kwargs))


_INT_FIELDS = (
    "N", "d_K", "d_V", "h", "h_K", "B_K", "T", "B_Q", "W",
    "bytes_per_elem", "min_tile",
)


def parse_config_text(text: str) -> AttentionConfig:
    """Parse a flat ``key = value`` config (one pair per line, # comments)."""
    values: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _INT_FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = int(val.strip())
        except ValueError:
            raise ConfigError(f"line {lineno}: non-integer value for {key!r}") from None
    missing = [k for k in ("N", "d_K", "d_V", "h", "h_K", "B_K", "T") if k not in values]
    if missing:
        raise ConfigError("missing required config keys: " + ", ".join(missing))
    return make_config(**values)


def load_config_file(path) -> AttentionConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def as_headed(x: np.ndarray, tokens: int, dim: int, heads: int, name: str) -> np.ndarray:
    """Validate the (token, feature, head) layout and return a float64 view."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tokens, dim, heads):
        raise ValueError(
            f"shape mismatch for {name}: expected {(tokens, dim, heads)}, got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")
    return x
