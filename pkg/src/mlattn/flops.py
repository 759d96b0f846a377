"""Closed-form operation counts.

Every scalar multiply, add, compare, divide, exp, cos and sin costs one
operation. A dense ``(m x p) @ (p x n)`` product costs ``m*n*(2p - 1)``.

Decoder counts follow autoregressive inference: one decoder pass per target
position, cross-attention keys/values projected once, linear attention with
running accumulators (the ``reuse`` variant) unless ``naive`` is asked for.
"""
from __future__ import annotations

from .attention import Mechanism

SOFTMAX_OPS_PER_SCORE = 6  # scale, max, subtract, exp, sum, divide
COSFORMER_ROW_OPS = 4  # position ratio (mul, div), cos, sin


def matmul_flops(m: int, p: int, n: int) -> int:
    return m * n * (2 * p - 1)


def layer_norm_flops(rows: int, d: int) -> int:
    # mean d, centre d, variance 2d, eps + sqrt 2, divide d, gain d, bias d
    return rows * (7 * d + 2)


def visible_pairs(n1: int, n2: int, causal: bool) -> int:
    """Query/key pairs that carry a weight (key j visible to query i iff j <= i when causal)."""
    if not causal:
        return n1 * n2
    full = min(n1, n2)
    # rows 0..full-1 see i+1 keys, the rest see all n2
    return full * (full + 1) // 2 + max(0, n1 - n2) * n2


def attention_flops(mech, n1: int, n2: int, d_kh: int, d_vh: int, heads: int = 1,
                    causal: bool = False, variant: str = "reuse") -> int:
    """Core attention cost (no projections) for ``heads`` heads."""
    mech = Mechanism.parse(mech)
    if variant not in ("reuse", "naive"):
        raise ValueError(f"unknown variant {variant!r}")
    pairs = visible_pairs(n1, n2, causal)
    if mech is Mechanism.SOFTMAX:
        per_head = (pairs * (2 * d_kh - 1)
                    + SOFTMAX_OPS_PER_SCORE * pairs
                    + d_vh * (2 * pairs - n1))
        return heads * per_head
    parts = mech.parts
    width = parts * d_kh
    rows = n1 + n2
    features = rows * d_kh  # ReLU compares
    if mech is Mechanism.COSFORMER:
        features += rows * (COSFORMER_ROW_OPS + 2 * d_kh)
    per_key = 2 * width * d_vh + width
    consumed = min(n1, n2) if causal else n2
    keys = per_key * (pairs if variant == "naive" else consumed)
    per_query = d_vh * (2 * width - 1) + (2 * width - 1) + 1 + d_vh
    return heads * (features + keys + n1 * per_query)


def _ffn_flops(rows: int, d: int, f: int) -> int:
    return matmul_flops(rows, d, f) + 2 * rows * f + matmul_flops(rows, f, d) + rows * d


def estimate_flops(cfg, n_src: int, n_tgt: int, breakdown: bool = False):
    """Single-sample forward cost of ``cfg`` at source/target lengths."""
    if n_src < 1 or n_tgt < 1:
        raise ValueError("sequence lengths must be >= 1")
    d, f, h = cfg.d_model, cfg.ffn_dim, cfg.heads
    dk = cfg.geometry.d_kh
    parts = {"esa": 0, "dsa": 0, "dca": 0, "projections": 0, "ffn": 0, "norm_residual": 0}
    for _ in range(cfg.layers_enc):
        parts["norm_residual"] += 2 * layer_norm_flops(n_src, d) + 2 * n_src * d
        parts["projections"] += 4 * matmul_flops(n_src, d, d)
        parts["esa"] += attention_flops(cfg.esa, n_src, n_src, dk, dk, h, causal=False)
        parts["ffn"] += _ffn_flops(n_src, d, f)
    if cfg.layers_dec:
        parts["norm_residual"] += n_tgt * d  # positional encoding
    for _ in range(cfg.layers_dec):
        parts["norm_residual"] += 3 * layer_norm_flops(n_tgt, d) + 3 * n_tgt * d
        parts["projections"] += 6 * matmul_flops(n_tgt, d, d) + 2 * matmul_flops(n_src, d, d)
        parts["dsa"] += attention_flops(cfg.dsa, n_tgt, n_tgt, dk, dk, h, causal=True)
        parts["dca"] += attention_flops(cfg.dca, n_tgt, n_src, dk, dk, h, causal=False)
        parts["ffn"] += _ffn_flops(n_tgt, d, f)
    total = sum(parts.values())
    return (total, parts) if breakdown else total


def decode_attention_flops(mech, role: str, n1: int, n2: int, d_kh: int, d_vh: int,
                           variant: str = "reuse") -> int:
    """Single-head decode cost as timed by the sweeps (``role`` is ``self`` or ``cross``)."""
    return attention_flops(mech, n1, n2, d_kh, d_vh, 1, causal=(role == "self"), variant=variant)
