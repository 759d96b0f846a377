"""Modular linearized attention: kernels, incremental decoding, length prediction, benchmarks."""
from ._backend import BACKEND
from .attention import (EPS, AttentionWeights, HeadGeometry, Mechanism, ReweightLengths,
                        cosformer_feature_maps, linear_attention, multi_head_attention,
                        relu_feature_map, scaled_dot_attention, similarity_attention_oracle)
from .decoder import (DecoderBlockState, StepInput, decode_step, init_state,
                      run_incremental_cross_attention, run_incremental_self_attention)
from .length import (CorpusPair, FixedLength, LutPredictor, RatioPredictor, fit_lut, fit_ratio,
                     predict_lut, predict_ratio)
from .numerics import ConfigError, Rng, ShapeError, matmul, random_matrix, softmax_rows

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "EPS", "AttentionWeights", "HeadGeometry", "Mechanism", "ReweightLengths",
    "cosformer_feature_maps", "linear_attention", "multi_head_attention", "relu_feature_map",
    "scaled_dot_attention", "similarity_attention_oracle", "DecoderBlockState", "StepInput",
    "decode_step", "init_state", "run_incremental_cross_attention", "run_incremental_self_attention",
    "CorpusPair", "FixedLength", "LutPredictor", "RatioPredictor", "fit_lut", "fit_ratio",
    "predict_lut", "predict_ratio", "ConfigError", "Rng", "ShapeError", "matmul", "random_matrix",
    "softmax_rows",
]
