"""Desk-scale fused SwiGLU MLP execution, traffic accounting, and tuning."""

from .fused import KernelConfig, LoopOrder, TileConfig, predicted_reuse_counts, run_fused, run_fused_stage1
from .tensor import AccessLedger, Matrix, MlpShape, ShapeError, elementwise_mul, matmul, sigmoid, silu
from .traffic import TrafficReport, arithmetic_intensity, predict_traffic, verify_against_instrumented
from .variants import MlpWeights, VariantTag, down_projection, run_four_kernel, run_two_kernel

__all__ = [
    "AccessLedger",
    "KernelConfig",
    "LoopOrder",
    "Matrix",
    "MlpShape",
    "MlpWeights",
    "ShapeError",
    "TileConfig",
    "TrafficReport",
    "VariantTag",
    "arithmetic_intensity",
    "down_projection",
    "elementwise_mul",
    "matmul",
    "predict_traffic",
    "predicted_reuse_counts",
    "run_four_kernel",
    "run_fused",
    "run_fused_stage1",
    "run_two_kernel",
    "sigmoid",
    "silu",
    "verify_against_instrumented",
]
