"""qqq: a W4A8 post-training quantization toolkit.

Two-stage quantization (adaptive outlier smoothing + Hessian-compensated
weight quantization) with a bit-exact CPU reference of the per-channel and
per-group W4A8 GEMM dataflows, a toy-model evaluation harness, and a
self-describing checkpoint container.
"""

from .checkpoint import Checkpoint, TensorRecord, read_checkpoint, write_checkpoint
from .errors import (
    CalibrationError,
    CheckpointFormatError,
    ConfigError,
    CorruptionError,
    DataError,
    NumericalError,
    QQQError,
    ShapeError,
)
from .gemm import (
    FusedScales,
    GemmOutput,
    fast_f16_to_i8,
    fast_i4_to_f16,
    fast_i4_to_i8,
    fused_dequant_quant,
    gemm_i8_i32,
    w4a8_gemm_per_channel,
    w4a8_gemm_per_group,
)
from .gptq import (
    CompensationResult,
    HessianState,
    build_hessian,
    damped_cholesky_inverse,
    gptq_sweep,
    rtn_quantize,
)
from .numerics import Binary16, decode_f16, encode_f16, fma_f16, matmul_ref
from .pipeline import (
    CalibrationSet,
    QuantizedLayer,
    QuantizeOptions,
    apply_quant_linear,
    dequantized_forward,
    eval_report,
    forward_fp,
    forward_quant,
    quantize_layer,
    quantize_model,
    synthetic_tokens,
)
from .quantize import (
    QuantSpec,
    QuantizedActivations,
    QuantizedWeights,
    dequantize_ref,
    pack_i4,
    quant_act_per_token,
    quant_weight_per_channel,
    quant_weight_per_group,
    requant_scale,
    unpack_i4,
)
from .smoothing import (
    SmoothingPlan,
    channel_maxima,
    search_sigma,
    select_outlier_channels,
    smoothing_objective,
    smoothing_vector,
)
from .toy_model import ToyModel

__version__ = "0.1.0"
