"""Context-model compression for anchor-based 3D Gaussian scenes.

The package trains a binarized multi-resolution hash grid plus a small
shared MLP that predicts, per anchor, adaptive quantization steps and the
Gaussian probability model of every attribute value, then entropy-codes the
quantized attributes into a bit-exact five-section container.
"""

__version__ = "0.1.0"

from .errors import (
    CdfDesyncError,
    CoderError,
    DivergenceError,
    FormatError,
    HaczError,
    SceneValidationError,
    SectionOverrunError,
    SymbolRangeError,
    TruncatedFileError,
)
from .scene import (
    AABB,
    AnchorScene,
    load_scene,
    normalize_locations,
    save_scene,
    scene_bounds,
    synth_scene,
    validate_scene,
)
from .hashgrid import (
    GridConfig,
    HashGrid,
    grid_new,
    grid_pack,
    grid_unpack,
    hash_entropy_loss,
    hash_index,
    interpolate,
    interpolate_batch,
)
from .ratemodel import (
    ContextModel,
    RateParams,
    bin_probability,
    entropy_bits,
    model_forward,
    model_forward_batch,
    model_new,
    per_anchor_bits,
    quantize_test,
    quantize_train,
    scene_symbols,
    total_loss,
)
from .masking import MaskSet, hard_mask, mask_loss, prune
from .coder import (
    BinaryModel,
    CdfTable,
    RangeDecoder,
    RangeEncoder,
    build_cdf,
    build_tables,
    decode_bits,
    encode_bits,
    range_decode,
    range_encode,
)
from .container import (
    DecodedScene,
    HaczBlob,
    coding_rate_params,
    decode_scene,
    encode_scene,
    inspect_blob,
    verify_roundtrip,
)
from .trainer import (
    FitResult,
    TrainConfig,
    baseline_bits,
    fit,
    grad_check,
    optimizer_step,
    pooled_bits_per_param,
)
from .reports import VoxelRecord, bit_allocation_map, family_report
from .estimator import HacCodec

__all__ = [name for name in dir() if not name.startswith("_")]
