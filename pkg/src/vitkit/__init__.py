"""Numpy Vision Transformers with parallel block layouts, scoped fine-tuning and patch-local stems."""
from .analyzer import ComplexityReport, count_flops, count_params, flops_oracle, memory_estimate, scaling_table
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ViTConfig, parse_layout, preset
from .errors import (ConfigError, ConsistencyError, DimensionError, DTypeError, EvaluationError, FormatError,
                     TrainingError, ValidationError, VitError)
from .finetune import TuneScope, finetune_resolution, freeze_verify, select_trainable
from .masking import PatchMask, apply_mask_pixels, apply_mask_tokens, commutation_check, mim_loss, sample_mask
from .model import (Model, build_model, forward_parallel, forward_sequential, interpolate_pos_embed, regroup)
from .rng import Rng
from .stems import Stem, StemSpec, init_stem, patch_independence_check
from .tensor import Tensor

__version__ = "0.1.0"
