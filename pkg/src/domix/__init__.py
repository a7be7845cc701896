"""domix: per-domain LoRA pre-training plus bridged adapter composition.

Domain knowledge is accumulated in independent low-rank adapters, one per
domain corpus, trained in parallel against a frozen base model. For an end
task the adapters are concatenated and joined through a small square bridge
matrix whose diagonal gates how much each rank-1 knowledge component
contributes; fine-tuning keeps the input-side stacks frozen so every weight
update stays inside the accumulated knowledge subspace.
"""

import os as _os

# DOMIX_THREADS caps internal parallelism. BLAS pools read their knobs at
# import time, so this must run before numpy is first imported.
_cap = _os.environ.get("DOMIX_THREADS")
if _cap:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _cap)
del _os, _cap

from .errors import BundleError, ContractError, ShapeError
from .tensor import GradTape, Tensor, backward, make_rng
from .adapter import LoRAAdapter, delta_w, init_lora, rank_components
from .bridge import (
    ComposedAdapter,
    FreezeConfig,
    apply_freeze,
    compose,
    composed_delta,
    composed_forward,
)
from .model import ModelConfig, LinearSlot, ToyTransformer
from .training import MaskingPolicy, Metrics, TrainConfig, evaluate, finetune, mask_batch, pretrain_domain
from .analysis import ArchSpec, AblationSpec, count_trainable_params, extract_bridge_diagonals
from .bundle import AdapterBundle

__version__ = "0.1.0"

__all__ = [
    "AdapterBundle",
    "AblationSpec",
    "ArchSpec",
    "BundleError",
    "ComposedAdapter",
    "ContractError",
    "FreezeConfig",
    "GradTape",
    "LinearSlot",
    "LoRAAdapter",
    "MaskingPolicy",
    "Metrics",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "ToyTransformer",
    "TrainConfig",
    "apply_freeze",
    "backward",
    "compose",
    "composed_delta",
    "composed_forward",
    "count_trainable_params",
    "delta_w",
    "evaluate",
    "extract_bridge_diagonals",
    "finetune",
    "init_lora",
    "make_rng",
    "mask_batch",
    "pretrain_domain",
    "rank_components",
]
