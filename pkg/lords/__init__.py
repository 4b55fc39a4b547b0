"""
lords - Low-Rank Decomposed Scaling quantization

Block-wise codebook quantization, SVD-initialised low-rank scale factors
S = BA, alternating refinement, straight-through fake quantization and
multiplicative scale fine-tuning for dense weight matrices.
"""

__version__ = "0.1.0"
__author__ = "lords contributors"

from .core.engine import LordsEngine
from .core.config import ConfigManager, LordsConfig
from .core.errors import LordsError
from .core.refine import RefineConfig, RefineReport
from .core.tensors import CodebookId, FactorPair, QuantizedTensor

__all__ = [
    "LordsEngine",
    "LordsConfig",
    "ConfigManager",
    "LordsError",
    "RefineConfig",
    "RefineReport",
    "CodebookId",
    "FactorPair",
    "QuantizedTensor",
]
