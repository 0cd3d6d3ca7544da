"""Memory-budgeted streaming KV-cache compression (TaR + VaN) with baselines."""

from .cache_engine import BudgetConfig, CompressionStats, Engine, FrameKV, LayerKV, engine_new
from .kvcore import FrameGeometry, ModelDims
from .scoring import PoolingConfig, SelectionResult

__all__ = [
    "BudgetConfig",
    "CompressionStats",
    "Engine",
    "FrameGeometry",
    "FrameKV",
    "LayerKV",
    "ModelDims",
    "PoolingConfig",
    "SelectionResult",
    "engine_new",
]
__version__ = "0.1.0"
