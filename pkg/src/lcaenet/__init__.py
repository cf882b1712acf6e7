"""Infrared small-target detection with local-contrast attention."""
from .lca import LcaParams, lca_oracle, lcd_maps, local_contrast_attention
from .metrics import EvalReport, evaluate
from .model import LcaeNet, ModelConfig, count_flops, count_params, predict

__version__ = "0.1.0"

__all__ = [
    "LcaParams", "lca_oracle", "lcd_maps", "local_contrast_attention",
    "EvalReport", "evaluate",
    "LcaeNet", "ModelConfig", "count_flops", "count_params", "predict",
]
