"""Day-ahead PV power forecasting with cross-variable attention on a small numpy autodiff core."""

from __future__ import annotations

from .model import AttentionKind, ModelConfig, OutputMode, PVClient, VariantFlags, count_parameters

__all__ = ["AttentionKind", "ModelConfig", "OutputMode", "PVClient", "VariantFlags", "count_parameters"]
__version__ = "0.1.0"
