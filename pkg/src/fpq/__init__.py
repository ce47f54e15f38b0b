"""Floating-point post-training quantization: ExMy emulation and format/bias search."""

__version__ = "0.1.0"

from .formats import FpFormat, bias_from_clip_max, clip_max, fake_quantize, format_space, quantize_value, unit_grid
from .quantizer import ChannelShiftedScheme, Granularity, QuantScheme, quantize_tensor, split_channel_bias
from .search import LayerTask, Mode, SearchConfig, run_pipeline, search_layer, search_layer_preshifted

__all__ = [
    "ChannelShiftedScheme",
    "FpFormat",
    "Granularity",
    "LayerTask",
    "Mode",
    "QuantScheme",
    "SearchConfig",
    "bias_from_clip_max",
    "clip_max",
    "fake_quantize",
    "format_space",
    "quantize_tensor",
    "quantize_value",
    "run_pipeline",
    "search_layer",
    "search_layer_preshifted",
    "split_channel_bias",
    "unit_grid",
]
