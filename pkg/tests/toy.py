"""Small model configurations for fast gradient checks."""

from pedsense.detector import AggregatorConfig, ConvEncoderConfig, DetectorConfig
from pedsense.flow import FlowConfig
from pedsense.frontend import FrontendConfig

TOY_FRONTEND = FrontendConfig(rate=1600, fft_size=64, hop=32, n_bands=8, f_min=50.0, f_max=700.0)
TOY_DETECTOR = DetectorConfig(
    encoder=ConvEncoderConfig(channels=(3, 3, 4, 4, 4, 4), embedding_dim=8,
                              patch_shape=TOY_FRONTEND.patch_shape),
    aggregator=AggregatorConfig(layers=1, heads=2, model_dim=8, ffn_dim=12, context_seconds=4),
    frontend=TOY_FRONTEND)
TOY_FLOW = FlowConfig(window=5, n_columns=7, channels=(2, 3, 3, 2), hidden=6, c_max=3)
