"""Bitemporal change detection with fractal Tanimoto attention, on a small numpy autodiff core."""
from .attention import FracTALAttention, Fusion, channel_similarity, self_fusion, spatial_similarity
from .blocks import CEECNetUnit, FracTALResUnit, make_unit
from .ftnmt import FTConfig, ftnmt_avg, ftnmt_complement, ftnmt_loss, tanimoto_d
from .mantis import Mantis, MantisConfig, crisp_sigmoid, feature_entropy

__version__ = "0.1.0"

__all__ = [
    "CEECNetUnit",
    "FTConfig",
    "FracTALAttention",
    "FracTALResUnit",
    "Fusion",
    "Mantis",
    "MantisConfig",
    "channel_similarity",
    "crisp_sigmoid",
    "feature_entropy",
    "ftnmt_avg",
    "ftnmt_complement",
    "ftnmt_loss",
    "make_unit",
    "self_fusion",
    "spatial_similarity",
    "tanimoto_d",
]
