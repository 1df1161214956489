"""Multi-scale segmentation heads (ASPP, cascade, Res2Net-Seg, WASP) on a
small numpy network engine, with dense-CRF post-processing."""

__version__ = "0.1.0"

from .analysis import count_parameters, receptive_field, receptive_fields
from .builders import HEAD_KINDS, TOY_WIDTHS, HeadWidths, build_head, build_network
from .config import RunConfig, load_config, parse_config
from .crf import CrfParams, DenseCRF, UnaryField, mean_field_refine
from .exceptions import ConfigError, DataError, DivergenceError, NumericalError, ShapeError, WaspError
from .estimator import SegmentationNetwork
from .gradcheck import grad_check
from .graph import ModuleGraph
from .metrics import ConfusionMatrix
from .training import PolySchedule, poly_lr, train

__all__ = [
    "HEAD_KINDS", "TOY_WIDTHS", "ConfigError", "ConfusionMatrix", "CrfParams", "DataError",
    "DenseCRF", "DivergenceError", "HeadWidths", "ModuleGraph", "NumericalError", "PolySchedule",
    "RunConfig", "SegmentationNetwork", "ShapeError", "UnaryField", "WaspError", "build_head",
    "build_network", "count_parameters", "grad_check", "load_config", "mean_field_refine",
    "parse_config", "poly_lr", "receptive_field", "receptive_fields", "train",
]
