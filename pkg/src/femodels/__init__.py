"""Choice models with individual-specific functional intercepts and slopes.

Functional effects are learnt from socio-demographic features by a
histogram gradient-boosted tree engine or a small feed-forward network,
under a multinomial (softmax) or ordinal (CORAL) head.
"""

from .errors import ConfigError, DataError, FEError, NumericError, ParseError, SchemaError
from .functional_effects import FittedModel, ModelSpec, Slope, TrainReport, Utility, fit, train
from .panel_data import CsvSchema, PanelDataset, load_csv, save_csv, split_by_individual

__all__ = [
    "ConfigError", "DataError", "FEError", "NumericError", "ParseError", "SchemaError",
    "FittedModel", "ModelSpec", "Slope", "TrainReport", "Utility", "fit", "train",
    "CsvSchema", "PanelDataset", "load_csv", "save_csv", "split_by_individual",
]
__version__ = "0.1.0"
