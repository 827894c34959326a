"""Grouped-attention CPU benchmark score prediction on a numpy autodiff core."""
from .model import NCPPConfig, NCPPParams, forward, init_model, predict
from .schema import FeatureSchema, default_schema, get_suite, load_schema
from .training import SplitSpec, TrainConfig, split_dataset, train

__version__ = "0.1.0"

__all__ = ["NCPPConfig", "NCPPParams", "forward", "init_model", "predict", "FeatureSchema",
           "default_schema", "get_suite", "load_schema", "SplitSpec", "TrainConfig", "split_dataset",
           "train", "__version__"]
