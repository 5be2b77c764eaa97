"""Fast feature fields: hash-encoded, sum-pooled and smoothed event windows."""
from .events import EventStream, EventWindow, SensorGeometry, discretize, read_events, window, write_events
from .field import FeatureField, FeatureFieldModel, SmootherConfig, featurize
from .hashgrid import HashGridConfig, encode
from .train import TrainConfig, focal_loss, train_f3

__all__ = [
    "EventStream", "EventWindow", "SensorGeometry", "discretize", "read_events", "window", "write_events",
    "FeatureField", "FeatureFieldModel", "SmootherConfig", "featurize",
    "HashGridConfig", "encode", "TrainConfig", "focal_loss", "train_f3",
]
__version__ = "0.1.0"
