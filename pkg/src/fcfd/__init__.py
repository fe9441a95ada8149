"""Function-consistent feature distillation for staged convolutional networks."""
from .bridges import Bridge, BridgeSet, IdentityBridge, build_bridge_set, identity_bridge_set
from .losses import LossReport, LossWeights, total_loss
from .pathing import PathKey, PathSpec, RoutedBatchNorm2d, SamplerConfig, sample_paths
from .staged import FeatureMap, StagedModel, forward_from, forward_full
from .trainer import TrainConfig, train_offline, train_online

__all__ = [
    "Bridge", "BridgeSet", "IdentityBridge", "build_bridge_set", "identity_bridge_set",
    "LossReport", "LossWeights", "total_loss",
    "PathKey", "PathSpec", "RoutedBatchNorm2d", "SamplerConfig", "sample_paths",
    "FeatureMap", "StagedModel", "forward_from", "forward_full",
    "TrainConfig", "train_offline", "train_online",
]
__version__ = "0.1.0"
