"""Asymmetric two-expert transformer with a mid-layer attention bridge."""

from .config import (
    BridgePlan,
    BridgeSpec,
    ExpertSpec,
    HBridgeConfig,
    TrainSpec,
    resolve_bridge_plan,
)
from .model import HBridgeModel

__version__ = "0.1.0"

__all__ = [
    "BridgePlan",
    "BridgeSpec",
    "ExpertSpec",
    "HBridgeConfig",
    "HBridgeModel",
    "TrainSpec",
    "resolve_bridge_plan",
]
