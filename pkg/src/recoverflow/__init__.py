"""Optical flow with a removable cost volume."""

from .costvolume import CostVolumeMode
from .netblocks import ModelConfig, RecoverFlow

__all__ = ["CostVolumeMode", "ModelConfig", "RecoverFlow"]
