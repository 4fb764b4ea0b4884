"""Joint embeddings of images, locations and capture times on the sphere and the time torus."""

from .geomath import CellId, GeoCoord, TimeBinId, TorusTime
from .model import GeoTimeModel, ModelConfig

__all__ = ["CellId", "GeoCoord", "GeoTimeModel", "ModelConfig", "TimeBinId", "TorusTime"]
__version__ = "0.1.0"
