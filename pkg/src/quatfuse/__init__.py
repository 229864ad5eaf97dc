"""Camera-first 3D detection with quaternion LiDAR feature integrators."""

from . import fusion, lidarproj, numcore, quat, synthgen, toydet
from .numcore import Tensor

__all__ = ["Tensor", "fusion", "lidarproj", "numcore", "quat", "synthgen", "toydet"]
__version__ = "0.1.0"
