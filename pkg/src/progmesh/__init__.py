"""Progressive multi-view mesh inference: global probability volume, then local refinement."""
from ._accel import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
