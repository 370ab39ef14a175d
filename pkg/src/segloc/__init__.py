"""Single-scan LiDAR global localization against a segment map.

Submodules follow the data flow: geometry and ingest (geometry, kitti, synthetic),
front end (segmentation, descriptors), retrieval (kdtree, mapdb), back end
(verification), orchestration (pipeline, cli), and metrics (evaluation).
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DegenerateGeometry, SeglocError

__all__ = ["ConfigError", "DataError", "DegenerateGeometry", "SeglocError",
           "__version__"]
