"""vpsketch: hybrid video coding with sketch primitives and texture models.

Explicit, trackable structure is coded by sparse primitives; the textural
remainder is coded implicitly by maximum-entropy models constrained on
spatio-temporal filter statistics. The top-level pipeline lives in
vpsketch.pipeline; vpsketch.cli exposes the command-line front end.
"""

from .video import (
    VideoVolume,
    Histogram,
    Brick,
    RegionLabeling,
    make_volume,
    quantize,
    build_histogram,
    make_bin_edges,
    tv_distance,
    l1_gap,
    LABEL_TRACKABLE,
    LABEL_SKETCHABLE,
)
from .video_io import load_video, save_video, VideoFormatError

__version__ = "0.1.0"

__all__ = [
    "VideoVolume",
    "Histogram",
    "Brick",
    "RegionLabeling",
    "make_volume",
    "quantize",
    "build_histogram",
    "make_bin_edges",
    "tv_distance",
    "l1_gap",
    "LABEL_TRACKABLE",
    "LABEL_SKETCHABLE",
    "load_video",
    "save_video",
    "VideoFormatError",
    "__version__",
]
