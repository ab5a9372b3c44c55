"""Example-based depth estimation by hard-EM patch synthesis."""

from .grids import (ChannelGrid, ChannelWeights, DepthMap, EmptyForegroundError,
                    ExampleDatabase, MappingExample, foreground_centroid,
                    normalize_depth_frame)
from .modes import MODES, ModeSpec, run_mode
from .optimizer import (AssignmentField, SynthesisConfig, SynthesisResult,
                        SynthesisSchema, estimate)
from .pyramid import Pyramid, build_gaussian, build_laplacian, collapse

__all__ = [
    "ChannelGrid", "ChannelWeights", "DepthMap", "EmptyForegroundError",
    "ExampleDatabase", "MappingExample", "foreground_centroid",
    "normalize_depth_frame", "MODES", "ModeSpec", "run_mode",
    "AssignmentField", "SynthesisConfig", "SynthesisResult", "SynthesisSchema",
    "estimate", "Pyramid", "build_gaussian", "build_laplacian", "collapse",
]

__version__ = "0.1.0"
