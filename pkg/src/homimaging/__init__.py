"""HOM-interference depth imaging with SPAD cameras: simulation, coincidence
reconstruction, dip analysis and the pixel-size visibility model."""

from .analysis import (DipFit, DipModel, Edge, EstimationError, FitError, IllPosedError,
                       PixelDips, combine_channels, decimate, fit_dip, fit_pixel_dips,
                       invert_depth, noise_ratio,
                       raster_superresolve)
from .jpd import (Accumulator, CoincidenceTensor, accumulate, accumulate_blocks, antibunch_map,
                  bunch_map_adjacent, load_checkpoint, merge, project, save_checkpoint)
from .model import CAMERA_PRESETS, CameraModel, GeometryError, ScanPlan, SceneModel, SourceModel
from .scan import analyze_scan
from .simulate import (BinaryFrame, FormatError, FrameHeader, FrameStream, synthesize_frame,
                       synthesize_stream, transform_halves)
from .theory import QuadratureError, TheoryParams, visibility, visibility_curve

__version__ = "0.1.0"
