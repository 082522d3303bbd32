"""Detection-guided single-image dehazing at desk scale.

Subpackages: haze synthesis (``hazegen``), guidance masks (``guidance``), the
grid detector (``detector``), the guided dehazing network (``network``),
metrics and evaluation (``evaluation``), the shapes corpus (``shapes``), and
the training/ablation pipeline (``training``).
"""

from .hazegen import HazeParams, depth_map, transmission_map, synthesize, dehaze_oracle
from .guidance import GuidanceMask, render_guidance, normalize_guidance, resample_guidance
from .detector import (Detection, DetectionTarget, DetLossWeights, GridDetector,
                       decode, detection_loss, freeze, pretrain_detector)
from .network import DehazeNet, NetworkConfig, count_params
from .evaluation import psnr, ssim, iou, average_precision, evaluate, EvalReport
from .shapes import ShapesSceneSpec, make_shapes_dataset
from .training import TrainConfig, restoration_loss, total_loss, train_dehazer, run_ablation

__version__ = "0.1.0"
