"""Joint gaze following and retail object detection on a shared extractor."""
from .config import ConfigError, LossWeights, ModelConfig, RunConfig, load_config
from .data import Sample, SceneSpec, generate_sample, read_dataset, write_dataset
from .defocus import Defocus, Focus, defocus, flop_count, focus
from .estimator import GazeObjectPredictor
from .geometry import BoundingBox, GazeVector, box_mean_energy, iou, select_gaze_object, uoc, wuoc
from .losses import energy_aggregation_loss, gaussian_gt_heatmap
from .metrics import MetricReport, average_precision, gaze_auc, nms
from .model import GazeObjectNet
from .pipeline import evaluate, infer, visualize
from .training import Trainer

__version__ = "0.1.0"
