"""Estimate and cluster row-crop navigation waypoints from occupancy grids, and plan coverage paths over them."""

__version__ = "0.1.0"

from .errors import CropwayError
from .fieldgen import GenConfig, WaypointSet, generate_field
from .model import ModelConfig, TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .inference import DecodeConfig, predict
from .planner import plan_coverage
