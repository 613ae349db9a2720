"""Spatial-temporal graph models for active speaker detection.

Face-track records become sparse forward, backward and undirected graphs;
a three-stream graph network scores every face occurrence as speaking or
not.  Everything runs on numpy/scipy with hand-written gradients.
"""

from .graph import (EdgeSet, GraphSegment, build_backward, build_forward, build_segment,
                    build_undirected, segment_stats)
from .metrics import average_precision, map_over_groups, sweep_report
from .model import (ModelConfig, ModelParams, init_params, load_checkpoint, model_backward,
                    model_forward, param_count, save_checkpoint)
from .records import FaceRecord, RecordError, RecordStream, parse_records, sort_and_partition
from .synth import DatasetConfig, SceneConfig, gen_scene, make_dataset
from .train import TrainConfig, check_gradients, train

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig", "EdgeSet", "FaceRecord", "GraphSegment", "ModelConfig", "ModelParams",
    "RecordError", "RecordStream", "SceneConfig", "TrainConfig", "average_precision",
    "build_backward", "build_forward", "build_segment", "build_undirected", "check_gradients",
    "gen_scene", "init_params", "load_checkpoint", "make_dataset", "map_over_groups",
    "model_backward", "model_forward", "param_count", "parse_records", "save_checkpoint",
    "segment_stats", "sort_and_partition", "sweep_report", "train", "__version__",
]
