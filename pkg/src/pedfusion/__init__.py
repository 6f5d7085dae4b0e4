"""Audio-visual 3D pedestrian detection with a synthetic recording simulator."""

from .boxes import Box3D
from .model import ModelConfig, StudentNet
from .pipeline import TrainConfig, infer, load_checkpoint, save_checkpoint, train
from .simulator import SceneConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Box3D", "ModelConfig", "SceneConfig", "StudentNet", "TrainConfig", "generate_dataset",
    "infer", "load_checkpoint", "save_checkpoint", "train",
]
