"""Text- and mask-guided fused-to-visible image translation on a small numpy autograd engine."""
from .data import Sample, generate_dataset, generate_scene
from .detector import DetectionTargets, DetectorConfig, SurrogateDetector
from .losses import CharbonnierConfig, TACConfig, charbonnier_loss, detection_loss, tac_loss
from .model import ModelConfig, TranslatorModel, translate
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, pretrain_detector, train

__version__ = "0.1.0"

__all__ = [
    "CharbonnierConfig", "DetectionTargets", "DetectorConfig", "ModelConfig", "Sample",
    "SurrogateDetector", "TACConfig", "Tensor", "TrainConfig", "TranslatorModel",
    "backward", "charbonnier_loss", "detection_loss", "generate_dataset", "generate_scene",
    "no_grad", "pretrain_detector", "tac_loss", "train", "translate",
]
