"""Tubelet proposals, perturbation max-pooling and temporal rescoring for video object detection."""

from .geometry import BoundingBox, Detection, GroundTruthObject, iou, nms
from .tubelets import ProposalConfig, Tubelet, TubeletBox, propose_tubelets
from .perturb import PerturbConfig, max_pool, perturb_and_pool, random_perturb
from .tcn import TcnArchitecture, TcnModel, TrainConfig, rescore, train
from .evaluate import average_precision, corloc, evaluate, temporal_variation
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Detection", "GroundTruthObject", "iou", "nms",
    "ProposalConfig", "Tubelet", "TubeletBox", "propose_tubelets",
    "PerturbConfig", "max_pool", "perturb_and_pool", "random_perturb",
    "TcnArchitecture", "TcnModel", "TrainConfig", "rescore", "train",
    "average_precision", "corloc", "evaluate", "temporal_variation",
    "PipelineConfig", "run_pipeline",
]
