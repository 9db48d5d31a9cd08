"""Caption-to-image diffusion cascade conditioned on parsed scene graphs, in pure numpy."""
from .diffusion import Cascade, CascadeConfig, NoiseSchedule, cascade_sample
from .estimators import CaptionDiffusion, FeatureClassifier, SceneGraphParser
from .metrics import fid, gaussian_stats, inception_score
from .scenegraph import SceneGraph, parse_caption
from .training import RunConfig, Trainer, ablate, evaluate, train

__all__ = [
    "Cascade", "CascadeConfig", "NoiseSchedule", "cascade_sample",
    "CaptionDiffusion", "FeatureClassifier", "SceneGraphParser",
    "fid", "gaussian_stats", "inception_score",
    "SceneGraph", "parse_caption",
    "RunConfig", "Trainer", "ablate", "evaluate", "train",
]
__version__ = "0.1.0"
