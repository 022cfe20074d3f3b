from .data import Example, GuidanceFeatures, NO_GUIDANCE, build_guidance, collate, encode_examples
from .model import Backbone, BackboneConfig, ContextBatch, ContextCache
from .search import BeamHypothesis, beam_search, beam_search_cache
from .train import TrainingDiverged, evaluate_loss, load_checkpoint, save_checkpoint, train

__all__ = [
    "Backbone",
    "BackboneConfig",
    "BeamHypothesis",
    "ContextBatch",
    "ContextCache",
    "Example",
    "GuidanceFeatures",
    "NO_GUIDANCE",
    "TrainingDiverged",
    "beam_search",
    "beam_search_cache",
    "build_guidance",
    "collate",
    "encode_examples",
    "evaluate_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
