"""Attribute-conditioned prompt tuning on frozen CLIP-style encoders.

A learnable context, instance-conditioned by multi-head attention over the
image embedding, is followed by an attribute token predicted from the image
and then the class-name tokens. Training adds an attribute-supervision loss
and a regularizer toward hand-written "[a] [cls]" templates.
"""

from .backbone import ClipBackbone, FrozenBackbone, ImageInput, SyntheticBackbone, load_backbone
from .errors import ConfigurationError, InputError, TrainingAborted, TransportError
from .evaluator import EvalReport, classify, eval_base_to_novel, harmonic_mean
from .extractor import AttributeExtractor, attr_loss, attribute_target, extract
from .model import PromptModel
from .objective import LossWeights, TemplatePool, total_loss
from .prompts import ClassVocabulary, assemble
from .trainer import ModelConfig, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AttributeExtractor", "ClassVocabulary", "ClipBackbone", "ConfigurationError", "EvalReport",
    "FrozenBackbone", "ImageInput", "InputError", "LossWeights", "ModelConfig", "PromptModel",
    "SyntheticBackbone", "TemplatePool", "TrainConfig", "TrainingAborted", "TransportError", "assemble",
    "attr_loss", "attribute_target", "classify", "eval_base_to_novel", "extract", "harmonic_mean",
    "load_backbone", "load_checkpoint", "save_checkpoint", "total_loss", "train",
]
