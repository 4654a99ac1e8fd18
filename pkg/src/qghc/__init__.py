"""Question-guided hybrid convolution: grouped convolutions whose kernels are
partly predicted from an encoded question, with a toy VQA task, training
loop, parameter auditor, and activation-map visualizer."""

from .autodiff import (Grads, Node, Parameter, backward, finite_diff_check,
                       no_grad)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, blind_optimal_accuracy, generate_dataset,
                   load_dataset, serialize_dataset)
from .hybrid import (KernelPredictor, QGHCConfig, QGHCModule, QGHCStack,
                     make_variant, predict_kernels)
from .model import (AnswerDistribution, ModelConfig, VQAModel, cam_map,
                    model_cam, model_forward)
from .tensor import Rng, ShapeError, Tensor, init_kaiming_uniform
from .training import Adam, TrainConfig, cross_entropy, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "Adam", "AnswerDistribution", "Dataset", "Grads", "KernelPredictor",
    "ModelConfig", "Node", "Parameter", "QGHCConfig", "QGHCModule",
    "QGHCStack", "Rng", "ShapeError", "Tensor", "TrainConfig", "VQAModel",
    "backward", "blind_optimal_accuracy", "cam_map", "cross_entropy",
    "evaluate", "finite_diff_check", "fit", "generate_dataset",
    "init_kaiming_uniform", "load_checkpoint", "load_dataset", "make_variant",
    "model_cam", "model_forward", "no_grad", "predict_kernels",
    "save_checkpoint", "serialize_dataset",
]
