"""Convolutional hierarchical recurrent networks for image classification.

A small convolutional frontend produces a feature map, which is max-pooled
into a pyramid of region grids. Each grid is scanned by four directional
2D recurrent layers (simple ReLU or LSTM cells) that also receive context
from every coarser grid. The fused outputs of all scales feed a softmax
classifier. Everything, including backpropagation, is written against NumPy;
the recurrent scans have an optional compiled kernel.
"""
from . import checks, convnet, data, head, hrnn, kernels, model, tensor, train
from .config import ConfigError, RunConfig, TrainConfig
from .hrnn import Direction, count_parameters, hrnn_forward, scan_lstm, scan_srn
from .model import ModelConfig

__version__ = "0.1.0"

__all__ = ["checks", "convnet", "data", "head", "hrnn", "kernels", "model", "tensor", "train",
           "ConfigError", "RunConfig", "TrainConfig", "ModelConfig", "Direction", "count_parameters",
           "hrnn_forward", "scan_lstm", "scan_srn"]
