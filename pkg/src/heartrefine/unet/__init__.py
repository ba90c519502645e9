"""A small numpy 3-D U-Net: layers, model, weight files and training."""
from .layers import (
    conv3d,
    conv3d_backward,
    conv3d_stride2,
    deconv3d,
    deconv3d_backward,
    maxpool3d,
    maxpool3d_backward,
    softmax,
    softmax_cross_entropy,
)
from .model import UNetConfig, init_weights, layer_specs, param_count, param_shapes, unet_backward, unet_forward
from .train import Adam, TrainParams, TrainResult, TrainingDiverged, evaluate_loss, predict, train
from .weights import WeightFileError, WeightStore, load_weights, save_weights

__all__ = [
    "conv3d", "conv3d_backward", "conv3d_stride2", "deconv3d", "deconv3d_backward", "maxpool3d",
    "maxpool3d_backward", "softmax", "softmax_cross_entropy", "UNetConfig", "init_weights",
    "layer_specs", "param_count", "param_shapes", "unet_backward", "unet_forward", "Adam",
    "TrainParams", "TrainResult", "TrainingDiverged", "evaluate_loss", "predict", "train",
    "WeightFileError", "WeightStore", "load_weights", "save_weights",
]
