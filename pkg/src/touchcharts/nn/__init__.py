"""Small reverse-mode autodiff engine and the layers built on it."""
from .autograd import Tensor, concat, relu, spmm, where
from .layers import (CommGraphCSR, avg_pool2, chamfer_loss, conv2d, gcn_layer, masked_mse, resize_nearest,
                     perceptual_pool, sample_on_faces)
from .optim import Adam, ParamStore, adam_step, grad_check, load_checkpoint, save_checkpoint

__all__ = ["Tensor", "concat", "relu", "spmm", "where", "CommGraphCSR", "avg_pool2", "chamfer_loss",
           "conv2d", "gcn_layer", "masked_mse", "perceptual_pool", "resize_nearest", "sample_on_faces", "Adam",
           "ParamStore", "adam_step", "grad_check", "load_checkpoint", "save_checkpoint"]
