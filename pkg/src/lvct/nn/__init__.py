"""Small numpy CNN engine: layers with explicit backward, Adam, checkpoints."""
from .checkpoint import CheckpointError, load_params, read_checkpoint, save_params
from .gradcheck import grad_check, grad_check_input, numeric_grad, relative_error
from .layers import (
    Conv3x3,
    LeakyReLU,
    MaxPool2,
    Module,
    Param,
    UpConv2,
    concat_channels,
    concat_channels_backward,
    conv3x3,
    conv3x3_backward,
    global_mean,
    global_mean_backward,
    leaky_relu,
    leaky_relu_backward,
    maxpool2,
    maxpool2_backward,
    sigmoid,
    sigmoid_backward,
    upconv2,
    upconv2_backward,
)
from .optim import Adam, AdamState, adam_step
