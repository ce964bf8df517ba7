from .checkpoint import load_checkpoint, save_checkpoint
from .network import Network, NetworkConfig, build_network
from .ops import (
    batchnorm3d_backward,
    batchnorm3d_forward,
    conv3d_backward,
    conv3d_forward,
    conv_downsample,
    convtranspose3d_backward,
    convtranspose3d_forward,
    maxpool3d,
    maxpool3d_backward,
    mse_loss,
)
from .optim import AdamState, adam_step
