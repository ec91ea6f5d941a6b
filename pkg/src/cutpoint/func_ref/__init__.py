"""Functional reference: bit-exact integer semantics of the accelerator.

The hot loops (the exhaustive shared-MAC sweep and the convolution loop
nests) come from a compiled extension when it is available and from numpy
otherwise; :data:`BACKEND` names the one in use.
"""

from .fixed import (LUTS, RangeError, activate, double_mac, double_mac_array,
                    lut_activation, requantize, saturate, shift_round)
from .kernels import BACKEND, double_mac_sweep
from .ops import (ShapeError, conv2d, conv_reference, dwconv2d, fully_connected,
                  reference_forward, run_layer)
from .interpreter import ExecutionError, ExecutionResult, run_image
from .fixtures import read_tensor, write_tensor

__all__ = [
    "BACKEND", "LUTS", "RangeError", "ShapeError", "ExecutionError",
    "ExecutionResult", "activate", "conv2d", "conv_reference", "double_mac",
    "double_mac_array", "double_mac_sweep", "dwconv2d", "fully_connected",
    "lut_activation", "read_tensor", "reference_forward", "requantize",
    "run_image", "run_layer", "saturate", "shift_round", "write_tensor",
]
