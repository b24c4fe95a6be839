"""Fixed BT.601 full-range colour conversions as differentiable 1x1 mixes."""
import numpy as np

from .tensor import Tensor, conv2d

RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])

YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136286, -0.714136286],
    [1.0, 1.772, 0.0],
])


def _mix(x: Tensor, matrix: np.ndarray) -> Tensor:
    w = Tensor(matrix.reshape(3, 3, 1, 1).astype(x.dtype))
    return conv2d(x, w)


def rgb_to_ycbcr(x: Tensor) -> Tensor:
    return _mix(x, RGB_TO_YCBCR)


def ycbcr_to_rgb(x: Tensor) -> Tensor:
    return _mix(x, YCBCR_TO_RGB)
