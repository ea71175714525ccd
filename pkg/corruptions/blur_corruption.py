import math

import numpy as np
from scipy import ndimage

from corruptions.base_corruption import BaseCorruption
from numerics import RngStream


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised line of `length` taps through the centre of a length x length grid."""
    kernel = np.zeros((length, length), dtype=np.float64)
    centre = (length - 1) / 2
    for t in np.linspace(-centre, centre, length):
        row = int(round(centre - t * math.sin(angle)))
        col = int(round(centre + t * math.cos(angle)))
        kernel[row, col] = 1.0
    return kernel / kernel.sum()


class GaussianBlur(BaseCorruption):
    """Separable Gaussian blur, sigma = 0.5 * severity, kernel 2*ceil(3 sigma)+1 taps."""

    def __init__(self):
        super().__init__(kind='GaussianBlur')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        kernel = gaussian_kernel_1d(0.5 * severity)
        out = ndimage.convolve1d(image, kernel, axis=0, mode='nearest')
        return ndimage.convolve1d(out, kernel, axis=1, mode='nearest')


class MotionBlur(BaseCorruption):
    """Box blur of 2*severity+1 taps along an angle drawn from the CorruptionSpec seed."""

    def __init__(self):
        super().__init__(kind='MotionBlur')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        angle = float(rng.uniform(0.0, math.pi))
        kernel = motion_kernel(2 * severity + 1, angle)
        channels = [ndimage.convolve(image[:, :, c], kernel, mode='nearest') for c in range(image.shape[2])]
        return np.stack(channels, axis=2)
