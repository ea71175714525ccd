import numpy as np

from corruptions.base_corruption import BaseCorruption
from numerics import RngStream


class Brightness(BaseCorruption):
    """Global offset with |delta| uniform in [0.08, 0.12] * severity and a random sign."""

    def __init__(self):
        super().__init__(kind='Brightness')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        magnitude = rng.uniform(0.08 * severity, 0.12 * severity)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        return image + sign * magnitude


class Contrast(BaseCorruption):
    """x -> 0.5 + c (x - 0.5), c = 1 - 0.15 * severity; 0.5 is a fixed point."""

    def __init__(self):
        super().__init__(kind='Contrast')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        c = 1.0 - 0.15 * severity
        return 0.5 + c * (image - 0.5)
