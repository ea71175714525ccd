import numpy as np

from corruptions.base_corruption import BaseCorruption
from numerics import RngStream


class GaussianNoise(BaseCorruption):
    """Additive i.i.d. N(0, sigma^2) noise, sigma = 0.02 * severity."""

    def __init__(self):
        super().__init__(kind='GaussianNoise')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        sigma = 0.02 * severity
        return image + rng.normal(0.0, sigma, image.shape)


class SaltPepper(BaseCorruption):
    """Each pixel (all channels) becomes 0 or 1 with probability 0.01 * severity."""

    def __init__(self):
        super().__init__(kind='SaltPepper')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        h, w = image.shape[:2]
        hit = rng.uniform(size=(h, w)) < 0.01 * severity
        salt = rng.uniform(size=(h, w)) < 0.5
        out = image.copy()
        out[hit] = np.where(salt[hit], 1.0, 0.0)[:, None]
        return out
