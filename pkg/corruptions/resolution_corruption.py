import math

import numpy as np
from scipy import fft

from corruptions.base_corruption import BaseCorruption
from numerics import RngStream

BLOCK = 8


def block_quantize(image: np.ndarray, step_scale: float) -> np.ndarray:
    """
    8x8 block DCT quantisation per channel.

    Coefficient (u, v) is quantised with step step_scale * (1 + u + v);
    step_scale 0 skips quantisation (pure DCT round trip). Images whose
    sides are not multiples of 8 are edge-padded and cropped back.
    """
    h, w, c = image.shape
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode='edge')
    hb, wb = padded.shape[0] // BLOCK, padded.shape[1] // BLOCK

    blocks = padded.reshape(hb, BLOCK, wb, BLOCK, c).transpose(0, 2, 4, 1, 3)
    coeffs = fft.dctn(blocks, axes=(-2, -1), norm='ortho')
    if step_scale > 0:
        u = np.arange(BLOCK)
        steps = step_scale * (1.0 + u[:, None] + u[None, :])
        coeffs = np.round(coeffs / steps) * steps
    restored = fft.idctn(coeffs, axes=(-2, -1), norm='ortho')
    restored = restored.transpose(0, 3, 1, 4, 2).reshape(hb * BLOCK, wb * BLOCK, c)
    return restored[:h, :w]


def spectral_lowpass(image: np.ndarray, keep_h: int, keep_w: int) -> np.ndarray:
    """
    Band-limited resize to keep_h x keep_w and back, per channel.

    Drops every DCT-II frequency at or above (keep_h, keep_w). The result is
    the orthogonal projection onto the lowest frequencies, so a smaller band
    never lowers the squared error against the input.
    """
    h, w = image.shape[:2]
    if not (1 <= keep_h <= h and 1 <= keep_w <= w):
        raise ValueError(f"Band {keep_h}x{keep_w} does not fit a {h}x{w} image")
    coeffs = fft.dctn(image, axes=(0, 1), norm='ortho')
    coeffs[keep_h:] = 0.0
    coeffs[:, keep_w:] = 0.0
    return fft.idctn(coeffs, axes=(0, 1), norm='ortho')


class Downscale(BaseCorruption):
    """Resolution loss to ceil(dim / (1 + 0.5 * severity)), resampled in the DCT domain."""

    def __init__(self):
        super().__init__(kind='Downscale')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        h, w = image.shape[:2]
        factor = 1.0 + 0.5 * severity
        return spectral_lowpass(image, math.ceil(h / factor), math.ceil(w / factor))


class BlockCompress(BaseCorruption):
    """JPEG-like blocking: quantisation step 0.02 * severity * (1 + u + v)."""

    def __init__(self):
        super().__init__(kind='BlockCompress')

    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        return block_quantize(image, 0.02 * severity)
