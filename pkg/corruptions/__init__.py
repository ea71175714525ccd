from .base_corruption import BaseCorruption, CorruptionSpec, KINDS
from .noise_corruption import GaussianNoise, SaltPepper
from .blur_corruption import GaussianBlur, MotionBlur
from .photometric_corruption import Brightness, Contrast
from .resolution_corruption import Downscale, BlockCompress, block_quantize, spectral_lowpass
from .pairing import (
    CORRUPTIONS,
    apply_corruption,
    apply_specs,
    corruption_distortion,
    draw_specs,
    make_pair,
    specs_from_json,
    specs_to_json,
)

__all__ = [
    'BaseCorruption',
    'CorruptionSpec',
    'KINDS',
    'GaussianNoise',
    'SaltPepper',
    'GaussianBlur',
    'MotionBlur',
    'Brightness',
    'Contrast',
    'Downscale',
    'BlockCompress',
    'block_quantize',
    'spectral_lowpass',
    'CORRUPTIONS',
    'apply_corruption',
    'apply_specs',
    'corruption_distortion',
    'draw_specs',
    'make_pair',
    'specs_from_json',
    'specs_to_json',
]
