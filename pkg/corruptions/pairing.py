"""
Corruption registry, spec application and clean/corrupted pair drawing.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np

from corruptions.base_corruption import KINDS, BaseCorruption, CorruptionSpec
from corruptions.noise_corruption import GaussianNoise, SaltPepper
from corruptions.blur_corruption import GaussianBlur, MotionBlur
from corruptions.photometric_corruption import Brightness, Contrast
from corruptions.resolution_corruption import Downscale, BlockCompress
from numerics import RngStream

CORRUPTIONS: Dict[str, BaseCorruption] = {
    corruption.kind: corruption
    for corruption in (
        GaussianNoise(),
        SaltPepper(),
        GaussianBlur(),
        MotionBlur(),
        Brightness(),
        Contrast(),
        Downscale(),
        BlockCompress(),
    )
}


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return CORRUPTIONS[spec.kind](image, spec)


def apply_specs(image: np.ndarray, specs: Sequence[CorruptionSpec]) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    for spec in specs:
        out = apply_corruption(out, spec)
    return out


def draw_specs(rng: RngStream) -> List[CorruptionSpec]:
    """One or two distinct kinds, severities uniform in 1..5, in draw order."""
    count = int(rng.integers(1, 3))
    picked = rng.choice(len(KINDS), size=count, replace=False)
    specs = []
    for index in picked:
        severity = int(rng.integers(1, 6))
        specs.append(CorruptionSpec(kind=KINDS[int(index)], severity=severity, seed=rng.seed64()))
    return specs


def make_pair(image: np.ndarray, rng: RngStream) -> Tuple[np.ndarray, np.ndarray, List[CorruptionSpec]]:
    specs = draw_specs(rng)
    return image, apply_specs(image, specs), specs


def corruption_distortion(image: np.ndarray, kind: str, severity: int, seeds: Sequence[int]) -> float:
    """Mean squared distortion of one kind/severity against the clean image, averaged over seeds."""
    errors = []
    for seed in seeds:
        corrupted = apply_corruption(image, CorruptionSpec(kind=kind, severity=severity, seed=int(seed)))
        errors.append(float(np.mean((corrupted - image) ** 2)))
    return float(np.mean(errors))


def specs_to_json(specs: Sequence[CorruptionSpec]) -> List[dict]:
    return [spec.to_dict() for spec in specs]


def specs_from_json(items: Sequence[dict]) -> List[CorruptionSpec]:
    return [CorruptionSpec.from_dict(item) for item in items]
