from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from numerics import RngStream

KINDS = (
    'GaussianNoise',
    'SaltPepper',
    'GaussianBlur',
    'MotionBlur',
    'Brightness',
    'Contrast',
    'Downscale',
    'BlockCompress',
)

MIN_SEVERITY = 1
MAX_SEVERITY = 5


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption draw; (kind, severity, seed, input) fixes the output bit-exactly."""
    kind: str
    severity: int
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.severity, bool) or int(self.severity) != self.severity:
            raise ValueError(f"Severity must be an integer, got {self.severity!r}")
        if not MIN_SEVERITY <= self.severity <= MAX_SEVERITY:
            raise ValueError(f"Severity must be in {MIN_SEVERITY}..{MAX_SEVERITY}, got {self.severity}")

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'severity': int(self.severity), 'seed': int(self.seed)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CorruptionSpec':
        return cls(kind=data['kind'], severity=int(data['severity']), seed=int(data['seed']))


class BaseCorruption(ABC):

    def __init__(self, kind: str):
        if kind not in KINDS:
            raise ValueError(f"Unknown corruption kind {kind!r}")
        self.kind = kind

    @abstractmethod
    def process(self, image: np.ndarray, severity: int, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
        if spec.kind != self.kind:
            raise ValueError(f"{self.kind} cannot apply a {spec.kind} spec")
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"Expected an H x W x 3 image, got shape {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise ValueError(f"Image values must lie in [0, 1] (got {image.min():.4f}..{image.max():.4f})")
        rng = RngStream(spec.seed, f"corrupt/{self.kind}")
        return np.clip(self.process(image, spec.severity, rng), 0.0, 1.0)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}()"
