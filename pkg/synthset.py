"""
Procedural landmark-like retrieval dataset.

Every class is a coloured, textured shape on a toned background. Views
of a class differ by jittered pose and hue; strong views add an
occluding bar. The dataset directory holds binary PPM images and a
manifest.jsonl with one object per image (queries carry their
easy/hard/junk ground truth).
"""

import json
import math
import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional

import numpy as np
from PIL import Image

from numerics import RngStream
from utils import log

IMAGE_SIZE = 64
SHAPE_KINDS = ('disc', 'bar', 'cross', 'ring', 'triangle')
JITTERS = ('mild', 'strong', 'heavy')
MANIFEST_NAME = 'manifest.jsonl'

# translation (fraction of image), rotation (deg), scale range, hue shift, occluded area range
JITTER_RANGES = {
    'mild': (0.10, 10.0, (0.9, 1.1), 0.02, None),
    'strong': (0.30, 60.0, (0.5, 1.5), 0.08, (0.10, 0.25)),
    'heavy': (0.30, 60.0, (0.5, 1.5), 0.08, (0.40, 0.60)),
}


@dataclass(frozen=True)
class ClassParams:
    class_id: int
    shape_kind: str
    base_hue: float
    texture_freq: float
    background_tone: float


@dataclass(frozen=True)
class RetrievalGroundTruth:
    query_id: int
    easy_ids: FrozenSet[int]
    hard_ids: FrozenSet[int]
    junk_ids: FrozenSet[int]

    def __post_init__(self):
        if (self.easy_ids & self.hard_ids) or (self.easy_ids & self.junk_ids) or (self.hard_ids & self.junk_ids):
            raise ValueError(f"query {self.query_id}: easy/hard/junk sets overlap")


@dataclass
class ManifestEntry:
    id: int
    role: str  # "query" | "db" | "distractor"
    class_id: int
    file: str
    jitter: str
    easy: List[int] = field(default_factory=list)
    hard: List[int] = field(default_factory=list)
    junk: List[int] = field(default_factory=list)

    def to_json(self) -> str:
        record = {
            'id': self.id,
            'role': self.role,
            'class_id': self.class_id,
            'file': self.file,
            'jitter': self.jitter,
        }
        if self.role == 'query':
            record.update({'easy': self.easy, 'hard': self.hard, 'junk': self.junk})
        return json.dumps(record)

    @classmethod
    def from_dict(cls, data: dict) -> 'ManifestEntry':
        return cls(
            id=int(data['id']),
            role=data['role'],
            class_id=int(data['class_id']),
            file=data['file'],
            jitter=data['jitter'],
            easy=[int(i) for i in data.get('easy', [])],
            hard=[int(i) for i in data.get('hard', [])],
            junk=[int(i) for i in data.get('junk', [])],
        )


class Manifest:
    """Entries of one generated dataset plus helpers for splits and ground truth."""

    def __init__(self, entries: List[ManifestEntry], root: Optional[Path] = None):
        self.entries = list(entries)
        self.root = Path(root) if root is not None else None
        self.by_id: Dict[int, ManifestEntry] = {e.id: e for e in self.entries}
        if len(self.by_id) != len(self.entries):
            raise ValueError("manifest ids are not unique")
        db_ids = {e.id for e in self.database()}
        for query in self.queries():
            listed = set(query.easy) | set(query.hard) | set(query.junk)
            missing = listed - db_ids
            if missing:
                raise ValueError(f"query {query.id} references unknown database ids {sorted(missing)}")

    def queries(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.role == 'query']

    def database(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.role in ('db', 'distractor')]

    def training_entries(self) -> List[ManifestEntry]:
        """Database views of the query classes; junk and distractors excluded."""
        return [e for e in self.entries if e.role == 'db' and e.jitter in ('mild', 'strong')]

    def class_ids(self) -> List[int]:
        return sorted({e.class_id for e in self.queries()})

    def ground_truth(self, query_id: int) -> RetrievalGroundTruth:
        query = self.by_id[query_id]
        if query.role != 'query':
            raise ValueError(f"entry {query_id} is not a query")
        return RetrievalGroundTruth(
            query_id=query.id,
            easy_ids=frozenset(query.easy),
            hard_ids=frozenset(query.hard),
            junk_ids=frozenset(query.junk),
        )

    def image_path(self, entry: ManifestEntry) -> Path:
        if self.root is None:
            return Path(entry.file)
        return self.root / entry.file

    def load(self, entry: ManifestEntry) -> np.ndarray:
        return load_image(self.image_path(entry))

    def write(self, path: Path):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for entry in self.entries:
                f.write(entry.to_json() + '\n')

    @classmethod
    def read(cls, data_dir) -> 'Manifest':
        root = Path(data_dir)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"Manifest not found: {path}")
        entries = []
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entries.append(ManifestEntry.from_dict(json.loads(line)))
                except (KeyError, ValueError) as e:
                    raise ValueError(f"{path}:{line_no}: bad manifest entry ({e})") from e
        return cls(entries, root)


# ============================================================================
# Image I/O
# ============================================================================

def save_image(path, image: np.ndarray):
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0


# ============================================================================
# Rendering
# ============================================================================

def class_params(seed: int, class_id: int) -> ClassParams:
    rng = RngStream(seed, f"class/{class_id}")
    return ClassParams(
        class_id=class_id,
        shape_kind=SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))],
        base_hue=float(rng.uniform(0.0, 1.0)),
        texture_freq=float(rng.uniform(1.5, 5.0)),
        background_tone=float(rng.uniform(0.15, 0.85)),
    )


def _shape_distance(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Approximate signed distance (negative inside) in shape-local units."""
    if kind == 'disc':
        return np.hypot(a, b) - 0.45
    if kind == 'ring':
        return np.abs(np.hypot(a, b) - 0.42) - 0.12
    if kind == 'bar':
        return np.maximum(np.abs(a) - 0.65, np.abs(b) - 0.18)
    if kind == 'cross':
        horizontal = np.maximum(np.abs(a) - 0.6, np.abs(b) - 0.15)
        vertical = np.maximum(np.abs(b) - 0.6, np.abs(a) - 0.15)
        return np.minimum(horizontal, vertical)
    if kind == 'triangle':
        return np.maximum.reduce([
            -0.35 - b,
            0.866 * a + 0.5 * b - 0.35,
            -0.866 * a + 0.5 * b - 0.35,
        ])
    raise ValueError(f"Unknown shape kind {kind!r}")


def render_instance(params: ClassParams, view_seed: int, jitter: str = 'mild') -> np.ndarray:
    """64 x 64 x 3 view of a class; deterministic in (params, view_seed, jitter)."""
    if jitter not in JITTER_RANGES:
        raise ValueError(f"jitter must be one of {JITTERS}, got {jitter!r}")
    shift, max_rot, (scale_lo, scale_hi), hue_range, occlusion = JITTER_RANGES[jitter]
    rng = RngStream(view_seed, f"render/{jitter}")

    tx = rng.uniform(-shift, shift) * 2.0
    ty = rng.uniform(-shift, shift) * 2.0
    rot = math.radians(rng.uniform(-max_rot, max_rot))
    scale = rng.uniform(scale_lo, scale_hi)
    hue = (params.base_hue + rng.uniform(-hue_range, hue_range)) % 1.0

    size = IMAGE_SIZE
    pixel = 2.0 / size
    coords = (np.arange(size, dtype=np.float64) + 0.5) * pixel - 1.0
    v, u = np.meshgrid(coords, coords, indexing='ij')
    du, dv = u - tx, v - ty
    cos_r, sin_r = math.cos(rot), math.sin(rot)
    a = (cos_r * du + sin_r * dv) / scale
    b = (-sin_r * du + cos_r * dv) / scale

    alpha = np.clip(0.5 - _shape_distance(params.shape_kind, a, b) * scale / pixel, 0.0, 1.0)
    texture = 0.75 + 0.25 * np.sin(math.pi * params.texture_freq * (a + 1.0))
    colour = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
    foreground = texture[:, :, None] * colour[None, None, :]
    background = np.clip(params.background_tone + 0.1 * v, 0.0, 1.0)[:, :, None] * np.ones(3)

    image = background * (1.0 - alpha[:, :, None]) + foreground * alpha[:, :, None]

    if occlusion is not None:
        fraction = rng.uniform(*occlusion)
        thickness = max(1, int(round(fraction * size)))
        start = int(rng.integers(0, size - thickness + 1))
        tone = rng.uniform(0.2, 0.8)
        if rng.uniform() < 0.5:
            image[start:start + thickness, :, :] = tone
        else:
            image[:, start:start + thickness, :] = tone

    return np.clip(image, 0.0, 1.0)


# ============================================================================
# Dataset generation
# ============================================================================

def split_sizes(per_class: int) -> Dict[str, int]:
    junk = max(1, int(round(0.1 * per_class)))
    hard = max(1, int(round(0.3 * per_class)))
    easy = per_class - 1 - junk - hard
    if easy < 1:
        raise ValueError(f"per_class={per_class} leaves no easy positives")
    return {'easy': easy, 'hard': hard, 'junk': junk}


def generate_dataset(n_classes: int, per_class: int, seed: int, out_dir,
                     distractors: Optional[int] = None) -> Manifest:
    """Render queries, database views and distractors into out_dir and write the manifest."""
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if per_class < 6:
        raise ValueError(f"per_class must be >= 6, got {per_class}")
    n_distractors = n_classes if distractors is None else int(distractors)
    sizes = split_sizes(per_class)

    root = Path(out_dir)
    image_dir = root / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)

    entries: List[ManifestEntry] = []
    next_id = 0

    def add(role: str, params: ClassParams, view_key: str, jitter: str) -> ManifestEntry:
        nonlocal next_id
        view_seed = RngStream(seed, f"view/{view_key}").seed64()
        file = f"images/{next_id:05d}.ppm"
        save_image(root / file, render_instance(params, view_seed, jitter))
        entry = ManifestEntry(id=next_id, role=role, class_id=params.class_id, file=file, jitter=jitter)
        entries.append(entry)
        next_id += 1
        return entry

    for class_id in range(n_classes):
        params = class_params(seed, class_id)
        query = add('query', params, f"{class_id}/query", 'mild')
        for tier, jitter in (('easy', 'mild'), ('hard', 'strong'), ('junk', 'heavy')):
            ids = [add('db', params, f"{class_id}/{tier}/{k}", jitter).id for k in range(sizes[tier])]
            setattr(query, tier, ids)

    for k in range(n_distractors):
        params = class_params(seed, n_classes + k)
        add('distractor', params, f"distractor/{k}", 'mild')

    manifest = Manifest(entries, root)
    manifest.write(root / MANIFEST_NAME)
    log('INFO', f"[Synthset] wrote {len(entries)} images ({n_classes} classes, "
                f"{n_distractors} distractors) to {root}")
    return manifest
