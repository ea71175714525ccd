"""
Dense float64 tensor substrate for qualret.

Tensors are plain numpy arrays in float64. Images are H x W x 3 arrays
with values in [0, 1]; feature maps are C x H x W (or N x C x H x W when
a batch is processed at once). Convolution is cross-correlation with
zero padding. Randomness only comes from RngStream, a counter-based
Philox stream keyed by (seed, label); there is no global RNG state.
"""

import io
import dataclasses
import json
import struct
import hashlib
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray
DTYPE = np.float64
EPS = 1e-12

MAGIC = b'ADPT'
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 2


def ensure_finite(array: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(array)):
        raise FloatingPointError(f"{what} became non-finite (shape {array.shape})")
    return array


# ============================================================================
# Random streams
# ============================================================================

def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


class RngStream:
    """
    Reproducible random stream identified by (seed, label).

    Streams derived from different labels never share state. A stream is
    not thread-safe; derive one per worker instead of sharing.
    """

    def __init__(self, seed: int, label: str = 'root'):
        self.seed = int(seed)
        self.label = label
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, _label_key(label)]
        self._bitgen = np.random.Philox(np.random.SeedSequence(entropy))
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"

    @property
    def counter(self) -> int:
        return int(self._bitgen.state['state']['counter'][0])

    def derive(self, label: str) -> 'RngStream':
        return RngStream(self.seed, f"{self.label}/{label}")

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._gen.integers(low, high, size)

    def seed64(self) -> int:
        """Fresh 63-bit seed for a child computation (e.g. a CorruptionSpec)."""
        return int(self._gen.integers(0, 2 ** 63 - 1))

    def choice(self, options, size=None, replace: bool = True):
        return self._gen.choice(options, size=size, replace=replace)

    def permutation(self, n: int):
        return self._gen.permutation(n)


# ============================================================================
# Convolution
# ============================================================================

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, kernels: Tensor, stride: int, pad: int):
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be C_out x C_in x k x k, got shape {kernels.shape}")
    if x.ndim != 4:
        raise ValueError(f"input must be C x H x W or N x C x H x W, got shape {x.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got kernels {kernels.shape}")
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input {x.shape[1:]} vs kernels {kernels.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    h_out = conv_output_size(x.shape[2], kh, stride, pad)
    w_out = conv_output_size(x.shape[3], kw, stride, pad)
    if h_out < 1 or w_out < 1:
        raise ValueError(f"input {x.shape[1:]} too small for kernels {kernels.shape} "
                         f"with stride={stride}, pad={pad}")
    return h_out, w_out


def _windows(x: Tensor, k: int, stride: int, pad: int, h_out: int, w_out: int) -> Tensor:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :h_out, :w_out]


def conv2d(input: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate C_in x H x W (optionally batched) input with C_out x C_in x k x k kernels."""
    x = np.asarray(input, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    batched = x.ndim == 4
    if x.ndim == 3:
        x = x[None]
    h_out, w_out = _check_conv_args(x, kernels, stride, pad)
    k = kernels.shape[2]

    win = _windows(x, k, stride, pad, h_out, w_out)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out if batched else out[0]


def conv2d_backward(upstream: Tensor, input: Tensor, kernels: Tensor,
                    stride: int = 1, pad: int = 0) -> Tuple[Tensor, Tensor]:
    """Gradients of sum(upstream * conv2d(input, kernels)) w.r.t. input and kernels."""
    x = np.asarray(input, dtype=DTYPE)
    up = np.asarray(upstream, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    batched = x.ndim == 4
    if x.ndim == 3:
        x = x[None]
    if up.ndim == 3:
        up = up[None]
    h_out, w_out = _check_conv_args(x, kernels, stride, pad)
    expected = (x.shape[0], kernels.shape[0], h_out, w_out)
    if up.shape != expected:
        raise ValueError(f"upstream shape {up.shape} does not match conv output {expected}")
    k = kernels.shape[2]

    win = _windows(x, k, stride, pad, h_out, w_out)
    grad_kernels = np.tensordot(up, win, axes=([0, 2, 3], [0, 2, 3]))

    n, c, h, w = x.shape
    grad_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    row_stop = stride * (h_out - 1) + 1
    col_stop = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(up, kernels[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            grad_padded[:, :, i:i + row_stop:stride, j:j + col_stop:stride] += contrib
    grad_input = np.ascontiguousarray(grad_padded[:, :, pad:pad + h, pad:pad + w])
    return (grad_input if batched else grad_input[0]), grad_kernels


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(upstream: Tensor, pre: Tensor) -> Tensor:
    return upstream * (pre > 0)


# ============================================================================
# Pooling / normalisation / resizing
# ============================================================================

def global_avg_pool(feature_map: Tensor) -> Tensor:
    """C x H x W -> C (or N x C x H x W -> N x C): spatial mean per channel."""
    fm = np.asarray(feature_map, dtype=DTYPE)
    if fm.ndim not in (3, 4) or fm.shape[-1] < 1 or fm.shape[-2] < 1:
        raise ValueError(f"global_avg_pool expects C x H x W with H, W >= 1, got {fm.shape}")
    return fm.mean(axis=(-2, -1))


def global_avg_pool_backward(upstream: Tensor, map_shape: Tuple[int, ...]) -> Tensor:
    h, w = map_shape[-2], map_shape[-1]
    grad = np.asarray(upstream, dtype=DTYPE)[..., None, None] / (h * w)
    return np.broadcast_to(grad, map_shape).copy()


def l2_normalize(v: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    """v / ||v|| along axis; vectors shorter than eps map to zero."""
    v = np.asarray(v, dtype=DTYPE)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(norms >= eps, norms, 1.0)
    return np.where(norms >= eps, v / safe, 0.0)


def l2_normalize_backward(upstream: Tensor, v: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    v = np.asarray(v, dtype=DTYPE)
    g = np.asarray(upstream, dtype=DTYPE)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(norms >= eps, norms, 1.0)
    y = v / safe
    grad = (g - y * np.sum(y * g, axis=axis, keepdims=True)) / safe
    return np.where(norms >= eps, grad, 0.0)


def resize_bilinear(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """
    Corner-aligned bilinear resize of an H x W (x C) image, clamped to [0, 1].

    Interpolation uses the a + w * (b - a) form so constants and the
    identity resize are reproduced exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=DTYPE)
    h, w = img.shape[0], img.shape[1]

    def axis_coords(n_in: int, n_out: int):
        if n_out == 1 or n_in == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(h, out_h)
    x0, x1, wx = axis_coords(w, out_w)
    extra = (None,) * (img.ndim - 2)
    wx = wx[(None, slice(None)) + extra]
    wy = wy[(slice(None), None) + extra]

    top = img[y0][:, x0] + wx * (img[y0][:, x1] - img[y0][:, x0])
    bottom = img[y1][:, x0] + wx * (img[y1][:, x1] - img[y1][:, x0])
    return np.clip(top + wy * (bottom - top), 0.0, 1.0)


# ============================================================================
# Serialisation (ADPT format)
# ============================================================================

def _write_tensor(stream, tensor: Tensor):
    t = np.ascontiguousarray(tensor, dtype='<f8')
    if t.ndim > 255:
        raise ValueError(f"rank {t.ndim} too large to serialise")
    stream.write(struct.pack('<B', t.ndim))
    stream.write(struct.pack(f'<{t.ndim}Q', *t.shape))
    stream.write(t.tobytes(order='C'))


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError("truncated ADPT stream")
    return data


def _read_tensor(stream) -> Tensor:
    (rank,) = struct.unpack('<B', _read_exact(stream, 1))
    shape = struct.unpack(f'<{rank}Q', _read_exact(stream, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(stream, 8 * count)
    return np.frombuffer(payload, dtype='<f8').astype(DTYPE).reshape(shape)


def _read_header(stream, expected_version: int, path) -> None:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an ADPT file (magic {magic!r})")
    (version,) = struct.unpack('<B', _read_exact(stream, 1))
    if version != expected_version:
        raise ValueError(f"{path}: unsupported ADPT version {version}, expected {expected_version}")


def save_tensor(path: Union[str, Path], tensor: Tensor):
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack('<B', TENSOR_VERSION))
    _write_tensor(buffer, tensor)
    Path(path).write_bytes(buffer.getvalue())


def load_tensor(path: Union[str, Path]) -> Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor file not found: {path}")
    with open(path, 'rb') as f:
        _read_header(f, TENSOR_VERSION, path)
        return _read_tensor(f)


def save_named_tensors(path: Union[str, Path], tensors: Dict[str, Tensor], meta: Optional[dict] = None):
    """Checkpoint container: header, JSON meta (config echo), then named tensors in order."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack('<B', CHECKPOINT_VERSION))
    buffer.write(struct.pack('<I', len(meta_bytes)))
    buffer.write(meta_bytes)
    buffer.write(struct.pack('<I', len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode('utf-8')
        buffer.write(struct.pack('<H', len(encoded)))
        buffer.write(encoded)
        _write_tensor(buffer, tensor)
    Path(path).write_bytes(buffer.getvalue())


def load_named_tensors(path: Union[str, Path]) -> Tuple[Dict[str, Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        _read_header(f, CHECKPOINT_VERSION, path)
        (meta_len,) = struct.unpack('<I', _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode('utf-8'))
        (count,) = struct.unpack('<I', _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack('<H', _read_exact(f, 2))
            name = _read_exact(f, name_len).decode('utf-8')
            tensors[name] = _read_tensor(f)
    return tensors, meta


# ============================================================================
# Parameter containers
# ============================================================================

class ParamSet:
    """Mixin for dataclasses whose fields are all parameter tensors."""

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in dataclasses.fields(self)}

    def zeros_like(self):
        return type(self)(**{f.name: np.zeros_like(getattr(self, f.name)) for f in dataclasses.fields(self)})

    def copy(self):
        return type(self)(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    @classmethod
    def from_named(cls, tensors: Dict[str, Tensor], prefix: str):
        values = {}
        for f in dataclasses.fields(cls):
            key = f"{prefix}.{f.name}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing tensor {key!r}")
            values[f.name] = np.array(tensors[key], dtype=DTYPE)
        return cls(**values)


def fan_in_uniform(rng: RngStream, shape: Tuple[int, ...], fan_in: int, gain: float = 6.0) -> Tensor:
    """Centred uniform init, bound sqrt(gain / fan_in)."""
    bound = (gain / fan_in) ** 0.5
    return rng.uniform(-bound, bound, shape)
