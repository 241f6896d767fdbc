"""The 3-layer projection head mapping patch features to parcel classes.

Architecture: two residual layers followed by a projection to K classes,

    h1 = x + GELU(x W1^T + b1)
    h2 = h1 + ReLU(h1 W2^T + b2)
    logits = h2 W3^T + b3
    probs = softmax(logits)  (row-wise)

Layers 1 and 2 are square (C -> C); GELU uses the exact error-function
form. All arithmetic is 64-bit so the analytic backward pass can be
verified against central finite differences.

Training evaluates the softmax at patch resolution; inference upsamples
the logits bilinearly to image resolution first and applies the softmax
on top (``infer_parcel_map``).

Checkpoint file (ALANHEAD): magic "ALANHEAD" | u16 version=1 | u32 C, K
| six f64-LE arrays in order W1, b1, W2, b2, W3, b3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from alan.errors import DataError

HEAD_MAGIC = b"ALANHEAD"
HEAD_VERSION = 1

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

PARAM_FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with the standard normal CDF."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx GELU(x) = Phi(x) + x * phi(x)."""
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RaptorParams:
    """Weights and biases of the head. Also reused as the container for
    gradients and Adam moments (same shapes)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def C(self) -> int:
        return self.W1.shape[0]

    @property
    def K(self) -> int:
        return self.W3.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    @classmethod
    def from_arrays(cls, arrays) -> "RaptorParams":
        return cls(*arrays)

    @classmethod
    def zeros(cls, c: int, k: int) -> "RaptorParams":
        return cls(
            W1=np.zeros((c, c)), b1=np.zeros(c),
            W2=np.zeros((c, c)), b2=np.zeros(c),
            W3=np.zeros((k, c)), b3=np.zeros(k),
        )

    @classmethod
    def init(cls, c: int, k: int, rng: np.random.Generator) -> "RaptorParams":
        """Symmetric uniform init in +-sqrt(6 / (fan_in + fan_out)), zero
        biases."""
        def uniform(fan_out, fan_in):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        params = cls(
            W1=uniform(c, c), b1=np.zeros(c),
            W2=uniform(c, c), b2=np.zeros(c),
            W3=uniform(k, c), b3=np.zeros(k),
        )
        params.validate()
        return params

    def validate(self) -> None:
        c, k = self.C, self.K
        if k < 2:
            raise DataError(f"need K >= 2 parcel classes, got {k}")
        shapes = {
            "W1": (c, c), "b1": (c,),
            "W2": (c, c), "b2": (c,),
            "W3": (k, c), "b3": (k,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise DataError(f"{name} must have shape {want}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite value in {name}")


@dataclass
class ForwardCache:
    """Intermediates retained for the backward pass."""

    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    probs: np.ndarray
    params: RaptorParams


def _logits(x: np.ndarray, params: RaptorParams):
    a1 = x @ params.W1.T + params.b1
    h1 = x + gelu(a1)
    a2 = h1 @ params.W2.T + params.b2
    h2 = h1 + np.maximum(a2, 0.0)
    logits = h2 @ params.W3.T + params.b3
    return a1, h1, a2, h2, logits


def forward_patch(features: np.ndarray, params: RaptorParams):
    """Run the head on [N, C] features; returns ([N, K] probs, cache)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.C:
        raise DataError(
            f"features must be [N, {params.C}], got shape {x.shape}"
        )
    a1, h1, a2, h2, logits = _logits(x, params)
    probs = softmax(logits)
    return probs, ForwardCache(x=x, a1=a1, h1=h1, a2=a2, h2=h2,
                               probs=probs, params=params)


def backward_patch(cache: ForwardCache, dprobs: np.ndarray):
    """Exact gradients of the forward map.

    Takes dL/dprobs from a forward_patch cache and returns
    (dL/dparams as RaptorParams, dL/dfeatures [N, C]).
    """
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != cache.probs.shape:
        raise DataError(
            f"gradient shape {dprobs.shape} does not match cached forward "
            f"output {cache.probs.shape}"
        )
    p = cache.probs
    params = cache.params
    # softmax Jacobian: dz_i = p_i * (g_i - sum_j g_j p_j)
    dz = p * (dprobs - (dprobs * p).sum(axis=1, keepdims=True))
    dW3 = dz.T @ cache.h2
    db3 = dz.sum(axis=0)
    dh2 = dz @ params.W3
    da2 = dh2 * (cache.a2 > 0.0)
    dW2 = da2.T @ cache.h1
    db2 = da2.sum(axis=0)
    dh1 = dh2 + da2 @ params.W2  # skip connection
    da1 = dh1 * gelu_grad(cache.a1)
    dW1 = da1.T @ cache.x
    db1 = da1.sum(axis=0)
    dx = dh1 + da1 @ params.W1  # skip connection
    grads = RaptorParams(W1=dW1, b1=db1, W2=dW2, b2=db2, W3=dW3, b3=db3)
    return grads, dx


def bilinear_upsample(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear interpolation, align-corners-false.

    Source coordinates are placed at pixel centers: for output index i,
    src = (i + 0.5) * (in / out) - 0.5, clamped to the valid range.
    """
    field = np.asarray(field)
    if field.ndim == 2:
        return bilinear_upsample(field[:, :, None], out_h, out_w)[:, :, 0]
    h, w = field.shape[:2]
    if h == 0 or w == 0:
        raise DataError("cannot upsample a zero-sized field")
    if out_h < h or out_w < w:
        raise DataError(
            f"output {out_h}x{out_w} smaller than input {h}x{w}"
        )

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = field[y0][:, x0] * (1 - fx) + field[y0][:, x1] * fx
    bot = field[y1][:, x0] * (1 - fx) + field[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def infer_parcel_map(features: np.ndarray, params: RaptorParams,
                     img_h: int, img_w: int) -> np.ndarray:
    """Full-resolution parcel labels for one frame.

    [Hp, Wp, C] features -> patch-level logits -> bilinear upsample to
    (img_h, img_w) -> softmax -> per-pixel argmax, ties to the lowest
    class index. Returns an int32 [img_h, img_w] raster.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != params.C:
        raise DataError(
            f"features must be [Hp, Wp, {params.C}], got {features.shape}"
        )
    hp, wp, c = features.shape
    *_, logits = _logits(features.reshape(hp * wp, c), params)
    logits = logits.reshape(hp, wp, params.K)
    up = bilinear_upsample(logits, img_h, img_w)
    probs = softmax(up)
    # np.argmax breaks ties toward the lowest index.
    return np.argmax(probs, axis=-1).astype(np.int32)


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(params: RaptorParams, path) -> None:
    params.validate()
    with open(path, "wb") as f:
        f.write(HEAD_MAGIC + struct.pack("<HII", HEAD_VERSION,
                                         params.C, params.K))
        for arr in params.arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> RaptorParams:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != HEAD_MAGIC:
        raise DataError(f"{path}: bad magic, not an ALANHEAD file")
    fixed = struct.calcsize("<HII")
    if len(data) < 8 + fixed:
        raise DataError(f"{path}: truncated header")
    version, c, k = struct.unpack_from("<HII", data, 8)
    if version != HEAD_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    sizes = [(c, c), (c,), (c, c), (c,), (k, c), (k,)]
    counts = [int(np.prod(s)) for s in sizes]
    expected = 8 + fixed + 8 * sum(counts)
    if len(data) != expected:
        raise DataError(
            f"{path}: size mismatch, header implies {expected} bytes, "
            f"file has {len(data)}"
        )
    off = 8 + fixed
    arrays = []
    for shape, count in zip(sizes, counts):
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        arrays.append(arr.reshape(shape).astype(np.float64))
        off += 8 * count
    params = RaptorParams.from_arrays(arrays)
    params.validate()
    return params
