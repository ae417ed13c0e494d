"""Dense float64 kernels shared by every other module.

All public operations work on 2-D ``numpy.ndarray`` values ("matrices"),
validate their inputs, and guarantee finite outputs.  Everything here is a
pure function of its arguments except :class:`Rng`, which is an explicit
stateful stream.

Distance conventions (``x`` is the target, ``y`` the prediction, gradients
are taken with respect to ``y``, ``n = rows * cols``):

====  =============================  ==========================================
kind  value                          gradient wrt y
====  =============================  ==========================================
mae   mean(|x - y|)                  -sign(x - y) / n, with sign(0) = 0
mse   mean((x - y)^2)                -2 (x - y) / n
fro   sqrt(sum((x - y)^2))           -(x - y) / fro(x, y); zeros when x == y
cos   1 - <x, y> / (|x|_F |y|_F)     -x/(|x||y|) + <x,y> y / (|x| |y|^3)
====  =============================  ==========================================

Randomness is a counter-based stream so that identical seeds reproduce
identical values on every platform and numpy version.  The algorithm is
pinned here and covered by regression tests:

* seed conditioning:  ``S = mix64(seed)`` where ``mix64`` is the
  public-domain splitmix64 finalizer (xorshift 30 / multiply
  0xBF58476D1CE4E5B9 / xorshift 27 / multiply 0x94D049BB133111EB /
  xorshift 31), all mod 2^64 -- so nearby user seeds yield unrelated
  streams;
* raw stream:  ``out[i] = mix64(S + (i + 1) * 0x9E3779B97F4A7C15)``;
* uniforms on [0, 1):  ``(out[i] >> 11) * 2^-53``;
* normals: Box-Muller over consecutive uniform blocks, see
  :meth:`Rng.normals` for the exact layout.
"""

from __future__ import annotations

import hashlib
import math
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

Matrix = np.ndarray

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


class DistanceKind(str, Enum):
    """Closed enumeration of the supported distance functions."""

    MAE = "mae"
    MSE = "mse"
    FRO = "fro"
    COS = "cos"


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Coerce ``x`` to a 2-D float64 array and check it is finite."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")
    return arr


def _require_same_shape(x: Matrix, y: Matrix, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op} requires equal shapes, got {x.shape} and {y.shape}")


def matmul(x, y) -> Matrix:
    """Matrix product with shape checking.

    Raises :class:`ShapeError` naming both shapes when the inner dimensions
    disagree.  Repeated calls on identical inputs are bit-identical.
    """
    a = as_matrix(x, "left operand")
    b = as_matrix(y, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ShapeError("matrix product overflowed to non-finite values")
    return out


def softmax_rows(c, temperature: float) -> Matrix:
    """Row-wise temperature softmax with max-subtraction for overflow safety.

    Each output row sums to 1 within 1e-12.  As ``temperature`` shrinks the
    rows approach one-hot indicators of the row maximum.
    """
    if not (temperature > 0):
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    logits = as_matrix(c, "logits")
    with np.errstate(over="ignore"):
        shifted = (logits - logits.max(axis=1, keepdims=True)) / temperature
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def distance(x, y, kind: DistanceKind) -> float:
    """Scalar distance between two equally shaped matrices."""
    a = as_matrix(x, "x")
    b = as_matrix(y, "y")
    _require_same_shape(a, b, "distance")
    kind = DistanceKind(kind)
    if kind is DistanceKind.MAE:
        return float(np.mean(np.abs(a - b)))
    if kind is DistanceKind.MSE:
        return float(np.mean((a - b) ** 2))
    if kind is DistanceKind.FRO:
        return float(np.sqrt(np.sum((a - b) ** 2)))
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine distance is undefined for a zero matrix")
    return 1.0 - float(np.vdot(a, b)) / (na * nb)


def distance_grad(x, y, kind: DistanceKind) -> Matrix:
    """Gradient of :func:`distance` with respect to its second argument."""
    a = as_matrix(x, "x")
    b = as_matrix(y, "y")
    _require_same_shape(a, b, "distance_grad")
    kind = DistanceKind(kind)
    n = a.size
    diff = a - b
    if kind is DistanceKind.MAE:
        return -np.sign(diff) / n
    if kind is DistanceKind.MSE:
        return -2.0 * diff / n
    if kind is DistanceKind.FRO:
        norm = float(np.sqrt(np.sum(diff**2)))
        if norm == 0.0:
            return np.zeros_like(b)
        return -diff / norm
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine distance is undefined for a zero matrix")
    dot = float(np.vdot(a, b))
    return -a / (na * nb) + dot * b / (na * nb**3)


def finite_diff(loss_fn: Callable[[Matrix], float], at, h: float) -> Matrix:
    """Central-difference gradient oracle: (f(t + h e) - f(t - h e)) / 2h."""
    if not (h > 0):
        raise ParameterError(f"step h must be > 0, got {h}")
    theta = as_matrix(at, "at")
    grad = np.zeros_like(theta)
    probe = theta.copy()
    for idx in np.ndindex(theta.shape):
        base = probe[idx]
        probe[idx] = base + h
        hi = loss_fn(probe)
        probe[idx] = base - h
        lo = loss_fn(probe)
        probe[idx] = base
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


def exact_mean(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, exactly rounded.

    Summation runs in rational arithmetic with a single rounding at the end,
    so the result is bit-identical under input permutation and the mean of K
    identical arrays is exactly that array.
    """
    if not tensors:
        raise ParameterError("mean of an empty sequence")
    stack = [np.asarray(t, dtype=np.float64) for t in tensors]
    first = stack[0]
    for t in stack[1:]:
        _require_same_shape(first, t, "mean")
    if len(stack) == 1 or all(np.array_equal(t, first) for t in stack[1:]):
        return first.copy()
    k = len(stack)
    flats = [t.ravel() for t in stack]
    out = np.empty(first.size, dtype=np.float64)
    for i in range(first.size):
        out[i] = float(sum(Fraction(f[i].item()) for f in flats) / k)
    return out.reshape(first.shape)


def stable_hash64(label: str) -> int:
    """Platform-stable 64-bit hash used to derive per-slot seeds."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _mix64(value: int) -> int:
    z = value & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic counter-based random stream (see module docstring).

    The stream depends only on ``(seed, counter)``; consuming ``n`` values
    advances the counter by ``n``, so callers can reason about consumption
    in flat index order.
    """

    def __init__(self, seed: int):
        self.seed = _mix64(int(seed) & _MASK64)
        self.counter = 0

    def spawn(self, label: str) -> "Rng":
        """Independent child stream keyed by a stable label."""
        return Rng(self.seed ^ stable_hash64(label))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = _U64(self.seed) + idx * _U64(_GOLDEN)
            z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
            z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
            z = z ^ (z >> _U64(31))
        return z

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self._raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller.

        Layout: draw ``p = ceil(n/2)`` uniforms mapped to (0, 1] for the
        radius, then ``p`` uniforms on [0, 1) for the angle; outputs are the
        interleaved (cos, sin) pair stream truncated to ``n``.
        """
        if n == 0:
            return np.empty(0)
        pairs = (n + 1) // 2
        u1 = ((self._raw(pairs) >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = self.uniforms(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]


def gaussian_sample(rng: Rng, rows: int, cols: int, mean: float, stdev: float) -> Matrix:
    """``rows x cols`` matrix of i.i.d. normals drawn in row-major order."""
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if stdev < 0:
        raise ParameterError(f"stdev must be >= 0, got {stdev}")
    z = rng.normals(rows * cols)
    return (mean + stdev * z).reshape(rows, cols)
