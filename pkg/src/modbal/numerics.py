"""Dense numeric helpers and the package-wide deterministic RNG.

Matrices are plain ``float64`` numpy arrays; the helpers here add the
shape checks and error types the rest of the package relies on.
"""

import numpy as np

from .errors import NumericError, ShapeError

# SplitMix64 constants (Steele, Lea & Flood 2014).
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPLIT_SALT = 0xD1B54A32D192ED03
_TWO_POW_M53 = 2.0 ** -53


def as_matrix(x, name="matrix"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} has non-finite entries")
    return a


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul overflowed")
    return out


def softmax(v, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def central_diff_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``.

    Parameters
    ----------
    f : callable
        Maps a float64 vector to a scalar.
    x : array_like
        Point of evaluation. Any shape; the result has the same shape.
    h : float
        Step size, must be positive.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near component {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` of a stream is ``mix64(key + (i + 1) * GOLDEN)`` in wrapping
    64-bit arithmetic, so streams are identical on every platform and child
    streams can be derived with :meth:`split` without touching the parent.
    """

    def __init__(self, seed=0):
        with np.errstate(over="ignore"):
            self._key = _mix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        self._counter = 0

    @classmethod
    def _from_key(cls, key):
        obj = cls.__new__(cls)
        obj._key = np.uint64(key)
        obj._counter = 0
        return obj

    def split(self, tag):
        """Independent child stream identified by an integer ``tag``."""
        with np.errstate(over="ignore"):
            salt = _mix64(np.uint64((int(tag) * _SPLIT_SALT + 1) & 0xFFFFFFFFFFFFFFFF))
            return Rng._from_key(_mix64(self._key ^ salt))

    def bits(self, size=None):
        """Raw 64-bit draws as ``uint64``."""
        count = 1 if size is None else int(np.prod(size))
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            out = _mix64(self._key + idx * _GOLDEN)
        return out[0] if size is None else out.reshape(size)

    def random(self, size=None):
        """Uniform floats on [0, 1) with 53 bits of resolution."""
        b = self.bits(size)
        return (b >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        # Box-Muller; 1 - u keeps the log argument in (0, 1].
        count = 1 if size is None else int(np.prod(size))
        u = self.random(2 * count)
        z = np.sqrt(-2.0 * np.log1p(-u[:count])) * np.cos(2.0 * np.pi * u[count:])
        z = loc + scale * z
        return z[0] if size is None else z.reshape(size)

    def integers(self, high, size=None):
        """Integers on [0, high) by multiply-shift on 32-bit draws."""
        if high <= 0:
            raise ValueError("high must be positive")
        b = self.bits(size) >> np.uint64(32)
        out = (b * np.uint64(high)) >> np.uint64(32)
        return int(out) if size is None else out.astype(np.int64)

    def choice_excluding(self, high, exclude):
        """Uniform integer on [0, high) other than ``exclude``."""
        k = self.integers(high - 1)
        return k + 1 if k >= exclude else k

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
