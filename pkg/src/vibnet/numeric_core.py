"""Dense float64 tensors and a reproducible counter-based random stream.

All tensors in this package are C-contiguous float64 numpy arrays. The
helpers here are thin: numpy supplies storage and BLAS, this module pins
the conventions (dtype, layout, broadcasting rules) and supplies the
random stream every other module draws from.

The random stream is SplitMix64 used counter-style: output k of a stream
with seed s is mix64(s + (k+1) * GAMMA). State is two unsigned 64-bit
integers (seed, counter), so streams serialize trivially and a restored
stream continues bit-exactly. Normal variates come from Box-Muller on
the top 53 bits of the raw outputs; no spare is cached, so a draw of n
normals always consumes 2 * ceil(n/2) raw outputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

Tensor = np.ndarray

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_TWO53 = 2.0 ** -53


class ShapeError(ValueError):
    """Operand shapes do not line up for the requested operation."""


def tensor(data, shape=None) -> Tensor:
    """Build a C-order float64 tensor from nested sequences or an array.

    If shape is given the data is reshaped (must match element count).
    """
    out = np.asarray(data, dtype=np.float64, order="C")
    if shape is not None:
        try:
            out = out.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot view {out.shape} data as {tuple(shape)}") from exc
    return np.ascontiguousarray(out)


def zeros(shape) -> Tensor:
    return np.zeros(shape, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or matrix @ vector."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _broadcastable(x: Tensor, y: Tensor) -> bool:
    # Deliberately narrower than numpy: equal shapes, or one side scalar.
    return x.shape == y.shape or x.ndim == 0 or y.ndim == 0


_ZIP_KINDS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "min": np.minimum,
}
_MAP_KINDS = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "square": np.square,
    "abs": np.abs,
    "relu": lambda x: np.maximum(x, 0.0),
}
_REDUCE_KINDS = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.max,
    "min": np.min,
}


def map_zip_reduce(kind: str, *operands, axis=None) -> Tensor:
    """Elementwise map (1 operand), zip (2 operands), or reduction.

    kind selects the operation; reductions take an optional axis and are
    named "reduce-sum", "reduce-mean", "reduce-max", "reduce-min".
    Zips broadcast only between equal shapes or against a scalar; any
    other mismatch raises ShapeError rather than silently expanding.
    """
    if kind.startswith("reduce-"):
        if len(operands) != 1:
            raise ShapeError(f"{kind} takes exactly one operand")
        fn = _REDUCE_KINDS.get(kind[len("reduce-"):])
        if fn is None:
            raise ValueError(f"unknown reduction {kind!r}")
        return np.asarray(fn(np.asarray(operands[0], dtype=np.float64), axis=axis))
    if len(operands) == 1:
        fn = _MAP_KINDS.get(kind)
        if fn is None:
            raise ValueError(f"unknown map {kind!r}")
        return fn(np.asarray(operands[0], dtype=np.float64))
    if len(operands) == 2:
        fn = _ZIP_KINDS.get(kind)
        if fn is None:
            raise ValueError(f"unknown zip {kind!r}")
        x = np.asarray(operands[0], dtype=np.float64)
        y = np.asarray(operands[1], dtype=np.float64)
        if not _broadcastable(x, y):
            raise ShapeError(f"zip {kind!r} shapes {x.shape} and {y.shape} do not match")
        return fn(x, y)
    raise ShapeError("map_zip_reduce takes one or two operands")


def _mix64(x: Tensor) -> Tensor:
    """Finalizer of SplitMix64 applied elementwise to a uint64 array."""
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


def derive_seed(base_seed: int, *keys) -> int:
    """Derive a child seed from a base seed and a tuple of labels.

    Hashes the base seed together with the string form of each key with
    BLAKE2b, so distinct grid cells and pipeline stages get decorrelated
    streams that are stable across runs and platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(base_seed).to_bytes(8, "little", signed=False))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based SplitMix64 stream with Box-Muller normals.

    Output k is mix64(seed + (k+1)*GAMMA); the only mutable state is the
    count of raw outputs consumed. All arithmetic runs on uint64 arrays,
    which wrap modulo 2**64 as the algorithm requires.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self._seed = seed
        self._counter = 0

    def _raw(self, n: int) -> Tensor:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(_U64(self._seed) + idx * _GAMMA)

    def uniform(self, shape=None) -> Tensor:
        """Uniform draws in [0, 1) from the top 53 bits of each output."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _TWO53
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def standard_normal(self, shape=None) -> Tensor:
        """Standard normals via Box-Muller; consumes 2*ceil(n/2) outputs."""
        n = 1 if shape is None else int(np.prod(shape))
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 shifted into (0, 1] so the log is finite.
        u1 = ((raw[:pairs] >> _U64(11)).astype(np.float64) + 1.0) * _TWO53
        u2 = (raw[pairs:] >> _U64(11)).astype(np.float64) * _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        if shape is None:
            return float(z[0])
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high) by scaling a 53-bit uniform.

        The scaling map has a bias below 2**-40 for any range this
        package uses; it is chosen for its fixed raw-output consumption.
        """
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = 1 if shape is None else int(np.prod(shape))
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _TWO53
        vals = (low + np.floor(u * (high - low))).astype(np.int64)
        if shape is None:
            return int(vals[0])
        return vals.reshape(shape)

    def permutation(self, n: int) -> Tensor:
        """Uniform random permutation of range(n) by sorting raw keys."""
        return np.argsort(self._raw(n), kind="stable")

    def choice(self, n: int, size: int) -> Tensor:
        """size distinct indices drawn from range(n) without replacement."""
        if size > n:
            raise ValueError(f"cannot draw {size} distinct values from range({n})")
        return self.permutation(n)[:size]

    def state(self) -> dict:
        """Serializable snapshot; feed to Rng.from_state to resume."""
        return {"seed": self._seed, "counter": self._counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng._counter = int(state["counter"])
        return rng

    def spawn(self, key) -> "Rng":
        """Independent child stream; key may be an int or a label."""
        return Rng(derive_seed(self._seed, "spawn", key))


def sample_standard_normal(rng: Rng, shape) -> Tensor:
    """Module-level alias used where an op signature asks for a draw."""
    return rng.standard_normal(shape)
