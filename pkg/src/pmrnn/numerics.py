"""Shared numeric substrate: float64 tensors, counter-based RNG, finite differences.

Everything downstream assumes float64 (complex128 where a cell needs a complex
state). Gradients live next to their values in ParamTensor so optimizer and
backward code can stay allocation-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REAL = np.float64
COMPLEX = np.complex128

_U64 = np.uint64
_U64_MASK = (1 << 64) - 1


@dataclass
class ParamTensor:
    """A named trainable array with a matching gradient buffer."""

    values: np.ndarray
    grad: np.ndarray
    name: str

    @classmethod
    def of(cls, values: np.ndarray, name: str) -> "ParamTensor":
        values = np.asarray(values)
        if values.dtype not in (REAL, COMPLEX):
            values = values.astype(REAL)
        return cls(values, np.zeros_like(values), name)

    @classmethod
    def zeros(cls, shape, name: str, dtype=REAL) -> "ParamTensor":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), name)


def zero_grad(params) -> None:
    """Reset every gradient buffer in `params` to zero, in place."""
    for p in params:
        p.grad[...] = 0.0


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream: (seed, counter) fully determines all draws.

    Each counter value names an independent stream. Substreams are carved out
    by arithmetic on the counter (value-split), never by sharing mutable
    generator state, so parallel or out-of-order generation stays
    reproducible.
    """

    seed: int
    counter: int = 0

    def stream(self, counter: int) -> "Rng":
        return Rng(self.seed, counter & _U64_MASK)

    def offset(self, delta: int) -> "Rng":
        return Rng(self.seed, (self.counter + delta) & _U64_MASK)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        key = np.array([self.seed & _U64_MASK, self.counter & _U64_MASK], dtype=_U64)
        return np.random.Generator(np.random.Philox(key=key))


def glorot_init(rows: int, cols: int, rng: Rng | np.random.Generator,
                name: str = "w") -> ParamTensor:
    """Uniform(-a, a) matrix [rows, cols] with a = sqrt(6 / (rows + cols))."""
    gen = rng.generator() if isinstance(rng, Rng) else rng
    bound = np.sqrt(6.0 / (rows + cols))
    w = gen.uniform(-bound, bound, size=(rows, cols)).astype(REAL)
    return ParamTensor.of(w, name)


def finite_difference_grad(f, p: ParamTensor, h: float = 1e-5,
                           indices=None) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. p.values.

    f is called with no arguments and must read p.values. Only the flat
    `indices` are probed when given; untouched coordinates come back zero.
    Complex parameters are perturbed separately along the real and imaginary
    axes, matching the grad convention dL/dRe + i dL/dIm.
    """
    flat = p.values.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    steps = (1.0,) if not np.iscomplexobj(flat) else (1.0, 1.0j)
    for i in idx:
        acc = 0.0
        for direction in steps:
            orig = flat[i]
            flat[i] = orig + direction * h
            f_plus = f()
            flat[i] = orig - direction * h
            f_minus = f()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite loss while probing {p.name}[{i}]: "
                    f"f(+h)={f_plus}, f(-h)={f_minus}")
            acc = acc + direction * (f_plus - f_minus) / (2.0 * h)
        out[i] = acc
    return out.reshape(p.values.shape)


@dataclass
class SequenceBatch:
    """Padded batch of sequences: data [B, T, F] float64, lengths [B] int."""

    data: np.ndarray
    lengths: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=REAL)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"data must be [B, T, F], got shape {self.data.shape}")
        if self.lengths.shape != (self.data.shape[0],):
            raise ValueError("lengths must have one entry per batch row")
        if self.lengths.min(initial=0) < 0 or self.lengths.max(initial=0) > self.data.shape[1]:
            raise ValueError("lengths out of range for padded time axis")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def padded_len(self) -> int:
        return self.data.shape[1]

    def valid_mask(self) -> np.ndarray:
        """[B, T] boolean mask of real (non-padding) timesteps."""
        t = np.arange(self.padded_len)
        return t[None, :] < self.lengths[:, None]
