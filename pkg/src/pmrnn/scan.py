"""Diagonal affine recurrences h_t = a_t*h_{t-1} + b_t, sequential and parallel.

Elements compose associatively: applying (a1, b1) then (a2, b2) equals the
single element (a2*a1, a2*b1 + b2). The parallel path is a Blelloch two-sweep
over that composition (O(T) work, O(log T) depth), vectorized over leading
axes. The backward pass is the reverse-time affine scan of the adjoints and
reuses the same kernels.

Array layout: time lives on axis -2, state dimension on axis -1, so a batch
is [B, T, d] and a single sequence is [T, d].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this sequence length the tree sweeps cost more than a plain loop.
TIME_PARALLEL_THRESHOLD = 256


@dataclass
class AffineElement:
    """One step (or a composed run of steps) of a diagonal affine recurrence."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a)
        self.b = np.asarray(self.b)
        if self.a.shape != self.b.shape:
            raise ValueError(f"a/b shape mismatch: {self.a.shape} vs {self.b.shape}")

    @property
    def num_steps(self) -> int:
        return self.a.shape[-2] if self.a.ndim >= 2 else 1


def combine(first: AffineElement, second: AffineElement) -> AffineElement:
    """Compose two elements, `first` earlier in time."""
    return AffineElement(second.a * first.a, second.a * first.b + second.b)


def _as_state_shape(h0: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast initial state against [..., T, d] step arrays."""
    h0 = np.asarray(h0)
    if h0.ndim == like.ndim - 1:
        h0 = np.expand_dims(h0, -2)
    return h0


def scan_sequential(elements: AffineElement, h0: np.ndarray) -> np.ndarray:
    """Reference evaluation: a plain loop over time. Returns states [..., T, d]."""
    a, b = elements.a, elements.b
    steps = a.shape[-2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    h = np.broadcast_to(np.asarray(h0), out[..., 0, :].shape)
    for t in range(steps):
        h = a[..., t, :] * h + b[..., t, :]
        out[..., t, :] = h
    return out


def scan_parallel(elements: AffineElement, h0: np.ndarray) -> np.ndarray:
    """Blelloch two-sweep evaluation of the same recurrence.

    Pads to a power of two with identity elements (1, 0), runs an in-place
    upsweep then downsweep to get exclusive prefix compositions, folds each
    original element back in for the inclusive ones, and applies them to h0.
    """
    a_in, b_in = np.broadcast_arrays(elements.a, elements.b)
    steps = a_in.shape[-2]
    levels = max(1, int(np.ceil(np.log2(steps)))) if steps > 1 else 0
    padded = 1 << levels
    pad_shape = list(a_in.shape)
    pad_shape[-2] = padded
    a = np.ones(pad_shape, dtype=a_in.dtype)
    b = np.zeros(pad_shape, dtype=b_in.dtype)
    a[..., :steps, :] = a_in
    b[..., :steps, :] = b_in

    for lvl in range(levels):
        stride, half = 1 << (lvl + 1), 1 << lvl
        a_l = a[..., half - 1::stride, :]
        b_l = b[..., half - 1::stride, :]
        a_r = a[..., stride - 1::stride, :]
        b_r = b[..., stride - 1::stride, :]
        b_r += a_r * b_l
        a_r *= a_l

    a[..., padded - 1, :] = 1.0
    b[..., padded - 1, :] = 0.0

    for lvl in range(levels - 1, -1, -1):
        stride, half = 1 << (lvl + 1), 1 << lvl
        a_l = a[..., half - 1::stride, :]
        b_l = b[..., half - 1::stride, :]
        a_r = a[..., stride - 1::stride, :]
        b_r = b[..., stride - 1::stride, :]
        t_a = a_l.copy()
        t_b = b_l.copy()
        a_l[...] = a_r
        b_l[...] = b_r
        # Incoming prefix (right slot) is earlier in time than the stashed
        # left-subtree composition, so compose as (prefix, then subtree).
        b_r[...] = t_a * b_r + t_b
        a_r[...] = t_a * a_r

    # a/b now hold exclusive prefixes; fold the original step back in.
    incl_a = a_in * a[..., :steps, :]
    incl_b = a_in * b[..., :steps, :] + b_in
    return incl_a * _as_state_shape(h0, incl_a) + incl_b


def scan_adjoint(elements: AffineElement, states: np.ndarray, h0: np.ndarray,
                 grad_states: np.ndarray, parallel: bool | None = None):
    """Backward through the recurrence given dL/dh_t for every t.

    The adjoint obeys lam_t = conj(a_{t+1})*lam_{t+1} + dL/dh_t running
    backward in time, itself an affine scan on the reversed arrays. Returns
    (grad_a, grad_b, grad_h0) with grad_a = lam_t * conj(h_{t-1}) and
    grad_b = lam_t; grad_h0 keeps the per-batch shape of lam_1.
    """
    a = elements.a
    steps = a.shape[-2]
    conj = np.conj if np.iscomplexobj(a) else (lambda x: x)
    if parallel is None:
        parallel = steps >= TIME_PARALLEL_THRESHOLD

    a_c = conj(a)
    a_rev = np.ones_like(a_c)
    if steps > 1:
        a_rev[..., 1:, :] = np.flip(a_c[..., 1:, :], axis=-2)
    g_rev = np.flip(grad_states, axis=-2)
    kernel = scan_parallel if parallel else scan_sequential
    lam = np.flip(kernel(AffineElement(a_rev, g_rev), np.zeros_like(grad_states[..., 0, :])),
                  axis=-2)

    prev = np.empty_like(states)
    prev[..., 0, :] = _as_state_shape(h0, states)[..., 0, :]
    prev[..., 1:, :] = states[..., :-1, :]
    grad_a = lam * conj(prev)
    grad_h0 = a_c[..., 0, :] * lam[..., 0, :]
    return grad_a, lam, grad_h0
