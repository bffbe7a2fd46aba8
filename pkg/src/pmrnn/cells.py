"""Recurrent cells in diagonal affine form, ready for the shared scan kernels.

Three flavors of the thresholded persistent-memory cell (BMRU, CMRU, aCMRU)
plus two fading-memory baselines (LRU, minGRU). Every cell maps an input
sequence u [B, T, m] to states/outputs [B, T, d] by building per-step affine
elements h_t = a_t*h_{t-1} + b_t and scanning them.

The persistent cells gate with hard nonlinearities:

    candidate = W_cand u + b_cand
    threshold = |W_thresh u + b_thresh|
    update    = step(|candidate| - threshold)     (1 at 0, else 0/1)
    direction = sign(candidate)                    (0 at 0)
    a_t = 1 - update + epsilon*update
    b_t = update * direction * step_size

Backward uses exact adjoints through a_t/b_t and a bell-shaped surrogate
slope for the two hard nonlinearities; the sign surrogate is twice the step
surrogate since sign(x) = 2*step(x) - 1.
"""

from __future__ import annotations

import numpy as np

from .numerics import COMPLEX, REAL, ParamTensor, Rng, glorot_init
from .scan import (TIME_PARALLEL_THRESHOLD, AffineElement, scan_adjoint,
                   scan_parallel, scan_sequential)

CELL_KINDS = ("bmru", "cmru", "acmru", "lru", "mingru")


def hard_step(x: np.ndarray) -> np.ndarray:
    """Unit step with the convention step(0) = 1."""
    return np.where(x >= 0.0, 1.0, 0.0)


def surrogate_slope(x: np.ndarray, sharpness: float) -> np.ndarray:
    """Bell-shaped stand-in for the step derivative: 1/(1 + (pi*k*x)^2)."""
    return 1.0 / (1.0 + np.square(np.pi * sharpness * x))


def _scan(elements: AffineElement, h0, parallel: bool | None = None) -> np.ndarray:
    if parallel is None:
        parallel = elements.num_steps >= TIME_PARALLEL_THRESHOLD
    return (scan_parallel if parallel else scan_sequential)(elements, h0)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# Persistent-memory family
# ---------------------------------------------------------------------------

class CmruCell:
    """Thresholded lattice-walk cell; epsilon sets what an update keeps.

    epsilon=1 adds +/-step_size to the carried state (persistent counter),
    epsilon=0 overwrites (binary flavor), epsilon=-1 reflects. The "acmru"
    variant reads its step size off the input instead of a learned constant.
    """

    def __init__(self, d: int, m: int, rng: Rng, epsilon: float = 1.0,
                 variant: str = "cmru", surrogate_sharpness: float = 1.0):
        if variant not in ("bmru", "cmru", "acmru"):
            raise ValueError(f"unknown variant {variant!r}")
        self.d, self.m = d, m
        self.variant = variant
        self.epsilon = 0.0 if variant == "bmru" else float(epsilon)
        self.surrogate_sharpness = float(surrogate_sharpness)
        gen = rng.generator()
        self.w_cand = glorot_init(d, m, gen, "cell.w_cand")
        self.b_cand = ParamTensor.zeros(d, "cell.b_cand")
        self.w_thresh = glorot_init(d, m, gen, "cell.w_thresh")
        self.b_thresh = ParamTensor.zeros(d, "cell.b_thresh")
        if variant == "acmru":
            self.w_step = glorot_init(d, m, gen, "cell.w_step")
            self.b_step = ParamTensor.zeros(d, "cell.b_step")
        else:
            # Positive step size, stored as its log.
            self.log_step = ParamTensor.zeros(d, "cell.log_step")

    def params(self) -> list[ParamTensor]:
        base = [self.w_cand, self.b_cand, self.w_thresh, self.b_thresh]
        if self.variant == "acmru":
            return base + [self.w_step, self.b_step]
        return base + [self.log_step]

    def set_epsilon(self, value: float) -> None:
        if self.variant == "bmru" and value != 0.0:
            raise ValueError("bmru fixes epsilon at 0")
        self.epsilon = float(value)

    def gate(self, u: np.ndarray):
        """(candidate, threshold_pre, update, direction) for inputs [..., m]."""
        cand = u @ self.w_cand.values.T + self.b_cand.values
        thresh_pre = u @ self.w_thresh.values.T + self.b_thresh.values
        update = hard_step(np.abs(cand) - np.abs(thresh_pre))
        direction = np.sign(cand)
        return cand, thresh_pre, update, direction

    def step_size(self, u: np.ndarray) -> np.ndarray:
        if self.variant == "acmru":
            return u @ self.w_step.values.T + self.b_step.values
        return np.exp(self.log_step.values)

    def affine(self, update: np.ndarray, direction: np.ndarray,
               step: np.ndarray) -> AffineElement:
        a = 1.0 - update + self.epsilon * update
        b = update * direction * step
        return AffineElement(a, b)

    def forward(self, u: np.ndarray, h0: np.ndarray | None = None,
                parallel: bool | None = None):
        """u [B, T, m] -> states [B, T, d] plus a cache for backward."""
        if h0 is None:
            h0 = np.zeros(u.shape[:-2] + (self.d,), REAL)
        cand, thresh_pre, update, direction = self.gate(u)
        step = self.step_size(u)
        elements = self.affine(update, direction, step)
        states = _scan(elements, h0, parallel)
        cache = dict(u=u, cand=cand, thresh_pre=thresh_pre, update=update,
                     direction=direction, step=step, elements=elements,
                     states=states, h0=h0, epsilon=self.epsilon)
        return states, cache

    def backward(self, cache: dict, grad_states: np.ndarray,
                 parallel: bool | None = None) -> np.ndarray:
        """Accumulate parameter grads, return dL/du [B, T, m]."""
        u, cand = cache["u"], cache["cand"]
        update, direction, step = cache["update"], cache["direction"], cache["step"]
        eps = cache["epsilon"]
        grad_a, grad_b, _ = scan_adjoint(cache["elements"], cache["states"],
                                         cache["h0"], grad_states, parallel)

        g_update = grad_a * (eps - 1.0) + grad_b * direction * step
        g_direction = grad_b * update * step
        g_step = grad_b * update * direction

        margin = np.abs(cand) - np.abs(cache["thresh_pre"])
        g_margin = g_update * surrogate_slope(margin, self.surrogate_sharpness)
        g_cand = (g_margin * np.sign(cand)
                  + g_direction * 2.0 * surrogate_slope(cand, self.surrogate_sharpness))
        g_thresh_pre = -g_margin * np.sign(cache["thresh_pre"])

        gc, gt = _flat(g_cand), _flat(g_thresh_pre)
        uf = _flat(u)
        self.w_cand.grad += gc.T @ uf
        self.b_cand.grad += gc.sum(0)
        self.w_thresh.grad += gt.T @ uf
        self.b_thresh.grad += gt.sum(0)
        g_u = g_cand @ self.w_cand.values + g_thresh_pre @ self.w_thresh.values
        if self.variant == "acmru":
            gs = _flat(g_step)
            self.w_step.grad += gs.T @ uf
            self.b_step.grad += gs.sum(0)
            g_u += g_step @ self.w_step.values
        else:
            self.log_step.grad += (g_step * step).reshape(-1, self.d).sum(0)
        return g_u


def ssm_equivalence_check(cell: CmruCell, u_t: np.ndarray, h_prev: np.ndarray) -> float:
    """Residual between the gated update and its input-dependent SSM form.

    For one step with input u_t != 0 the update equals A h_prev + B0 u_t with
    A = diag(1 - z + eps*z) and B0 = (z*direction*step) u_t^T / (u_t^T u_t).
    Returns the max-abs residual over the given states h_prev [..., d].
    """
    u_t = np.asarray(u_t, dtype=REAL)
    denom = float(u_t @ u_t)
    if denom == 0.0:
        raise ValueError("ssm form undefined for an all-zero input")
    cand, thresh_pre, update, direction = cell.gate(u_t)
    step = cell.step_size(u_t)
    direct = (update * (direction * step + cell.epsilon * h_prev)
              + (1.0 - update) * h_prev)
    a_diag = 1.0 - update + cell.epsilon * update
    b_mat = np.outer(update * direction * step, u_t) / denom
    via_ssm = a_diag * h_prev + b_mat @ u_t
    return float(np.abs(via_ssm - direct).max())


def reachable_lattice(cell: CmruCell, k_max: int) -> np.ndarray:
    """States reachable from zero by explicit update programs, per coordinate.

    With epsilon=1 the reachable set is the lattice {k*step_size : |k| <= k_max}
    (each point hit by |k| same-direction updates); with epsilon=0 any update
    lands on {+/-step_size}. Each program is replayed through the real affine
    scan, and every lattice point is checked to be a fixed point under
    retain steps. Works on the constant-step variants only.
    """
    if cell.variant == "acmru":
        raise ValueError("lattice applies to constant-step variants only")
    if cell.epsilon not in (0.0, 1.0):
        raise ValueError("lattice characterization needs epsilon in {0, 1}")
    step = np.exp(cell.log_step.values)
    ks = range(-k_max, k_max + 1) if cell.epsilon == 1.0 else (-1, 1)
    points = []
    for k in ks:
        n = max(abs(k), 1)
        update = np.ones((n, cell.d))
        if k == 0:
            update[:] = 0.0
        direction = np.sign(k) * np.ones((n, cell.d))
        h = _scan(cell.affine(update, direction, step), np.zeros(cell.d), parallel=False)
        got, want = h[-1], k * step
        if not np.allclose(got, want, rtol=1e-12, atol=1e-300):
            raise AssertionError(f"program for k={k} landed on {got}, wanted {want}")
        # Retain steps must leave the point bit-identical.
        retain = cell.affine(np.zeros((100, cell.d)), np.zeros((100, cell.d)), step)
        held = _scan(retain, got, parallel=True)
        if not np.array_equal(held[-1], got):
            raise AssertionError(f"lattice point for k={k} drifted under retain steps")
        points.append(got)
    return np.stack(points)


# ---------------------------------------------------------------------------
# Fading-memory baselines
# ---------------------------------------------------------------------------

class LruCell:
    """Diagonal complex linear recurrence with input normalization.

    decay = exp(-exp(log_decay) + i*exp(log_phase)) keeps |decay| < 1; the
    input is scaled by sqrt(1 - |decay|^2) so state variance stays flat.
    Output y_t = Re(out_proj h_t) + skip_proj u_t, all real.
    """

    def __init__(self, d: int, m: int, rng: Rng, r_min: float = 0.9,
                 r_max: float = 0.999, max_phase: float = 2.0 * np.pi):
        self.d, self.m = d, m
        gen = rng.generator()
        # Uniform over the annulus r_min <= |decay| <= r_max in area measure.
        r_sq = gen.uniform(r_min ** 2, r_max ** 2, size=d)
        phase = gen.uniform(0.0, max_phase, size=d)
        self.log_decay = ParamTensor.of(np.log(-0.5 * np.log(r_sq)), "cell.log_decay")
        self.log_phase = ParamTensor.of(np.log(phase), "cell.log_phase")
        re = glorot_init(d, m, gen, "re").values
        im = glorot_init(d, m, gen, "im").values
        self.input_proj = ParamTensor.of(re + 1j * im, "cell.input_proj")
        re = glorot_init(d, d, gen, "re").values
        im = glorot_init(d, d, gen, "im").values
        self.output_proj = ParamTensor.of(re + 1j * im, "cell.output_proj")
        self.skip_proj = glorot_init(d, m, gen, "cell.skip_proj")

    def params(self) -> list[ParamTensor]:
        return [self.log_decay, self.log_phase, self.input_proj,
                self.output_proj, self.skip_proj]

    def decay(self) -> np.ndarray:
        return np.exp(-np.exp(self.log_decay.values) + 1j * np.exp(self.log_phase.values))

    def forward(self, u: np.ndarray, h0: np.ndarray | None = None,
                parallel: bool | None = None):
        """u [B, T, m] -> real outputs [B, T, d] plus cache."""
        lam = self.decay()
        gamma = np.sqrt(1.0 - np.abs(lam) ** 2)
        if h0 is None:
            h0 = np.zeros(u.shape[:-2] + (self.d,), COMPLEX)
        driven = u @ self.input_proj.values.T
        elements = AffineElement(np.broadcast_to(lam, driven.shape), gamma * driven)
        states = _scan(elements, h0, parallel)
        y = np.real(states @ self.output_proj.values.T) + u @ self.skip_proj.values.T
        cache = dict(u=u, lam=lam, gamma=gamma, driven=driven,
                     elements=elements, states=states, h0=h0)
        return y, cache

    def backward(self, cache: dict, grad_y: np.ndarray,
                 parallel: bool | None = None) -> np.ndarray:
        u, states = cache["u"], cache["states"]
        gy, uf = _flat(grad_y), _flat(u)
        self.skip_proj.grad += gy.T @ uf
        self.output_proj.grad += gy.T @ np.conj(_flat(states))
        g_u = grad_y @ self.skip_proj.values
        g_states = grad_y @ np.conj(self.output_proj.values)

        grad_a, grad_b, _ = scan_adjoint(cache["elements"], states, cache["h0"],
                                         g_states, parallel)
        lam, gamma = cache["lam"], cache["gamma"]
        g_lam = grad_a.reshape(-1, self.d).sum(0)
        g_driven = gamma * grad_b
        g_gamma = np.real(np.conj(grad_b) * cache["driven"]).reshape(-1, self.d).sum(0)
        gd = _flat(g_driven)
        self.input_proj.grad += gd.T @ uf
        g_u += np.real(g_driven @ np.conj(self.input_proj.values))

        # Both the decay and the input gain depend on log_decay.
        rate = np.exp(self.log_decay.values)
        r_sq = np.abs(lam) ** 2
        d_gamma_d_log = r_sq * rate / gamma
        self.log_decay.grad += (np.real(np.conj(g_lam) * lam) * -rate
                                + g_gamma * d_gamma_d_log)
        self.log_phase.grad += (np.real(np.conj(g_lam) * 1j * lam)
                                * np.exp(self.log_phase.values))
        return g_u


class MinGruCell:
    """Sigmoid-gated linear recurrence: a = 1 - gate, b = gate * candidate."""

    def __init__(self, d: int, m: int, rng: Rng):
        self.d, self.m = d, m
        gen = rng.generator()
        self.w_gate = glorot_init(d, m, gen, "cell.w_gate")
        self.b_gate = ParamTensor.zeros(d, "cell.b_gate")
        self.w_cand = glorot_init(d, m, gen, "cell.w_cand")
        self.b_cand = ParamTensor.zeros(d, "cell.b_cand")

    def params(self) -> list[ParamTensor]:
        return [self.w_gate, self.b_gate, self.w_cand, self.b_cand]

    def forward(self, u: np.ndarray, h0: np.ndarray | None = None,
                parallel: bool | None = None):
        """u [B, T, m] -> states [B, T, d] plus cache."""
        if h0 is None:
            h0 = np.zeros(u.shape[:-2] + (self.d,), REAL)
        gate = 1.0 / (1.0 + np.exp(-(u @ self.w_gate.values.T + self.b_gate.values)))
        cand = u @ self.w_cand.values.T + self.b_cand.values
        elements = AffineElement(1.0 - gate, gate * cand)
        states = _scan(elements, h0, parallel)
        cache = dict(u=u, gate=gate, cand=cand, elements=elements,
                     states=states, h0=h0)
        return states, cache

    def backward(self, cache: dict, grad_states: np.ndarray,
                 parallel: bool | None = None) -> np.ndarray:
        u, gate, cand = cache["u"], cache["gate"], cache["cand"]
        grad_a, grad_b, _ = scan_adjoint(cache["elements"], cache["states"],
                                         cache["h0"], grad_states, parallel)
        g_gate = -grad_a + grad_b * cand
        g_cand = grad_b * gate
        g_gate_pre = g_gate * gate * (1.0 - gate)
        gp, gc, uf = _flat(g_gate_pre), _flat(g_cand), _flat(u)
        self.w_gate.grad += gp.T @ uf
        self.b_gate.grad += gp.sum(0)
        self.w_cand.grad += gc.T @ uf
        self.b_cand.grad += gc.sum(0)
        return g_gate_pre @ self.w_gate.values + g_cand @ self.w_cand.values


def make_cell(kind: str, d: int, m: int, rng: Rng, epsilon: float = 1.0,
              surrogate_sharpness: float = 1.0):
    """Factory over the cell zoo; `kind` is one of CELL_KINDS."""
    if kind in ("bmru", "cmru", "acmru"):
        return CmruCell(d, m, rng, epsilon=epsilon, variant=kind,
                        surrogate_sharpness=surrogate_sharpness)
    if kind == "lru":
        return LruCell(d, m, rng)
    if kind == "mingru":
        return MinGruCell(d, m, rng)
    raise ValueError(f"unknown cell kind {kind!r}")
