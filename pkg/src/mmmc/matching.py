"""Projection of an ensemble onto a prescribed macroscopic state.

The matcher perturbs every path along the moment gradients evaluated at the
input ensemble,

    y_j'  =  y_j + sum_l lambda_l g_lj,

and finds the multipliers lambda by Newton iteration on the L constraint
equations "restriction of the perturbed ensemble equals the target".  This is
the minimal-perturbation construction: the displacement lies in the span of
the (fixed) constraint gradients, and an ensemble whose restriction already
equals the target is returned unchanged with lambda = 0.

Residual components are scaled relative to the requested moment values (the
magnitudes grow quickly with the moment order), with an absolute fallback for
near-zero targets.  Failures are reported as data, not exceptions: a failed
match is the signal consumed by the adaptive macro-step controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Ensemble, ModelSpec, retry_paths
from .moments import MacroState, MomentSpec, spec_values

ABS_TARGET_FLOOR = 1e-12

FAIL_NEWTON = "newton-diverged"
FAIL_SINGULAR = "singular-jacobian"
FAIL_INADMISSIBLE = "fene-inadmissible"


@dataclass(frozen=True)
class MatchConfig:
    tol: float = 1e-9
    max_iter: int = 50
    max_halvings: int = 20
    jacobian_cond_cap: float = 1e12
    fene_retry_cap: int = 20

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class MatchOutcome:
    """Result of one matching attempt.

    On success ``ensemble`` satisfies the constraints to the configured
    relative tolerance per component; otherwise ``reason`` names the failure.
    """

    ok: bool
    ensemble: Optional[Ensemble]
    iterations: int
    residual: float
    multipliers: np.ndarray
    reason: Optional[str] = None
    retries: int = 0
    micro_states: Optional[np.ndarray] = None

    def csv_fields(self) -> list[str]:
        lam = [repr(float(v)) for v in np.atleast_1d(self.multipliers)]
        return [str(int(self.ok)), self.reason or "",
                str(self.iterations), repr(float(self.residual))] + lam


def _target_scales(target: np.ndarray) -> np.ndarray:
    return np.maximum(np.abs(target), ABS_TARGET_FLOOR)


def _gradient_matrix(x: np.ndarray, spec: MomentSpec,
                     target: np.ndarray) -> np.ndarray:
    """Fixed perturbation directions, one column per state variable.

    Raw moments differentiate directly.  For centered specs the centering of
    the gradient is frozen: at the target mean when the mean is one of the
    constraints (it is then known a priori, which decouples the mean
    equation), and at the input ensemble's own mean otherwise.
    """
    J = x.size
    orders = spec.orders()
    G = np.empty((J, spec.L))
    if spec.kind == "standard":
        for i, o in enumerate(orders):
            G[:, i] = (o / J) * x ** (o - 1)
        return G
    if 1 in orders:
        center = float(target[orders.index(1)])
    else:
        center = float(np.mean(x))
    d = x - center
    for i, o in enumerate(orders):
        if o == 1:
            G[:, i] = 1.0 / J
        else:
            G[:, i] = (o / J) * d ** (o - 1)
    return G


def _jacobian(y: np.ndarray, spec: MomentSpec, G: np.ndarray) -> np.ndarray:
    """Analytic Jacobian d(restriction)/d(lambda) of the composed map."""
    J = y.size
    orders = spec.orders()
    A = np.empty((spec.L, spec.L))
    if spec.kind == "standard":
        p = np.ones_like(y)
        pow_cache = {0: p}
        for o in range(1, max(orders)):
            p = p * y
            pow_cache[o] = p
        for i, o in enumerate(orders):
            A[i, :] = (o / J) * (pow_cache[o - 1] @ G)
        return A
    mean = np.mean(y)
    d = y - mean
    col_means = np.mean(G, axis=0)
    p = np.ones_like(d)
    pow_cache = {0: p}
    for o in range(1, max(orders)):
        p = p * d
        pow_cache[o] = p
    for i, o in enumerate(orders):
        if o == 1:
            A[i, :] = col_means
        else:
            pk = pow_cache[o - 1]
            # d/dlam of mean((y'-mean')^o): the centering moves with lambda
            A[i, :] = (o / J) * (pk @ G) - o * np.mean(pk) * col_means
    return A


def _equilibrated_cond(A: np.ndarray) -> float:
    """Condition number after row/column norm equilibration.

    Raw condition numbers of moment Jacobians mostly measure the scale spread
    across moment orders, which an LU solve handles exactly; equilibration
    exposes genuine (Hankel-type) degeneracy instead.
    """
    rn = np.linalg.norm(A, axis=1)
    rn[rn == 0.0] = 1.0
    B = A / rn[:, None]
    cn = np.linalg.norm(B, axis=0)
    cn[cn == 0.0] = 1.0
    B = B / cn[None, :]
    try:
        return float(np.linalg.cond(B))
    except np.linalg.LinAlgError:
        return math.inf


def match_ensemble(ens: Ensemble, target: MacroState,
                   cfg: MatchConfig = MatchConfig()) -> MatchOutcome:
    """Match an ensemble onto a target macroscopic state.

    Newton iteration on the multipliers, with step halving on residual
    increase.  Divergence and a (rank-)degenerate Jacobian are reported via
    the outcome, never raised.
    """
    spec = target.spec
    x = ens.scalar_states()
    if x.size < spec.L:
        raise ValueError("ensemble smaller than the number of constraints")
    tvals = target.values
    scales = _target_scales(tvals)
    lam = np.zeros(spec.L)

    def residual(y):
        return (spec_values(y, spec) - tvals) / scales

    r = residual(x)
    rnorm = float(np.max(np.abs(r)))
    if rnorm < cfg.tol:
        out_ens = Ensemble(states=ens.states, time=target.time,
                           lineage=ens.lineage, anchor_time=target.time,
                           anchor_step=ens.lineage.step)
        return MatchOutcome(True, out_ens, 0, rnorm, lam)

    G = _gradient_matrix(x, spec, tvals)
    y = x
    for it in range(1, cfg.max_iter + 1):
        A = _jacobian(y, spec, G) / scales[:, None]
        if not np.all(np.isfinite(A)):
            return MatchOutcome(False, None, it, rnorm, lam,
                                reason=FAIL_SINGULAR)
        if _equilibrated_cond(A) > cfg.jacobian_cond_cap:
            return MatchOutcome(False, None, it, rnorm, lam,
                                reason=FAIL_SINGULAR)
        try:
            delta = np.linalg.solve(A, -r)
        except np.linalg.LinAlgError:
            return MatchOutcome(False, None, it, rnorm, lam,
                                reason=FAIL_SINGULAR)
        step = 1.0
        for _ in range(cfg.max_halvings + 1):
            lam_try = lam + step * delta
            y_try = x + G @ lam_try
            r_try = residual(y_try)
            n_try = float(np.max(np.abs(r_try)))
            if math.isfinite(n_try) and n_try < rnorm:
                break
            step *= 0.5
        lam, y, r, rnorm = lam_try, y_try, r_try, n_try
        if not math.isfinite(rnorm):
            return MatchOutcome(False, None, it, math.inf, lam,
                                reason=FAIL_NEWTON)
        if rnorm < cfg.tol:
            out_ens = Ensemble(states=y[:, None], time=target.time,
                               lineage=ens.lineage, anchor_time=target.time,
                               anchor_step=ens.lineage.step)
            return MatchOutcome(True, out_ens, it, rnorm, lam)
    return MatchOutcome(False, None, cfg.max_iter, rnorm, lam,
                        reason=FAIL_NEWTON)


@dataclass(frozen=True)
class AffineMap:
    """z -> scale * z + offset"""

    scale: float
    offset: float

    def __call__(self, z):
        return self.scale * np.asarray(z) + self.offset


def match_normal_closed_form(mu: float, sigma2: float, target) -> AffineMap:
    """Closed-form matcher for mean/variance targets on Gaussian data.

    Returns the positive-scale affine map z -> sqrt(s2*/s2) (z - mu) + mu*,
    the branch of minimal expected squared displacement.  Applied to any
    sample with empirical moments (mu, sigma2) it reproduces the target
    moments exactly up to rounding.
    """
    mu_t, sigma2_t = (float(target[0]), float(target[1]))
    if sigma2 <= 0 or sigma2_t <= 0:
        raise ValueError("variances must be positive")
    scale = math.sqrt(sigma2_t / sigma2)
    return AffineMap(scale=scale, offset=mu_t - scale * mu)


def _raw_from_state(state: MacroState) -> np.ndarray:
    """Raw moments m_0..m_M implied by a standard or centralized state."""
    vals = state.values
    if state.spec.kind == "standard":
        return np.concatenate(([1.0], vals))
    if state.spec.kind != "centralized":
        raise ValueError("solvability check needs standard or centralized "
                         "moments")
    mu = vals[0]
    M = len(vals)
    central = np.empty(M + 1)
    central[0] = 1.0
    central[1] = 0.0
    central[2:] = vals[1:]
    raw = np.empty(M + 1)
    for n in range(M + 1):
        acc = 0.0
        for j in range(n + 1):
            acc += math.comb(n, j) * central[j] * mu ** (n - j)
        raw[n] = acc
    return raw


def hankel_solvability(state: MacroState, L: int = None):
    """Moment-matrix determinant governing local uniqueness of the matching.

    For raw-moment constraints the matrix is the Hankel matrix
    ``(m_{i+k-2})_{i,k=1..L}``; for centralized constraints the shifted form
    ``(m_{i+k-2} - m_{i-1} m_{k-1})_{i,k=2..L}``.  Returns ``(det, flag)``
    where the flag tests the determinant against a relative threshold of the
    matrix scale (Hadamard bound).  The state must carry raw moments up to
    order 2L - 2 (convertible from centralized values).
    """
    raw = _raw_from_state(state)
    M = len(raw) - 1
    if L is None:
        L = M // 2 + 1
    if 2 * L - 2 > M:
        raise ValueError(f"need moments up to order {2 * L - 2}, have {M}")
    if state.spec.kind == "standard":
        H = np.array([[raw[i + k - 2] for k in range(1, L + 1)]
                      for i in range(1, L + 1)])
    else:
        H = np.array([[raw[i + k - 2] - raw[i - 1] * raw[k - 1]
                       for k in range(2, L + 1)]
                      for i in range(2, L + 1)])
    if H.size == 0:
        return 1.0, True
    det = float(np.linalg.det(H))
    hadamard = float(np.prod(np.linalg.norm(H, axis=1)))
    scale = max(hadamard, ABS_TARGET_FLOOR)
    return det, bool(abs(det) > 1e-12 * scale)


@dataclass
class FeneStepContext:
    """What is needed to replay the last microscopic step of a burst."""

    model: ModelSpec
    t_prev: float
    dt: float
    prev_states: np.ndarray
    rounds: np.ndarray
    step_index: int


def match_fene(ens: Ensemble, target: MacroState, step_ctx: FeneStepContext,
               cfg: MatchConfig = MatchConfig()) -> MatchOutcome:
    """Matching with the combined evolution/matching accept-reject rule.

    If matched states land outside the admissible region, the last
    microscopic move of exactly those paths is redrawn (resuming their
    redraw streams), the paths are re-evolved one step and the matching is
    retried, up to ``cfg.fene_retry_cap`` times per path.
    """
    model = step_ctx.model
    if model.admissible is None:
        raise ValueError("match_fene needs a model with an admissible region")
    cur = Ensemble(states=ens.states, time=ens.time, lineage=ens.lineage,
                   anchor_time=ens.anchor_time, anchor_step=ens.anchor_step)
    rounds = np.asarray(step_ctx.rounds, dtype=np.int64).copy()
    attempts = np.zeros(ens.size, dtype=np.int64)
    retries = 0
    while True:
        out = match_ensemble(cur, target, cfg)
        if not out.ok:
            out.retries = retries
            out.micro_states = cur.states
            return out
        good = model.admissible(out.ensemble.states)
        if np.all(good):
            out.retries = retries
            out.micro_states = cur.states
            return out
        idx = np.flatnonzero(~good)
        attempts[idx] += 1
        if np.any(attempts[idx] > cfg.fene_retry_cap):
            return MatchOutcome(False, None, out.iterations, out.residual,
                                out.multipliers, reason=FAIL_INADMISSIBLE,
                                retries=retries, micro_states=cur.states)
        retries += 1
        new_states, new_rounds = retry_paths(
            model, step_ctx.t_prev, step_ctx.prev_states, idx,
            cur.lineage.key(), step_ctx.step_index, rounds[idx],
            step_ctx.dt, model.retry_cap)
        states = cur.states.copy()
        states[idx] = new_states
        rounds[idx] = new_rounds
        cur = Ensemble(states=states, time=cur.time, lineage=cur.lineage,
                       anchor_time=cur.anchor_time,
                       anchor_step=cur.anchor_step)
