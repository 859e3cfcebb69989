"""SDE models and explicit Euler-Maruyama ensemble propagation.

The engine advances ensembles of SDE realizations

    dX = a(t, X) dt + b(t, X) dW,        X in R^d, W in R^m,

with the explicit Euler-Maruyama scheme in the Ito interpretation.  Models
with a bounded admissible region (the finitely extensible dumbbell) are
stepped with an accept/reject rule: a trial move that leaves the admissible
region is redrawn until acceptance, each path independently.

States are stored as ``(J, d)`` float arrays.  Drift and diffusion callables
must broadcast over the leading ensemble axis; all built-in models do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import beta as _beta_fn

from .rng import (PHASE_EVOLVE, PHASE_INIT, SeedLineage, block_generator,
                  normal_block)

DEFAULT_STEP_RETRY_CAP = 10_000


class EngineError(Exception):
    pass


class StepRetryError(EngineError):
    """Accept/reject redraw cap exceeded; the inner step is too large."""

    def __init__(self, step_index, n_stuck, cap):
        self.step_index = step_index
        self.n_stuck = n_stuck
        self.cap = cap
        super().__init__(
            f"accept/reject cap {cap} exceeded at inner step {step_index} "
            f"for {n_stuck} path(s)")


@dataclass
class ModelSpec:
    """SDE definition: drift a(t,x), diffusion b(t,x) and admissible region.

    ``drift(t, x)`` maps ``(..., d)`` states to ``(..., d)`` vectors,
    ``diffusion(t, x)`` to ``(..., d, m)`` matrices (a plain ``(d, m)`` return
    is treated as state independent).  ``admissible``, when present, maps
    states to a boolean mask and switches stepping to accept/reject mode.
    """

    dimension: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    wiener_dim: int
    admissible: Optional[Callable[[np.ndarray], np.ndarray]] = None
    retry_cap: int = DEFAULT_STEP_RETRY_CAP


@dataclass(frozen=True)
class FeneParams:
    """Finitely extensible dumbbell parameters.

    gamma   squared maximal spring extension (dimensionless)
    we      Weissenberg number
    kappa   velocity gradient, a callable of time (scalar in 1-D)
    epsilon polymer-to-total viscosity ratio, used by the stress observable
    """

    gamma: float
    we: float
    kappa: Callable[[float], float]
    epsilon: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.we <= 0:
            raise ValueError("we must be positive")


def fene_force(x: np.ndarray, gamma: float) -> np.ndarray:
    """Spring force x / (1 - |x|^2 / gamma); diverges at the extension limit."""
    r2 = np.sum(np.square(x), axis=-1, keepdims=True)
    denom = 1.0 - r2 / gamma
    if np.any(denom <= 0.0):
        raise EngineError("state at or beyond the maximal extension")
    return x / denom


def fene_accept_bound(gamma: float, dt: float) -> float:
    """Accept/reject radius sqrt((1 - sqrt(dt)) * gamma) for one trial step."""
    return math.sqrt((1.0 - math.sqrt(dt)) * gamma)


def fene_model(params: FeneParams, dt: float, dimension: int = 1) -> ModelSpec:
    """Dumbbell model with the accept/reject bound baked in for step size dt."""
    gamma = params.gamma
    inv_2we = 1.0 / (2.0 * params.we)
    kappa = params.kappa
    diff_const = np.eye(dimension) / math.sqrt(params.we)
    bound2 = fene_accept_bound(gamma, dt) ** 2

    def drift(t, x):
        return kappa(t) * x - inv_2we * fene_force(x, gamma)

    def diffusion(t, x):
        return diff_const

    def admissible(x):
        return np.sum(np.square(x), axis=-1) < bound2

    return ModelSpec(dimension=dimension, drift=drift, diffusion=diffusion,
                     wiener_dim=dimension, admissible=admissible)


def linear_model(a1, a2, b) -> ModelSpec:
    """Scalar narrow-sense linear model dX = (a1(t) X + a2(t)) dt + b(t) dW.

    Coefficients may be constants or callables of time.
    """
    a1f = a1 if callable(a1) else (lambda t, _c=float(a1): _c)
    a2f = a2 if callable(a2) else (lambda t, _c=float(a2): _c)
    bf = b if callable(b) else (lambda t, _c=float(b): _c)

    def drift(t, x):
        return a1f(t) * x + a2f(t)

    def diffusion(t, x):
        return np.array([[bf(t)]])

    return ModelSpec(dimension=1, drift=drift, diffusion=diffusion,
                     wiener_dim=1)


@dataclass
class Ensemble:
    """J particle states at a common time, plus their seed lineage.

    ``anchor_time``/``anchor_step`` pin the last time the clock was set by
    something other than plain stepping; inner times are computed as
    ``anchor_time + (step - anchor_step) * dt`` so that a run assembled from
    many short bursts reproduces a single long burst bit for bit.
    """

    states: np.ndarray
    time: float
    lineage: SeedLineage
    anchor_time: float = None
    anchor_step: int = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.anchor_time is None:
            self.anchor_time = self.time
        if self.anchor_step is None:
            self.anchor_step = self.lineage.step

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def dimension(self) -> int:
        return self.states.shape[1]

    def scalar_states(self) -> np.ndarray:
        if self.dimension != 1:
            raise EngineError("operation defined for scalar states only")
        return self.states[:, 0]


def em_step(model: ModelSpec, t: float, y: np.ndarray, dw: np.ndarray,
            dt: float) -> np.ndarray:
    """One explicit Euler-Maruyama step y + a(t,y) dt + b(t,y) dw.

    ``dw`` carries the Brownian increments (distributed N(0, dt I)); the step
    is deterministic given its inputs.  Works on a single state ``(d,)`` or a
    stack ``(J, d)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = np.asarray(y, dtype=float)
    dw = np.asarray(dw, dtype=float)
    a = model.drift(t, y)
    b = model.diffusion(t, y)
    if b.ndim == 2:
        noise = dw @ np.transpose(b)
    else:
        noise = np.einsum("...ij,...j->...i", b, dw)
    return y + a * dt + noise


def _draw_increments(key, step_index, rnd, shape, dt):
    return normal_block(key, PHASE_EVOLVE, step_index, rnd, shape) * math.sqrt(dt)


def _ar_step(model: ModelSpec, t: float, y: np.ndarray, key, step_index: int,
             dt: float, retry_cap: int):
    """Accept/reject step for all paths; returns (new states, rounds used).

    Rejected paths redraw their whole increment from the next redraw round of
    the same inner step until the trial lands in the admissible region.
    """
    nj, _ = y.shape
    m = model.wiener_dim
    a = model.drift(t, y)
    b = model.diffusion(t, y)
    if b.ndim != 2:
        raise EngineError("accept/reject stepping assumes state-independent "
                          "diffusion")
    bt = np.transpose(b)
    dw = _draw_increments(key, step_index, 0, (nj, m), dt)
    ynew = y + a * dt + dw @ bt
    rounds = np.zeros(nj, dtype=np.int64)
    bad = ~model.admissible(ynew)
    rnd = 0
    while np.any(bad):
        rnd += 1
        if rnd > retry_cap:
            raise StepRetryError(step_index, int(np.count_nonzero(bad)),
                                 retry_cap)
        idx = np.flatnonzero(bad)
        dw = _draw_increments(key, step_index, rnd, (nj, m), dt)
        trial = y[idx] + a[idx] * dt + dw[idx] @ bt
        ynew[idx] = trial
        rounds[idx] = rnd
        bad[idx] = ~model.admissible(trial)
    return ynew, rounds


def retry_paths(model: ModelSpec, t: float, y_prev: np.ndarray,
                idx: np.ndarray, key, step_index: int,
                start_rounds: np.ndarray, dt: float, retry_cap: int):
    """Redraw the inner step for the selected paths, resuming their streams.

    Path ``idx[i]`` discards its previously accepted move and retries from
    redraw round ``start_rounds[i] + 1`` onward, with the usual accept/reject
    rule.  Returns (new states for idx, last round used per path).
    """
    nj = y_prev.shape[0]
    m = model.wiener_dim
    a = model.drift(t, y_prev[idx])
    b = model.diffusion(t, y_prev[idx])
    bt = np.transpose(b)
    pending = np.arange(len(idx))
    rounds = np.asarray(start_rounds, dtype=np.int64).copy()
    out = np.empty_like(y_prev[idx])
    while pending.size:
        rounds[pending] += 1
        if np.any(rounds[pending] > retry_cap):
            raise StepRetryError(step_index, pending.size, retry_cap)
        # paths may sit at different rounds; draw each needed round once
        for rnd in np.unique(rounds[pending]):
            sel = pending[rounds[pending] == rnd]
            dw = _draw_increments(key, step_index, int(rnd), (nj, m), dt)
            out[sel] = y_prev[idx[sel]] + a[sel] * dt + dw[idx[sel]] @ bt
        ok = model.admissible(out[pending])
        pending = pending[~ok]
    return out, rounds


@dataclass
class BurstResult:
    """Outcome of K inner steps, with what matching needs to replay the last."""

    ensemble: Ensemble
    times: np.ndarray
    records: list = field(default_factory=list)
    prev_states: np.ndarray = None
    last_rounds: np.ndarray = None
    last_step_index: int = None
    start_time: float = 0.0


def run_burst(model: ModelSpec, ens: Ensemble, K: int, dt: float,
              on_step: Optional[Callable] = None) -> BurstResult:
    """Advance every path K inner steps of size dt.

    ``on_step(k, t, states)`` is invoked for k = 0..K (k = 0 sees the initial
    state).  Inner times are ``anchor_time + (global step - anchor_step) * dt``.
    """
    if K < 1:
        raise ValueError("burst length K must be >= 1")
    key = ens.lineage.key()
    y = ens.states
    base = ens.lineage.step
    offset0 = base - ens.anchor_step
    records = []

    def t_at(k):
        return ens.anchor_time + (offset0 + k) * dt

    if on_step is not None:
        records.append(on_step(0, ens.time, y))
    prev = y
    rounds = np.zeros(ens.size, dtype=np.int64)
    for k in range(K):
        t_k = t_at(k)
        prev = y
        if model.admissible is not None:
            y, rounds = _ar_step(model, t_k, y, key, base + k, dt,
                                 model.retry_cap)
        else:
            dw = _draw_increments(key, base + k, 0, (ens.size, model.wiener_dim),
                                  dt)
            y = em_step(model, t_k, y, dw, dt)
            rounds = np.zeros(ens.size, dtype=np.int64)
        if on_step is not None:
            records.append(on_step(k + 1, t_at(k + 1), y))
    final = Ensemble(states=y, time=t_at(K), lineage=ens.lineage.advanced(K),
                     anchor_time=ens.anchor_time, anchor_step=ens.anchor_step)
    times = np.array([t_at(k) for k in range(K + 1)])
    return BurstResult(ensemble=final, times=times, records=records,
                       prev_states=prev, last_rounds=rounds,
                       last_step_index=base + K - 1, start_time=ens.time)


def evolve_ensemble(model: ModelSpec, ens: Ensemble, K: int, dt: float,
                    record: Optional[Callable] = None):
    """K inner steps; returns the final ensemble and per-step records.

    With ``record=None`` the intermediate snapshots are returned as state
    copies ``(t, states)``; otherwise ``record(t, states)`` decides what is
    kept (e.g. a restriction).  Rerunning with identical inputs reproduces
    the result bit for bit.
    """
    if record is None:
        def on_step(k, t, states):
            return (t, states.copy())
    else:
        def on_step(k, t, states):
            return record(t, states)
    burst = run_burst(model, ens, K, dt, on_step=on_step)
    return burst.ensemble, burst.records[1:]


def fene_step_ar(params: FeneParams, t: float, ens: Ensemble,
                 dt: float, retry_cap: int = DEFAULT_STEP_RETRY_CAP):
    """One accept/reject dumbbell step for a whole ensemble.

    Returns the stepped ensemble; every returned state satisfies
    ``|x| < sqrt((1 - sqrt(dt)) * gamma)``.
    """
    model = fene_model(params, dt, dimension=ens.dimension)
    model.retry_cap = retry_cap
    y, _ = _ar_step(model, t, ens.states, ens.lineage.key(), ens.lineage.step,
                    dt, retry_cap)
    return Ensemble(states=y, time=t + dt, lineage=ens.lineage.advanced(1),
                    anchor_time=ens.anchor_time, anchor_step=ens.anchor_step)


def stationary_density(params: FeneParams):
    """Unnormalized zero-flow stationary density (1 - x^2/gamma)^(gamma/2)."""
    gamma = params.gamma

    def phi(x):
        inside = 1.0 - np.square(x) / gamma
        return np.where(inside > 0.0, np.power(np.clip(inside, 0.0, None),
                                               gamma / 2.0), 0.0)

    return phi


def sample_fene_equilibrium(params: FeneParams, J: int,
                            lineage: SeedLineage, time: float = 0.0) -> Ensemble:
    """J i.i.d. draws from the zero-flow stationary law, by rejection.

    The envelope is uniform on (-sqrt(gamma), sqrt(gamma)) scaled by the
    density mode at x = 0, so accepted points follow the target law exactly.
    """
    gamma = params.gamma
    half = math.sqrt(gamma)
    phi = stationary_density(params)
    # expected acceptance rate B(1/2, gamma/2 + 1) / 2 sizes the batches
    rate = _beta_fn(0.5, gamma / 2.0 + 1.0) / 2.0
    key = lineage.key()
    out = np.empty(J)
    have = 0
    batch = 0
    while have < J:
        need = J - have
        n = max(int(need / rate * 1.5) + 64, 256)
        g = block_generator(key, PHASE_INIT, batch)
        x = g.uniform(-half, half, size=n)
        u = g.random(size=n)
        acc = x[u <= phi(x)]
        take = min(acc.size, need)
        out[have:have + take] = acc[:take]
        have += take
        batch += 1
    return Ensemble(states=out[:, None], time=time, lineage=lineage)
