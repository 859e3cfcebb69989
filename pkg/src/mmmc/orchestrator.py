"""End-to-end accelerated simulation loop.

One macroscopic step is: (i) a burst of K inner steps recording the
restriction and the observable at every inner time, (ii) extrapolation of the
macroscopic state over the macro step, (iii) matching of the burst-end
ensemble onto the extrapolated state.  A matching failure rejects the macro
step and retries with

    dt <- max(shrink * dt, K * dt_inner),

while a success proposes

    dt <- min(grow * dt, dt_max)

for the next step.  At dt = K * dt_inner the matching is the identity and the
step reduces to plain microscopic simulation, bit for bit.

Multistep extrapolation needs end points of earlier macro steps, so a run
starts with ``pe`` warm-up steps (purely microscopic by default) and the end
point history is flushed whenever the macro step changes size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import matching as mt
from .config import ExperimentConfig, config_hash, config_to_ini, kappa_profile
from .engine import (Ensemble, FeneParams, ModelSpec, fene_model, linear_model,
                     run_burst, sample_fene_equilibrium)
from .extrapolation import (MULTISTEP, PROJECTIVE_CHORD, ExtrapConfig,
                            MacroHistory, lagrange_coeffs,
                            projective_extrapolate)
from .matching import FeneStepContext, MatchConfig, MatchOutcome
from .moments import MacroState, MomentSpec, spec_values, stress_kramers
from .rng import PHASE_INIT, SeedLineage, block_generator

REL_EPS = 1e-12


class SimulationError(Exception):
    """Unrecoverable failure; carries what is needed to reproduce it."""

    def __init__(self, msg, *, seed=None, stream=None, time=None, detail=None):
        self.seed = seed
        self.stream = stream
        self.time = time
        self.detail = detail
        super().__init__(f"{msg} (seed={seed}, stream={stream}, t={time})")


def shrink_step(dt: float, shrink: float, floor: float) -> float:
    """Rejected macro step: dt <- max(shrink * dt, floor)."""
    return max(shrink * dt, floor)


def grow_step(dt: float, grow: float, dt_max: float) -> float:
    """Accepted macro step: dt <- min(grow * dt, dt_max)."""
    return min(grow * dt, dt_max)


@dataclass
class StepPolicy:
    """Macroscopic step controller state."""

    dt_macro: float
    dt_max: float
    K: int
    dt_inner: float
    shrink: float = 0.2
    grow: float = 1.2
    adaptive: bool = True

    def __post_init__(self):
        if not 0 < self.shrink < 1 < self.grow:
            raise ValueError("need shrink < 1 < grow")
        if self.dt_max < self.floor:
            raise ValueError("dt_max below the minimal macro step K*dt_inner")
        self.dt_macro = min(max(self.dt_macro, self.floor), self.dt_max)

    @property
    def floor(self) -> float:
        return self.K * self.dt_inner

    def is_identity(self, dt: float = None) -> bool:
        dt = self.dt_macro if dt is None else dt
        return dt <= self.floor * (1.0 + REL_EPS)

    def after_failure(self):
        self.dt_macro = shrink_step(self.dt_macro, self.shrink, self.floor)

    def after_success(self):
        if self.adaptive:
            self.dt_macro = grow_step(self.dt_macro, self.grow, self.dt_max)


@dataclass
class StepRow:
    """One accepted macro step (or the initial state) in the trajectory log."""

    time: float
    macro: np.ndarray
    qoi: float
    dt_used: float
    outcome: Optional[MatchOutcome]
    rejections: int = 0
    inner_times: list = field(default_factory=list)
    inner_qoi: list = field(default_factory=list)
    n_micro: int = 0
    burst_end: Optional[tuple] = None


@dataclass
class TrajectoryRecord:
    """Per-macro-step log of an accelerated run."""

    spec: MomentSpec
    seed: int
    stream: int
    config_snapshot: str = ""
    rows: list = field(default_factory=list)
    n_micro_total: int = 0
    warmup_steps: int = 0
    notes: dict = field(default_factory=dict)

    def add(self, row: StepRow):
        self.rows.append(row)
        self.n_micro_total += row.n_micro

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.rows])

    @property
    def macro_values(self) -> np.ndarray:
        return np.array([r.macro for r in self.rows])

    @property
    def qoi_values(self) -> np.ndarray:
        return np.array([r.qoi for r in self.rows])

    @property
    def rejections(self) -> np.ndarray:
        return np.array([r.rejections for r in self.rows])

    @property
    def dt_used(self) -> np.ndarray:
        return np.array([r.dt_used for r in self.rows])

    def inner_series(self):
        ts, qs = [], []
        for r in self.rows:
            ts.extend(r.inner_times)
            qs.extend(r.inner_qoi)
        return np.array(ts), np.array(qs)

    def speedup_factor(self) -> float:
        """Macroscopic time covered per unit of microscopic time simulated."""
        dt_inner = self.notes.get("dt_inner")
        if not self.rows or dt_inner is None or self.n_micro_total == 0:
            return 1.0
        span = self.rows[-1].time - self.rows[0].time
        return span / (self.n_micro_total * dt_inner)

    def csv_text(self) -> str:
        L = self.spec.L
        head = [f"# config_hash: {self.notes.get('config_hash', '')}",
                f"# seed: {self.seed}",
                f"# stream: {self.stream}",
                f"# moments: {self.spec.label()}",
                "# residual norm: max over components, relative to the target"]
        cols = (["time"] + [f"U_{l}" for l in range(1, L + 1)] +
                ["qoi", "dt_macro", "match_ok", "match_reason", "match_iters",
                 "match_residual", "rejections"] +
                [f"lambda_{l}" for l in range(1, L + 1)])
        lines = head + [",".join(cols)]
        for r in self.rows:
            out = r.outcome
            if out is None:
                ok, reason, iters, resid = 1, "", 0, 0.0
                lams = [0.0] * L
            else:
                ok = int(out.ok)
                reason = out.reason or ""
                iters = out.iterations
                resid = out.residual
                lams = list(np.atleast_1d(out.multipliers))
            vals = ([repr(float(r.time))] +
                    [repr(float(v)) for v in r.macro] +
                    [repr(float(r.qoi)), repr(float(r.dt_used)), str(ok),
                     reason, str(iters), repr(float(resid)),
                     str(r.rejections)] +
                    [repr(float(v)) for v in lams])
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())


def build_fene_params(cfg: ExperimentConfig) -> FeneParams:
    return FeneParams(gamma=cfg.gamma, we=cfg.we,
                      kappa=kappa_profile(cfg.kappa), epsilon=cfg.epsilon)


def build_model(cfg: ExperimentConfig) -> ModelSpec:
    if cfg.kind == "linear":
        return linear_model(cfg.a1, cfg.a2, cfg.b)
    return fene_model(build_fene_params(cfg), cfg.dt_inner)


def build_qoi(cfg: ExperimentConfig) -> Callable[[np.ndarray], float]:
    """Observable evaluated on raw state arrays; reduced in fixed order."""
    name = cfg.qoi
    if name == "auto":
        name = "stress" if cfg.kind == "fene" else "x2"
    if name == "x2":
        return lambda states: float(np.mean(np.square(states[:, 0])))
    if name == "mean":
        return lambda states: float(np.mean(states[:, 0]))
    if name == "stress":
        params = build_fene_params(cfg)
        return lambda states: float(stress_kramers(states, params))
    raise ValueError(f"unknown qoi {name!r}")


def initial_ensemble(cfg: ExperimentConfig, lineage: SeedLineage) -> Ensemble:
    if cfg.kind == "fene":
        params = build_fene_params(cfg)
        return sample_fene_equilibrium(params, cfg.J, lineage, time=cfg.t0)
    g = block_generator(lineage.key(), PHASE_INIT, 0)
    x = cfg.mu0 + math.sqrt(cfg.var0) * g.standard_normal(cfg.J)
    return Ensemble(states=x[:, None], time=cfg.t0, lineage=lineage)


def macro_spec(cfg: ExperimentConfig) -> MomentSpec:
    return MomentSpec(cfg.moments, cfg.L, include_mean=cfg.include_mean)


def extrap_config(cfg: ExperimentConfig) -> ExtrapConfig:
    return ExtrapConfig(method=cfg.method, pe=cfg.pe, K=cfg.K,
                        dt_inner=cfg.dt_inner, K1=cfg.K1)


def _record_burst(model, ens, K, dt, spec, qoi):
    """Run one burst, recording restriction values and the observable."""
    inner_t, inner_u, inner_q = [], [], []

    def on_step(k, t, states):
        inner_t.append(t)
        inner_u.append(spec_values(states[:, 0], spec))
        inner_q.append(qoi(states) if qoi is not None else math.nan)
        return None

    burst = run_burst(model, ens, K, dt, on_step=on_step)
    return burst, np.array(inner_t), np.array(inner_u), np.array(inner_q)


def _identity_outcome(L: int) -> MatchOutcome:
    return MatchOutcome(True, None, 0, 0.0, np.zeros(L))


def _extrapolation_target(extrap, spec, start_time, inner_t, inner_u,
                          history, dt_try) -> MacroState:
    """Extrapolated macro state at start_time + dt_try."""
    if extrap.method == MULTISTEP:
        if history is None or len(history) < extrap.pe:
            raise SimulationError(
                "multistep extrapolation without history; the starting "
                "procedure must be used", time=start_time)
        times = np.array([h[0] for h in history[-extrap.pe:]] + [inner_t[-1]])
        vals = np.array([h[1] for h in history[-extrap.pe:]] + [inner_u[-1]])
        spacings = np.diff(times)
        if not np.allclose(spacings, spacings[-1], rtol=1e-9, atol=0.0):
            raise SimulationError("multistep history is not equidistant",
                                  time=start_time)
        target_time = inner_t[-1] + (dt_try - extrap.K * extrap.dt_inner)
        frac = (target_time - times[-1]) / spacings[-1]
        coeff = lagrange_coeffs(frac, extrap.pe)
        out = np.zeros(vals.shape[1])
        for s in range(extrap.pe + 1):
            out += coeff[s] * vals[-1 - s]
        return MacroState(out, spec, target_time)
    window = extrap.pe + 1 if extrap.method != PROJECTIVE_CHORD \
        else extrap.K - extrap.K1 + 1
    hist = MacroHistory(inner_t[-window:], inner_u[-window:], spec)
    return projective_extrapolate(hist, dt_try, extrap)


def accelerate_step(model: ModelSpec, ens: Ensemble, policy: StepPolicy,
                    extrap: ExtrapConfig, spec: MomentSpec,
                    match_cfg: MatchConfig,
                    qoi: Optional[Callable] = None,
                    history: Optional[list] = None,
                    dt_macro: Optional[float] = None):
    """One macro step: burst, extrapolate, match; retries inside on failure.

    ``history`` holds (time, values) end points of earlier macro steps and is
    consulted by the multistep method only.  Returns
    ``(ensemble, StepRow, policy)``; the policy is updated in place, ending
    with the proposal for the next step.
    """
    K, dt = policy.K, policy.dt_inner
    dt_try = policy.dt_macro if dt_macro is None else dt_macro
    burst, inner_t, inner_u, inner_q = _record_burst(model, ens, K, dt, spec,
                                                     qoi)
    ens_k = burst.ensemble
    rejections = 0
    outcome = None
    while True:
        if policy.is_identity(dt_try):
            ens_next = ens_k
            outcome = _identity_outcome(spec.L)
            outcome.ensemble = ens_next
            macro_after = inner_u[-1]
            dt_used = K * dt
            break
        target = _extrapolation_target(extrap, spec, ens.time, inner_t,
                                       inner_u, history, dt_try)
        if model.admissible is not None:
            ctx = FeneStepContext(model=model, t_prev=inner_t[-2], dt=dt,
                                  prev_states=burst.prev_states,
                                  rounds=burst.last_rounds,
                                  step_index=burst.last_step_index)
            outcome = mt.match_fene(ens_k, target, ctx, match_cfg)
        else:
            outcome = mt.match_ensemble(ens_k, target, match_cfg)
        if outcome.ok:
            ens_next = outcome.ensemble
            if outcome.micro_states is not None and outcome.retries > 0:
                # re-evolved paths changed the burst end point
                inner_u[-1] = spec_values(outcome.micro_states[:, 0], spec)
            macro_after = spec_values(ens_next.states[:, 0], spec)
            dt_used = dt_try
            break
        rejections += 1
        if not policy.adaptive:
            raise SimulationError(
                f"matching failed ({outcome.reason}) with adaptive stepping "
                "off", time=ens.time, detail=outcome.reason)
        dt_try = shrink_step(dt_try, policy.shrink, policy.floor)
    policy.dt_macro = dt_used if not policy.is_identity(dt_used) else policy.floor
    policy.after_success()
    q_after = qoi(ens_next.states) if qoi is not None else math.nan
    row = StepRow(time=ens_next.time, macro=macro_after, qoi=q_after,
                  dt_used=dt_used, outcome=outcome, rejections=rejections,
                  inner_times=list(inner_t[1:]), inner_qoi=list(inner_q[1:]),
                  n_micro=K, burst_end=(inner_t[K], inner_u[K].copy()))
    return ens_next, row, policy


def _final_micro_advance(model, ens, dt, remaining, spec, qoi):
    """Advance to the final time with full inner steps plus one short step."""
    n_full = int(math.floor(remaining / dt + 1e-9))
    inner_times, inner_qois = [], []
    n_micro = 0
    if n_full >= 1:
        burst, ts, _, qs = _record_burst(model, ens, n_full, dt, spec, qoi)
        ens = burst.ensemble
        inner_times, inner_qois = list(ts[1:]), list(qs[1:])
        n_micro += n_full
    rest = remaining - n_full * dt
    if rest > 1e-9 * dt:
        burst, ts, _, qs = _record_burst(model, ens, 1, rest, spec, qoi)
        e = burst.ensemble
        t_final = ens.time + rest
        ens = Ensemble(states=e.states, time=t_final, lineage=e.lineage,
                       anchor_time=t_final, anchor_step=e.lineage.step)
        inner_times += [t_final]
        inner_qois += list(qs[1:])
        n_micro += 1
    return ens, inner_times, inner_qois, n_micro


def _push_history(history, row, pe):
    """Append a burst end point; flush when the macro spacing changed."""
    if row.burst_end is None:
        return
    t_end, u_end = row.burst_end
    if len(history) >= 2:
        spacing = t_end - history[-1][0]
        prev_spacing = history[-1][0] - history[-2][0]
        if not math.isclose(spacing, prev_spacing, rel_tol=1e-9):
            history.clear()
    elif len(history) == 1 and pe >= 2:
        # a lone survivor of a flush cannot certify its spacing
        pass
    history.append((t_end, np.asarray(u_end, dtype=float)))
    while len(history) > pe + 1:
        history.pop(0)


def _warmup_step(model, ens, policy, extrap, spec, qoi, history, rec, cfg):
    """Starting procedure for multistep runs.

    The default mode advances one macro step purely microscopically;
    'projective' mode takes a first-order projective step instead.  Either
    way the end point of the first K inner steps joins the history.
    """
    dt_macro = policy.dt_macro
    if cfg.warmup == "projective":
        proj = ExtrapConfig(method="projective", pe=1, K=extrap.K,
                            dt_inner=extrap.dt_inner)
        ens, row, _ = accelerate_step(model, ens, policy, proj, spec,
                                      MatchConfig(), qoi=qoi,
                                      dt_macro=dt_macro)
        policy.dt_macro = dt_macro  # warm-up keeps the spacing fixed
        _push_history(history, row, extrap.pe)
        rec.add(row)
        rec.warmup_steps += 1
        return ens
    r = dt_macro / policy.dt_inner
    n = round(r)
    if n < policy.K or abs(r - n) > 1e-9 * max(1.0, r):
        raise SimulationError(
            "microscopic warm-up needs dt_macro to be a multiple of dt_inner "
            "covering one burst", seed=cfg.seed, time=ens.time)
    burst, inner_t, inner_u, inner_q = _record_burst(model, ens, n,
                                                     policy.dt_inner, spec,
                                                     qoi)
    ens = burst.ensemble
    row = StepRow(time=ens.time, macro=inner_u[-1], qoi=inner_q[-1],
                  dt_used=dt_macro, outcome=_identity_outcome(spec.L),
                  inner_times=list(inner_t[1:]), inner_qoi=list(inner_q[1:]),
                  n_micro=n,
                  burst_end=(inner_t[policy.K], inner_u[policy.K].copy()))
    _push_history(history, row, extrap.pe)
    rec.add(row)
    rec.warmup_steps += 1
    return ens


def run_simulation(cfg: ExperimentConfig, stream: int = 0) -> TrajectoryRecord:
    """Run the accelerated loop from t0 to T for one replicate stream.

    The trajectory record holds, per accepted macro step, the time, the
    macroscopic state after matching, the observable, the step size used, the
    matching summary and the number of rejected attempts, plus the inner-step
    observable series.  Identical (config, stream) reproduce it bit for bit.
    """
    cfg = cfg.validate()
    model = build_model(cfg)
    spec = macro_spec(cfg)
    extrap = extrap_config(cfg)
    qoi = build_qoi(cfg)
    match_cfg = MatchConfig()
    lineage = SeedLineage(cfg.seed, stream=stream)
    ens = initial_ensemble(cfg, lineage)
    policy = StepPolicy(dt_macro=cfg.dt0, dt_max=cfg.dt_max, K=cfg.K,
                        dt_inner=cfg.dt_inner, shrink=cfg.shrink,
                        grow=cfg.grow, adaptive=cfg.adaptive)
    rec = TrajectoryRecord(spec=spec, seed=cfg.seed, stream=stream,
                           config_snapshot=config_to_ini(cfg))
    rec.notes["config_hash"] = config_hash(cfg)
    rec.notes["dt_inner"] = cfg.dt_inner
    rec.notes["warmup_mode"] = cfg.warmup
    rec.add(StepRow(time=ens.time, macro=spec_values(ens.states[:, 0], spec),
                    qoi=qoi(ens.states), dt_used=0.0, outcome=None))

    multistep = extrap.method == MULTISTEP
    history: list = []
    t_scale = max(abs(cfg.T), abs(cfg.t0), 1.0)
    last_truncated = False
    while ens.time < cfg.T - REL_EPS * t_scale:
        remaining = cfg.T - ens.time
        if remaining <= policy.floor * (1.0 + REL_EPS):
            ens, ts, qs, n_micro = _final_micro_advance(
                model, ens, policy.dt_inner, remaining, spec, qoi)
            out = _identity_outcome(spec.L)
            out.ensemble = ens
            rec.add(StepRow(time=ens.time,
                            macro=spec_values(ens.states[:, 0], spec),
                            qoi=qoi(ens.states), dt_used=remaining,
                            outcome=out, inner_times=ts, inner_qoi=qs,
                            n_micro=n_micro))
            break
        if multistep and len(history) < extrap.pe \
                and not policy.is_identity(min(policy.dt_macro, remaining)):
            ens = _warmup_step(model, ens, policy, extrap, spec, qoi, history,
                               rec, cfg)
            continue
        dt_step = min(policy.dt_macro, remaining)
        last_truncated = dt_step < policy.dt_macro - REL_EPS
        ens, row, policy = accelerate_step(model, ens, policy, extrap, spec,
                                           match_cfg, qoi=qoi,
                                           history=history, dt_macro=dt_step)
        if multistep:
            _push_history(history, row, extrap.pe)
        rec.add(row)
    last = rec.rows[-1]
    if last_truncated and abs(last.time - cfg.T) <= 1e-9 * t_scale:
        # the truncated step targeted T; pin the recorded time to it
        last.time = cfg.T
    return rec
