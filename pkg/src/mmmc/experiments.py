"""Experiment drivers for the matching and extrapolation error studies.

Each driver runs a full-resolution reference simulation of the dumbbell
model, then probes one algorithmic ingredient in isolation:

* :func:`matching_moment_sweep` matches an earlier ensemble onto the moments
  of a later reference ensemble for a range of constraint counts L and
  compares the resulting distributions (moment errors, KS test).
* :func:`matching_dt_sweep` matches onto reference moments a growing time
  distance ahead and records the stress error as a function of that distance.
* :func:`extrap_local_error_sweep` extrapolates the macroscopic state ahead
  (projective or multistep), matches onto the extrapolated state, and records
  the stress error of one accelerated step.

Distribution comparisons use the modulus of the states: the macroscopic
states are even moments, blind to odd asymmetries, and the reference flow is
symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import KsResult, ks_two_sample
from .config import ExperimentConfig
from .engine import Ensemble, run_burst
from .extrapolation import lagrange_coeffs
from .matching import FeneStepContext, MatchConfig, match_fene
from .moments import MacroState, MomentSpec, moments_about, spec_values
from .orchestrator import (SimulationError, build_fene_params, build_model,
                           initial_ensemble)
from .rng import SeedLineage


@dataclass
class ReferencePath:
    """Inner-step record of a plain microscopic dumbbell run.

    ``values`` holds the even centralized moments (orders 2..2 Lmax) at every
    inner time; ``stress`` the polymer stress.  ``ens_minus``/``ctx_minus``
    capture the ensemble at the probe time together with what is needed to
    replay its last microscopic step.
    """

    times: np.ndarray
    values: np.ndarray
    stress: np.ndarray
    ens_minus: Ensemble
    ctx_minus: FeneStepContext
    idx_minus: int
    spec: MomentSpec


def _steps_between(t_a: float, t_b: float, dt: float) -> int:
    r = (t_b - t_a) / dt
    n = round(r)
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, abs(r)):
        raise SimulationError(
            f"interval [{t_a}, {t_b}] is not a multiple of dt_inner {dt}")
    return n


def fene_reference_path(cfg: ExperimentConfig, t_minus: float, t_star: float,
                        l_max: int, stream: int = 0) -> ReferencePath:
    """Microscopic reference run t0 -> t_star recording moments and stress."""
    if cfg.kind != "fene":
        raise ValueError("reference path driver expects the dumbbell model")
    model = build_model(cfg)
    params = build_fene_params(cfg)
    spec = MomentSpec("even-centralized", l_max)
    dt = cfg.dt_inner
    n1 = _steps_between(cfg.t0, t_minus, dt)
    n2 = _steps_between(t_minus, t_star, dt)
    lineage = SeedLineage(cfg.seed, stream=stream)
    ens0 = initial_ensemble(cfg, lineage)

    times, values, stress = [], [], []

    def recorder(skip_first):
        def on_step(k, t, states):
            if skip_first and k == 0:
                return None
            times.append(t)
            values.append(spec_values(states[:, 0], spec))
            x = states[:, 0]
            fx = x / (1.0 - np.square(x) / params.gamma)
            stress.append(params.epsilon / params.we * (np.mean(x * fx) - 1.0))
            return None
        return on_step

    b1 = run_burst(model, ens0, n1, dt, on_step=recorder(False))
    ens_minus = b1.ensemble
    ctx = FeneStepContext(model=model, t_prev=times[-2], dt=dt,
                          prev_states=b1.prev_states, rounds=b1.last_rounds,
                          step_index=b1.last_step_index)
    b2 = run_burst(model, ens_minus, n2, dt, on_step=recorder(True))
    return ReferencePath(times=np.array(times), values=np.array(values),
                         stress=np.array(stress), ens_minus=ens_minus,
                         ctx_minus=ctx, idx_minus=n1, spec=spec,
                         ), b2.ensemble


@dataclass
class MomentSweepResult:
    """Per-L outcome of matching onto a later reference state."""

    L_values: list
    ks: dict
    moment_rel_errors: dict
    reference_moments: np.ndarray
    match_info: dict
    report_orders: tuple


def matching_moment_sweep(cfg: ExperimentConfig, t_minus: float,
                          t_star: float, L_values, report_l_max: int = 10,
                          stream: int = 0,
                          match_cfg: MatchConfig = MatchConfig()):
    """Match the t_minus ensemble onto reference moments at t_star, per L.

    For every L the ensemble is matched onto the first L even centralized
    moments of the reference ensemble at t_star; recorded are the KS test of
    the matched against the reference distribution (of the state modulus) and
    the relative error of the even moments up to order 2*report_l_max.
    """
    L_values = list(L_values)
    l_max = max(max(L_values), report_l_max)
    path, ens_star = fene_reference_path(cfg, t_minus, t_star, l_max,
                                         stream=stream)
    x_star = np.abs(ens_star.states[:, 0])
    star_orders = tuple(2 * l for l in range(1, report_l_max + 1))
    star_center = float(np.mean(ens_star.states[:, 0]))
    ref_moments = moments_about(ens_star.states[:, 0], star_center,
                                star_orders)
    target_full = path.values[-1]
    ks, errs, info = {}, {}, {}
    for L in L_values:
        spec = MomentSpec("even-centralized", L)
        target = MacroState(target_full[:L], spec, time=t_star)
        out = match_fene(path.ens_minus, target, path.ctx_minus, match_cfg)
        info[L] = out
        if not out.ok:
            ks[L] = None
            errs[L] = None
            continue
        y = out.ensemble.states[:, 0]
        ks[L] = ks_two_sample(np.abs(y), x_star)
        got = moments_about(y, float(np.mean(y)), star_orders)
        errs[L] = (got - ref_moments) / ref_moments
    return MomentSweepResult(L_values=L_values, ks=ks,
                             moment_rel_errors=errs,
                             reference_moments=ref_moments, match_info=info,
                             report_orders=star_orders)


@dataclass
class DtSweepResult:
    """Stress error of pure matching (or extrapolate+match) per (L, dt)."""

    dt_values: np.ndarray
    L_values: list
    rel_error: dict           # L -> (n_dt,) seed-averaged relative error
    per_seed: dict            # L -> (n_seeds, n_dt)
    n_seeds: int


def matching_dt_sweep(cfg: ExperimentConfig, t_minus: float, dt_values,
                      L_values, n_seeds: int = 20,
                      match_cfg: MatchConfig = MatchConfig()):
    """Stress error after matching onto reference moments dt ahead.

    For every seed, one reference run records moments and stress on
    [t_minus, t_minus + max(dt)]; the t_minus ensemble is then matched onto
    the recorded moments at each dt and the relative stress error
    |tau_matched - tau_ref| / |tau_ref| is averaged over seeds.
    """
    dt_values = np.asarray(sorted(dt_values), dtype=float)
    L_values = list(L_values)
    l_max = max(L_values)
    t_star = t_minus + dt_values[-1]
    offsets = [_steps_between(t_minus, t_minus + d, cfg.dt_inner)
               for d in dt_values]
    per_seed = {L: np.empty((n_seeds, len(dt_values))) for L in L_values}
    for s in range(n_seeds):
        path, _ = fene_reference_path(cfg, t_minus, t_star, l_max, stream=s)
        for L in L_values:
            spec = MomentSpec("even-centralized", L)
            for j, off in enumerate(offsets):
                idx = path.idx_minus + off
                target = MacroState(path.values[idx][:L], spec,
                                    time=path.times[idx])
                out = match_fene(path.ens_minus, target, path.ctx_minus,
                                 match_cfg)
                if not out.ok:
                    per_seed[L][s, j] = np.nan
                    continue
                tau_ref = path.stress[idx]
                y = out.ensemble.states[:, 0]
                params = build_fene_params(cfg)
                fx = y / (1.0 - np.square(y) / params.gamma)
                tau = params.epsilon / params.we * (np.mean(y * fx) - 1.0)
                per_seed[L][s, j] = abs(tau - tau_ref) / abs(tau_ref)
    rel = {L: np.nanmean(per_seed[L], axis=0) for L in L_values}
    return DtSweepResult(dt_values=dt_values, L_values=L_values,
                         rel_error=rel, per_seed=per_seed, n_seeds=n_seeds)


def extrap_local_error_sweep(cfg: ExperimentConfig, t_minus: float, dt_values,
                             L_values, n_seeds: int = 20,
                             method: str = "projective", pe: int = 1,
                             match_cfg: MatchConfig = MatchConfig()):
    """Stress error of one extrapolate+match step, per (L, dt).

    Projective extrapolation uses the last pe + 1 inner restrictions before
    t_minus; multistep extrapolation the recorded restrictions at
    t_minus - s dt, s = 0..pe.  The matched stress is compared against the
    reference stress at t_minus + dt.
    """
    dt_values = np.asarray(sorted(dt_values), dtype=float)
    L_values = list(L_values)
    l_max = max(L_values)
    t_star = t_minus + dt_values[-1]
    dt_in = cfg.dt_inner
    offsets = [_steps_between(t_minus, t_minus + d, dt_in) for d in dt_values]
    # multistep needs history reaching back pe * dt before t_minus
    t0_needed = t_minus - pe * dt_values[-1] if method == "multistep" else None
    if t0_needed is not None and t0_needed <= cfg.t0:
        raise ValueError("multistep sweep needs t_minus - pe*max(dt) > t0")
    per_seed = {L: np.empty((n_seeds, len(dt_values))) for L in L_values}
    params = build_fene_params(cfg)
    for s in range(n_seeds):
        path, _ = fene_reference_path(cfg, t_minus, t_star, l_max, stream=s)
        i_minus = path.idx_minus
        for j, (d, off) in enumerate(zip(dt_values, offsets)):
            alpha = d / dt_in - 1.0
            if method == "projective":
                coeff = lagrange_coeffs(alpha, pe)
                window = path.values[i_minus - pe:i_minus + 1]
                target_vals = sum(coeff[k] * window[-1 - k]
                                  for k in range(pe + 1))
            else:
                beta = alpha / (alpha + 1.0)
                coeff = lagrange_coeffs(beta, pe)
                target_vals = np.zeros(path.values.shape[1])
                for k in range(pe + 1):
                    target_vals += coeff[k] * path.values[i_minus - k * off]
            for L in L_values:
                spec = MomentSpec("even-centralized", L)
                target = MacroState(target_vals[:L], spec,
                                    time=path.times[i_minus + off])
                out = match_fene(path.ens_minus, target, path.ctx_minus,
                                 match_cfg)
                if not out.ok:
                    per_seed[L][s, j] = np.nan
                    continue
                tau_ref = path.stress[i_minus + off]
                y = out.ensemble.states[:, 0]
                fx = y / (1.0 - np.square(y) / params.gamma)
                tau = params.epsilon / params.we * (np.mean(y * fx) - 1.0)
                per_seed[L][s, j] = abs(tau - tau_ref) / abs(tau_ref)
    rel = {L: np.nanmean(per_seed[L], axis=0) for L in L_values}
    return DtSweepResult(dt_values=dt_values, L_values=L_values,
                         rel_error=rel, per_seed=per_seed, n_seeds=n_seeds)
