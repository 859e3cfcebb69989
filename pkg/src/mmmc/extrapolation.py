"""Forward extrapolation of the macroscopic state and its stability check.

Two families:

* projective: polynomial extrapolation through the last ``p_e + 1`` inner
  restrictions of the current burst, evaluated ``alpha = dt_macro/dt - K``
  inner steps past the burst end.  A chord variant estimates the slope from
  two inner points further apart to damp statistical noise.
* multistep: polynomial extrapolation through the end points of the last
  ``p_e + 1`` bursts (equidistant macro steps), evaluated at the interval
  fraction ``beta = alpha / (alpha + K)``.

The multistep recurrence has characteristic polynomial
``P(xi) = xi^(p_e+1) - sum_s l_s(beta) xi^(p_e-s)``; :func:`characteristic_roots`
evaluates its zero-stability (roots in the closed unit disc, unimodular roots
simple).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moments import MacroState, MomentSpec


class ExtrapolationError(Exception):
    pass


PROJECTIVE = "projective"
PROJECTIVE_CHORD = "projective-chord"
MULTISTEP = "multistep"
METHODS = (PROJECTIVE, PROJECTIVE_CHORD, MULTISTEP)


@dataclass(frozen=True)
class ExtrapConfig:
    method: str
    pe: int
    K: int
    dt_inner: float
    K1: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown extrapolation method {self.method!r}")
        if self.pe < 1:
            raise ValueError("extrapolation order pe must be >= 1")
        if self.method == PROJECTIVE and self.pe > self.K:
            raise ValueError("projective extrapolation needs pe <= K")
        if self.method == PROJECTIVE_CHORD and not 0 <= self.K1 < self.K:
            raise ValueError("chord lag K1 must satisfy 0 <= K1 < K")

    def history_length(self) -> int:
        """Stored macro-step end points required before extrapolating."""
        return self.pe + 1 if self.method == MULTISTEP else 0


@dataclass
class MacroHistory:
    """Time-ordered macroscopic states sharing one moment spec.

    Holds the inner-burst restrictions for the projective methods, or the
    burst end points of successive macro steps for the multistep method.
    """

    times: np.ndarray
    values: np.ndarray
    spec: MomentSpec

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.times) != self.values.shape[0]:
            raise ValueError("times and values length mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise ExtrapolationError("history times must increase strictly")

    def __len__(self):
        return len(self.times)


def lagrange_coeff(s: int, alpha: float, pe: int) -> float:
    """Extrapolation weight l_s(alpha) for the value s steps back.

    Equals the Lagrange basis polynomial for nodes 0, -1, ..., -pe evaluated
    at alpha.  The removable factor (alpha + s) is cancelled analytically, so
    integer alpha (including alpha = 0) is exact.
    """
    if not 0 <= s <= pe:
        raise ValueError("index s must satisfy 0 <= s <= pe")
    num = 1.0
    for j in range(pe + 1):
        if j != s:
            num *= alpha + j
    return num / (math.factorial(s) * math.factorial(pe - s) * (-1.0) ** s)


def lagrange_coeffs(alpha: float, pe: int) -> np.ndarray:
    return np.array([lagrange_coeff(s, alpha, pe) for s in range(pe + 1)])


def projective_extrapolate(hist: MacroHistory, dt_macro: float,
                           cfg: ExtrapConfig) -> MacroState:
    """Extrapolate one macro step ahead from the current burst's restrictions.

    ``hist`` must end with the burst's inner restrictions in time order; the
    plain method uses the last ``pe + 1`` of them, the chord variant the last
    one and the one ``K - K1`` inner steps earlier.
    """
    alpha = dt_macro / cfg.dt_inner - cfg.K
    if alpha < -1e-12:
        raise ExtrapolationError(
            f"macro step {dt_macro} shorter than the burst {cfg.K * cfg.dt_inner}")
    vals = hist.values
    t_new = hist.times[-1] + (dt_macro - cfg.K * cfg.dt_inner)
    if cfg.method == PROJECTIVE_CHORD:
        span = cfg.K - cfg.K1
        if len(hist) < span + 1:
            raise ExtrapolationError("history too short for the chord lag")
        c = alpha / span
        out = (1.0 + c) * vals[-1] - c * vals[-1 - span]
        return MacroState(out, hist.spec, t_new)
    if len(hist) < cfg.pe + 1:
        raise ExtrapolationError("history shorter than pe + 1 restrictions")
    coeff = lagrange_coeffs(alpha, cfg.pe)
    out = np.zeros(vals.shape[1])
    for s in range(cfg.pe + 1):
        out += coeff[s] * vals[-1 - s]
    return MacroState(out, hist.spec, t_new)


def multistep_extrapolate(hist: MacroHistory, alpha: float, K: int,
                          pe: int) -> MacroState:
    """Extrapolate from the end points of the last pe + 1 macro steps.

    Requires equidistant stored end points; raises when the history is still
    too short, which signals that the starting procedure must be used.
    """
    if len(hist) < pe + 1:
        raise ExtrapolationError(
            f"multistep extrapolation needs {pe + 1} end points, have {len(hist)}")
    if alpha < -1e-12:
        raise ExtrapolationError("negative extrapolation fraction")
    spacings = np.diff(hist.times[-(pe + 1):])
    if len(spacings) and not np.allclose(spacings, spacings[0],
                                         rtol=1e-9, atol=0.0):
        raise ExtrapolationError("multistep end points must be equidistant")
    beta = alpha / (alpha + K)
    coeff = lagrange_coeffs(beta, pe)
    vals = hist.values
    out = np.zeros(vals.shape[1])
    for s in range(pe + 1):
        out += coeff[s] * vals[-1 - s]
    dt_macro = spacings[0] if len(spacings) else 0.0
    return MacroState(out, hist.spec, hist.times[-1] + beta * dt_macro)


def characteristic_roots(beta: float, pe: int,
                         modulus_tol: float = 1e-10,
                         separation_tol: float = 1e-8):
    """Roots of the multistep recurrence polynomial and a stability verdict.

    Roots come from the companion-matrix eigenvalues of
    ``xi^(pe+1) - sum_s l_s(beta) xi^(pe-s)``.  ``zero_stable`` requires every
    modulus below ``1 + modulus_tol`` and unimodular roots pairwise separated
    by more than ``separation_tol``.  xi = 1 is always a root (the weights sum
    to one, so constants are reproduced).
    """
    coeff = lagrange_coeffs(beta, pe)
    poly = np.concatenate(([1.0], -coeff))
    roots = np.roots(poly)
    mods = np.abs(roots)
    stable = bool(np.all(mods <= 1.0 + modulus_tol))
    if stable:
        uni = roots[np.abs(mods - 1.0) <= modulus_tol]
        for i in range(len(uni)):
            for j in range(i + 1, len(uni)):
                if abs(uni[i] - uni[j]) <= separation_tol:
                    stable = False
    return roots, stable
