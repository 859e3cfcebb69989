"""Validation instruments: distribution tests, reference solutions, error
and variance diagnostics, replicate statistics.

All reference quantities here are computed by routes independent of the
simulation code they check: the mean/variance reference integrates a closed
two-equation ODE system, the variance predictor evaluates the one-step error
propagation of the extrapolated scheme in closed form, and the
Kolmogorov-Smirnov test works directly on empirical distribution functions.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .extrapolation import lagrange_coeffs
from .orchestrator import run_simulation

KS_SERIES_TERMS = 100


class AnalysisError(Exception):
    pass


@dataclass(frozen=True)
class KsResult:
    statistic: float
    pvalue: float
    n_a: int
    n_b: int


def kolmogorov_survival(lam: float, terms: int = KS_SERIES_TERMS) -> float:
    """Asymptotic Kolmogorov survival function 2 sum (-1)^(k-1) exp(-2k^2 l^2).

    The alternating series is summed until its terms stop mattering; if it
    has not converged within ``terms`` terms (tiny ``lam``), the mass is all
    in the tail and 1 is returned.
    """
    if lam <= 0:
        return 1.0
    total = 0.0
    sign = 1.0
    for k in range(1, terms + 1):
        term = 2.0 * math.exp(-2.0 * (k * lam) ** 2)
        total += sign * term
        sign = -sign
        if term < 1e-16:
            return float(min(max(total, 0.0), 1.0))
    # terms still large after the cap: lam is tiny and the mass is all tail
    return 1.0


def ks_two_sample(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test.

    D is the exact supremum distance between the two empirical distribution
    functions; the p-value uses the asymptotic law at the effective sample
    size n_a n_b / (n_a + n_b).
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise AnalysisError("both samples must be nonempty")
    support = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, support, side="right") / a.size
    cdf_b = np.searchsorted(b, support, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = a.size * b.size / (a.size + b.size)
    p = kolmogorov_survival(math.sqrt(n_eff) * d)
    return KsResult(statistic=d, pvalue=p, n_a=a.size, n_b=b.size)


@dataclass
class MomentOdeSolution:
    """First and second moment of the narrow-sense linear model over time.

    The mean solves dU1/dt = a1 U1 + a2 and the variance
    dU2/dt = 2 a1 U2 + b^2.  ``u1``/``u2`` are callables of time.
    """

    u1: callable
    u2: callable
    a1: object
    a2: object
    b: object
    u0: tuple


def moment_ode_reference(a1, a2, b, u0, t_span=(0.0, 1.0)) -> MomentOdeSolution:
    """Reference mean/variance evolution of the linear model.

    Constant coefficients use the closed form; time-dependent ones a
    high-order integrator at tolerance 1e-10 (both agree to the integrator
    tolerance).
    """
    u10, u20 = float(u0[0]), float(u0[1])
    if u20 < 0:
        raise AnalysisError("initial variance must be nonnegative")
    constant = not (callable(a1) or callable(a2) or callable(b))
    if constant:
        a1c, a2c, bc = float(a1), float(a2), float(b)

        if a1c == 0.0:
            def u1(t):
                return u10 + a2c * np.asarray(t)

            def u2(t):
                return u20 + bc ** 2 * np.asarray(t)
        else:
            u1_inf = -a2c / a1c
            u2_inf = -bc ** 2 / (2.0 * a1c)

            def u1(t):
                return u1_inf + (u10 - u1_inf) * np.exp(a1c * np.asarray(t))

            def u2(t):
                return u2_inf + (u20 - u2_inf) * np.exp(2.0 * a1c * np.asarray(t))

        return MomentOdeSolution(u1=u1, u2=u2, a1=a1, a2=a2, b=b,
                                 u0=(u10, u20))

    a1f = a1 if callable(a1) else (lambda t, _c=float(a1): _c)
    a2f = a2 if callable(a2) else (lambda t, _c=float(a2): _c)
    bf = b if callable(b) else (lambda t, _c=float(b): _c)

    def rhs(t, u):
        return [a1f(t) * u[0] + a2f(t), 2.0 * a1f(t) * u[1] + bf(t) ** 2]

    sol = solve_ivp(rhs, t_span, [u10, u20], method="DOP853", rtol=1e-10,
                    atol=1e-12, dense_output=True)
    if not sol.success:
        raise AnalysisError(f"moment reference integration failed: {sol.message}")

    def u1(t):
        return sol.sol(np.asarray(t))[0]

    def u2(t):
        return sol.sol(np.asarray(t))[1]

    return MomentOdeSolution(u1=u1, u2=u2, a1=a1, a2=a2, b=b, u0=(u10, u20))


def predict_variance_projective(a: float, b: float, dt: float, J: int, K: int,
                                pe: int, alpha: float, var0: float,
                                mode: str = "accelerated") -> float:
    """Variance of the empirical mean after one extrapolated macro step.

    Specialized to the explicit one-step scheme with amplification
    R(z) = 1 + z and noise variance b^2 dt per inner step, for the linear
    test equation dX = a X dt + b dW.  Mode 'accelerated' evaluates the
    extrapolated recursion; 'full-micro' the plain scheme over alpha + K
    inner steps (J then plays the role of the comparison ensemble size, and
    alpha must be a nonnegative integer).
    """
    r = 1.0 + a * dt
    var_s = b ** 2 * dt
    if mode == "full-micro":
        n = alpha + K
        if abs(n - round(n)) > 1e-12:
            raise AnalysisError("full-micro mode needs integer alpha")
        n = int(round(n))
        acc = sum(r ** (2 * i) for i in range(n))
        return (r ** (2 * n) * var0 + var_s * acc) / J
    if mode != "accelerated":
        raise AnalysisError(f"unknown mode {mode!r}")
    coeff = lagrange_coeffs(alpha, pe)
    r_e = sum(coeff[s] * r ** (K - s) for s in range(pe + 1))
    acc = 0.0
    for i in range(K):
        partial = sum(coeff[s] for s in range(min(pe, K - 1 - i) + 1))
        acc += r ** (2 * i) * partial ** 2
    return (r_e ** 2 * var0 + var_s * acc) / J


def estimate_order(pairs) -> float:
    """Least-squares slope of log(error) against log(step size)."""
    pairs = [(float(h), float(e)) for h, e in pairs]
    if len(pairs) < 2:
        raise AnalysisError("need at least two (step, error) pairs")
    if any(h <= 0 or e <= 0 for h, e in pairs):
        raise AnalysisError("step sizes and errors must be positive")
    logs_h = np.log([h for h, _ in pairs])
    logs_e = np.log([e for _, e in pairs])
    slope = np.polyfit(logs_h, logs_e, 1)[0]
    return float(slope)


def empirical_histogram(values, bins: int, value_range) -> tuple:
    """Normalized histogram: bin mass / (J * width).

    Integrates to one when every sample lies inside the range (out-of-range
    samples lower the integral rather than renormalize it).
    """
    values = np.asarray(values, dtype=float).ravel()
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise AnalysisError("degenerate histogram range")
    if bins < 1:
        raise AnalysisError("need at least one bin")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    widths = np.diff(edges)
    density = counts / (values.size * widths)
    return density, edges


def _run_replicate(args):
    cfg, stream = args
    rec = run_simulation(cfg, stream=stream)
    return rec.times, rec.qoi_values


@dataclass
class ReplicateStats:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_replicates: int

    def csv_text(self, header_lines=()) -> str:
        lines = [f"# {h}" for h in header_lines]
        lines.append("time,mean,std")
        for t, m, s in zip(self.times, self.mean, self.std):
            lines.append(f"{t!r},{m!r},{s!r}")
        return "\n".join(lines) + "\n"


def replicate_stats(cfg, R: int, workers: int = 1,
                    stream_offset: int = 0) -> ReplicateStats:
    """Sample mean and standard deviation of the observable across R runs.

    Replicate r uses stream ``stream_offset + r`` of the same base seed, so
    replicates are independent, reproducible, and two configurations compared
    at equal replicate indices share their random numbers.  Requires a
    non-adaptive policy so that all replicates share one time grid.
    """
    if R < 2:
        raise AnalysisError("need at least two replicates")
    if cfg.adaptive:
        raise AnalysisError("replicate statistics need a fixed step policy "
                            "(adaptive=false) for time alignment")
    jobs = [(cfg, stream_offset + r) for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]
    times = results[0][0]
    for t_r, _ in results[1:]:
        if len(t_r) != len(times) or not np.array_equal(t_r, times):
            raise AnalysisError("replicates landed on different time grids")
    qoi = np.stack([q for _, q in results])
    return ReplicateStats(times=times, mean=qoi.mean(axis=0),
                          std=qoi.std(axis=0, ddof=1), n_replicates=R)
