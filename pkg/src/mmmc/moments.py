"""Moment specifications, the restriction operator and observables.

A :class:`MomentSpec` names L macroscopic state variables as empirical
moments of a scalar ensemble; :func:`restrict` evaluates them.  Reductions
use numpy's fixed-order pairwise summation, so identical inputs always give
bitwise identical results, and the tree accumulation keeps high-order moments
(whose magnitudes grow quickly with the order) accurate.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np


class RestrictionError(Exception):
    pass


@dataclass(frozen=True)
class MomentSpec:
    """Which L empirical moments make up the macroscopic state.

    kinds:
      standard          raw moments E x^l, l = 1..L
      centralized       mean, then central moments of orders 2..L
      even-centralized  central moments of orders 2, 4, ..., 2L; with
                        ``include_mean`` the mean is variable 1 followed by
                        orders 2, 4, ..., 2(L-1)

    ``orders()`` returns the moment order of each variable (1 denotes the
    mean); this index map is serialized with every output.
    """

    kind: str
    L: int
    include_mean: bool = False

    _KINDS = ("standard", "centralized", "even-centralized")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown moment kind {self.kind!r}")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.include_mean and self.kind != "even-centralized":
            raise ValueError("include_mean applies to even-centralized only")

    def orders(self) -> tuple[int, ...]:
        if self.kind == "standard":
            return tuple(range(1, self.L + 1))
        if self.kind == "centralized":
            return tuple(range(1, self.L + 1))
        if self.include_mean:
            return (1,) + tuple(2 * l for l in range(1, self.L))
        return tuple(2 * l for l in range(1, self.L + 1))

    @property
    def centered(self) -> bool:
        return self.kind != "standard"

    def label(self) -> str:
        orders = ",".join(str(o) for o in self.orders())
        return f"{self.kind}[L={self.L};orders={orders}]"


@dataclass
class MacroState:
    """L macroscopic state variable values with their defining spec."""

    values: np.ndarray
    spec: MomentSpec
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.spec.L,):
            raise ValueError(
                f"expected {self.spec.L} values, got shape {self.values.shape}")

    def csv_header(self) -> str:
        cols = ",".join(f"U_{l}" for l in range(1, self.spec.L + 1))
        return f"# moments: {self.spec.label()}\ntime,{cols}"

    def csv_row(self) -> str:
        return ",".join([repr(float(self.time))] +
                        [repr(float(v)) for v in self.values])


def _states_1d(ens) -> np.ndarray:
    states = np.asarray(ens.states if hasattr(ens, "states") else ens,
                        dtype=float)
    if states.ndim == 2:
        if states.shape[1] != 1:
            raise RestrictionError("moment restriction is defined for scalar "
                                   "states")
        states = states[:, 0]
    if states.size == 0:
        raise RestrictionError("empty ensemble")
    return states


def raw_moments(x: np.ndarray, max_order: int) -> np.ndarray:
    """Empirical raw moments of orders 1..max_order (pairwise reduction)."""
    out = np.empty(max_order)
    p = np.ones_like(x)
    for o in range(1, max_order + 1):
        p = p * x
        out[o - 1] = np.mean(p)
    return out


def moments_about(x: np.ndarray, center: float, orders) -> np.ndarray:
    """Empirical moments E (x - center)^o for the requested orders.

    Order 1 with ``center == 0`` is the plain mean; shared by restriction and
    matching so that both sides agree bit for bit.
    """
    orders = tuple(orders)
    d = x - center
    out = np.empty(len(orders))
    top = max(orders)
    p = np.ones_like(d)
    vals = {}
    for o in range(1, top + 1):
        p = p * d
        if o in orders:
            vals[o] = np.mean(p)
    for i, o in enumerate(orders):
        out[i] = vals[o]
    return out


def spec_values(x: np.ndarray, spec: MomentSpec) -> np.ndarray:
    """Moment values of ``spec`` for a scalar sample, in variable order.

    The single evaluation path shared by restriction and matching, so a
    residual of exactly zero is guaranteed when matching onto a state's own
    restriction.
    """
    if spec.kind == "standard":
        return raw_moments(x, spec.L)
    if x.size < 2:
        raise RestrictionError("centralized moments need J >= 2")
    mean = np.mean(x)
    orders = spec.orders()
    values = np.empty(spec.L)
    centered_orders = [o for o in orders if o >= 2]
    centered_vals = moments_about(x, mean, centered_orders) if centered_orders \
        else np.empty(0)
    j = 0
    for i, o in enumerate(orders):
        if o == 1:
            values[i] = mean
        else:
            values[i] = centered_vals[j]
            j += 1
    return values


def restrict(ens, spec: MomentSpec, time: float = None) -> MacroState:
    """Macroscopic state of an ensemble: the empirical moments of ``spec``.

    Central moments are taken about the ensemble's own empirical mean.  For
    centered specs at least two states are required.
    """
    x = _states_1d(ens)
    t = time if time is not None else getattr(ens, "time", 0.0)
    return MacroState(spec_values(x, spec), spec, t)


def observable_mean(ens, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Empirical mean (1/J) sum_j f(y_j), reduced in fixed order."""
    states = np.asarray(ens.states if hasattr(ens, "states") else ens,
                        dtype=float)
    if states.size == 0:
        raise RestrictionError("empty ensemble")
    vals = np.asarray(f(states))
    return np.mean(vals, axis=0)


def stress_kramers(ens, params):
    """Polymer stress (eps/We) (E[x F(x)] - 1), tensor valued for d > 1.

    Every state must be strictly inside the extension limit; the force
    denominator 1 - |x|^2/gamma must stay positive.
    """
    from .engine import fene_force

    states = np.asarray(ens.states if hasattr(ens, "states") else ens,
                        dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.size == 0:
        raise RestrictionError("empty ensemble")
    force = fene_force(states, params.gamma)
    scale = params.epsilon / params.we
    if states.shape[1] == 1:
        return scale * (np.mean(states[:, 0] * force[:, 0]) - 1.0)
    outer = np.einsum("ji,jk->ik", states, force) / states.shape[0]
    return scale * (outer - np.eye(states.shape[1]))


def macro_states_to_csv(states: list[MacroState]) -> str:
    """CSV rows (time, U_1..U_L) with the spec recorded as a header comment."""
    if not states:
        return ""
    buf = io.StringIO()
    buf.write(states[0].csv_header() + "\n")
    for st in states:
        buf.write(st.csv_row() + "\n")
    return buf.getvalue()
