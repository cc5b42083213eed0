"""Lagrange-multiplier control: proportional, PID, and weighted-average PID.

The controller observes an episodic cost estimate, compares it with the
threshold, and emits a non-negative multiplier. The weighted-average variant
replaces the plain running-sum integral with an exponentially weighted
average of past constraint errors, optionally rectified so the integral
never decays; this is what damps the oscillations a plain integral produces
when the constraint is tight and the initial policy unsafe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WapidState", "wapid_update", "cost_signal", "MODES"]

MODES = ("p", "pid", "wapid")


@dataclass
class WapidState:
    """Controller gains and memory. ``prev_cost`` is None before the first
    update; the derivative term is zero on that first update."""

    k_p: float = 0.1
    k_i: float = 0.01
    k_d: float = 0.01
    w: float = 0.1
    mode: str = "wapid"
    rectified_integral: bool = True
    integral: float = 0.0
    prev_cost: float | None = None
    lam: float = 0.0
    # trace of the most recent update, exported to the metrics stream
    last_delta: float = 0.0
    last_deriv: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.k_p, self.k_i, self.k_d) < 0.0:
            raise ValueError("controller gains must be non-negative")
        if not 0.0 < self.w <= 1.0:
            raise ValueError(f"w must be in (0, 1], got {self.w}")


def wapid_update(state: WapidState, j_c: float, d: float) -> tuple[float, WapidState]:
    """One controller update from an observed episodic cost estimate.

    Computes the constraint error ``delta = j_c - d``, the rectified cost
    rise ``deriv``, updates the integral according to the mode, and sets
    ``lambda = max(k_p * delta + k_i * integral + k_d * deriv, 0)``.
    Mutates ``state`` in place and returns (lambda, state).
    """
    delta = j_c - d
    deriv = 0.0 if state.prev_cost is None else max(j_c - state.prev_cost, 0.0)

    if state.mode == "pid":
        state.integral += delta
    elif state.mode == "wapid":
        if state.rectified_integral:
            state.integral += state.w * max(delta - state.integral, 0.0)
        else:
            state.integral += state.w * (delta - state.integral)
    # proportional mode leaves the integral untouched (and unused)

    if state.mode == "p":
        lam = max(state.k_p * delta, 0.0)
    else:
        lam = max(state.k_p * delta + state.k_i * state.integral + state.k_d * deriv, 0.0)

    state.lam = lam
    state.prev_cost = j_c
    state.last_delta = delta
    state.last_deriv = deriv
    return lam, state


def cost_signal(episode_costs, window: int, d: float) -> float:
    """Trailing-window mean of episodic cost totals.

    Returns the threshold itself (a neutral signal) when no episode has
    completed yet. A window longer than the history means over everything.
    """
    costs = list(episode_costs)
    if not costs:
        return float(d)
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    return float(np.mean(costs[-window:]))
