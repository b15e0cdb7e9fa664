"""One-dimensional normal-form maps and their rank-one kernel norms.

Each map h -> f(h, g) undergoes a codimension-one bifurcation at g = 1.
Alongside the state we propagate the exact sensitivity dh_t/dg, from which
the (rank-one) state-space tangent kernel norm follows as a squared
sensitivity sum.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum

# Reference bifurcation point shared by all kinds.
CRITICAL_G = 1.0

# States beyond this magnitude are treated as numerically divergent.
OVERFLOW_LIMIT = 1e100


class SimulationOverflow(RuntimeError):
    """Raised when a trajectory or its sensitivity leaves the finite range."""


class NormalFormKind(Enum):
    STABILITY_FLIP = "stability-flip"
    PITCHFORK = "pitchfork"
    # Standard textbook forms, shifted so the bifurcation sits at g = 1.
    # Included for broader sweeps; not part of the core flip/pitchfork pair.
    SADDLE_NODE = "saddle-node"
    TRANSCRITICAL = "transcritical"


@dataclass(frozen=True)
class ScalarNormalForm:
    """A scalar map h -> f(h, g) with analytic partial derivatives.

    kind selects the map:
        stability-flip:  f = g*h
        pitchfork:       f = g*h - h^3
        saddle-node:     f = h + (g - 1) - h^2
        transcritical:   f = g*h - h^2
    g is the (dimensionless) bifurcation parameter.
    """

    kind: NormalFormKind
    g: float

    def step(self, h: float) -> float:
        g = self.g
        if self.kind is NormalFormKind.STABILITY_FLIP:
            return g * h
        if self.kind is NormalFormKind.PITCHFORK:
            return g * h - h * h * h
        if self.kind is NormalFormKind.SADDLE_NODE:
            return h + (g - 1.0) - h * h
        if self.kind is NormalFormKind.TRANSCRITICAL:
            return g * h - h * h
        raise ValueError(f"unimplemented kind: {self.kind!r}")

    def df_dh(self, h: float) -> float:
        g = self.g
        if self.kind is NormalFormKind.STABILITY_FLIP:
            return g
        if self.kind is NormalFormKind.PITCHFORK:
            return g - 3.0 * h * h
        if self.kind is NormalFormKind.SADDLE_NODE:
            return 1.0 - 2.0 * h
        if self.kind is NormalFormKind.TRANSCRITICAL:
            return g - 2.0 * h
        raise ValueError(f"unimplemented kind: {self.kind!r}")

    def df_dg(self, h: float) -> float:
        if self.kind is NormalFormKind.SADDLE_NODE:
            return 1.0
        # all other kinds contain g only through the g*h term
        return h


@dataclass(frozen=True)
class ScalarTrajectory:
    """States h_0..h_{T-1} and their sensitivities dh_t/dg.

    sensitivities[0] is always 0: the initial condition does not depend
    on g.
    """

    states: tuple[float, ...]
    sensitivities: tuple[float, ...]

    def __post_init__(self):
        if len(self.states) != len(self.sensitivities) or not self.states:
            raise ValueError("states and sensitivities must have equal length >= 1")


def simulate(form: ScalarNormalForm, h0: float, T: int) -> ScalarTrajectory:
    """Iterate the map for T states (h_0 = h0), propagating dh_t/dg.

    The sensitivity obeys s_{t+1} = (df/dh)(h_t) * s_t + (df/dg)(h_t) with
    s_0 = 0. Raises SimulationOverflow instead of silently propagating
    non-finite values (threshold OVERFLOW_LIMIT).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not math.isfinite(h0):
        raise ValueError(f"initial condition must be finite, got {h0!r}")
    states = [h0]
    sens = [0.0]
    h, s = h0, 0.0
    for t in range(T - 1):
        try:
            s = form.df_dh(h) * s + form.df_dg(h)
            h = form.step(h)
        except OverflowError:
            raise SimulationOverflow(
                f"{form.kind.value} at g={form.g}, h0={h0}: overflow at step {t + 1}"
            ) from None
        if not math.isfinite(h) or abs(h) > OVERFLOW_LIMIT or not math.isfinite(s):
            raise SimulationOverflow(
                f"{form.kind.value} at g={form.g}, h0={h0}: "
                f"state/sensitivity left the finite range at step {t + 1}"
            )
        states.append(h)
        sens.append(s)
    return ScalarTrajectory(tuple(states), tuple(sens))


def sntk_norm(form: ScalarNormalForm, h0_batch: list[float], T: int) -> float:
    """Spectral norm of the rank-one kernel vv^T, averaged over the batch.

    v stacks the sensitivities of the T states following each initial
    condition (dh_t/dg for t = 1..T), so the result is sum_t s_t^2 per
    batch entry, divided by the batch size. For the stability flip this
    equals h0^2 * sum_{t=0}^{T-1} (t+1)^2 g^{2t}.
    """
    if not h0_batch:
        raise ValueError("h0_batch must be non-empty")
    total = 0.0
    for h0 in h0_batch:
        traj = simulate(form, h0, T + 1)
        total += sum(s * s for s in traj.sensitivities[1:])
    return total / len(h0_batch)


def closed_form_flip_norm(g: float, h0: float, T: int) -> float:
    """h0^2 * sum_{t=0}^{T-1} (t+1)^2 g^(2t), by direct summation.

    Direct summation avoids the removable singularity of the geometric
    closed form at g = 1.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    g2 = g * g
    power = 1.0
    total = 0.0
    for t in range(T):
        total += (t + 1) * (t + 1) * power
        power *= g2
    return h0 * h0 * total


@dataclass(frozen=True)
class H0Sampler:
    """Uniform initial-condition sampler on [low, high]."""

    low: float
    high: float
    count: int
    seed: int

    def draw(self) -> list[float]:
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.low > self.high:
            raise ValueError(f"need low <= high, got [{self.low}, {self.high}]")
        rng = random.Random(self.seed)
        return [rng.uniform(self.low, self.high) for _ in range(self.count)]


def landscape_sweep(
    kind: NormalFormKind,
    g_grid: list[float],
    sampler: H0Sampler,
    T: int,
) -> list[tuple[float, float]]:
    """Mean kernel norm over sampled initial conditions, per grid value of g.

    The same initial conditions (one draw from the sampler's seed) are
    reused at every g so curves differ only through the map. A grid point
    whose simulation overflows is recorded as NaN; the sweep continues.
    """
    if not g_grid:
        raise ValueError("g_grid must be non-empty")
    h0_batch = sampler.draw()
    rows = []
    for g in g_grid:
        form = ScalarNormalForm(kind, g)
        try:
            value = sntk_norm(form, h0_batch, T)
        except SimulationOverflow:
            value = math.nan
        rows.append((g, value))
    return rows
