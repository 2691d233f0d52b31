"""Equivalent circuit of the micro-pipette and the resulting hole fluxes.

The pipette liquid is modelled as a chain of resistors: conical segments
between consecutive hole heights, and one resistor per hole through the
wall (two symmetric holes per height).  A fixed current ``I_bar`` enters at
the top and leaves through the tip opening and the holes.

Lengths are in um, currents in uA, the conductivity in (Ohm m)^-1 as given;
only current ratios enter the fluxes, so the resistivity unit cancels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .jet import Jet2, as_jet, exp


class DegenerateGeometry(ValueError):
    pass


class DesignWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CircuitParams:
    sigma: float = 1.72
    theta: float = 22.0  # degrees
    d: float = 0.5
    s0: float = 1.5
    I_bar: float = 50.0
    beta: int = 2
    y_tip: float = 0.0
    y_up: float = 30.0

    def __post_init__(self):
        for name in ("sigma", "d", "s0", "I_bar"):
            if not getattr(self, name) > 0:
                raise DegenerateGeometry(f"{name} must be positive")
        if not (0.0 < self.theta < 45.0):
            raise DegenerateGeometry("theta must lie in (0, 45) degrees")
        if int(self.beta) != self.beta or self.beta < 1:
            raise DegenerateGeometry("beta must be a positive integer")

    @property
    def rho_res(self) -> float:
        return 1.0 / self.sigma

    @property
    def cot(self) -> float:
        return 1.0 / math.tan(math.radians(self.theta))


@dataclass(frozen=True)
class DesignVector:
    """Hole midpoints m_k and sizes s_k (heights measured from the tip).

    ``free_m`` / ``free_s`` select the entries that act as control
    variables; the control vector q lists free midpoints, then free sizes.
    """

    m: tuple = (10.0, 20.0)
    s: tuple = (1.0, 2.0)
    free_m: tuple | None = None
    free_s: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(float(v) for v in self.m))
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        if len(self.m) != len(self.s):
            raise ValueError("need one size per hole midpoint")
        n = len(self.m)
        fm = (True,) * n if self.free_m is None else tuple(bool(v) for v in self.free_m)
        fs = (False,) * n if self.free_s is None else tuple(bool(v) for v in self.free_s)
        object.__setattr__(self, "free_m", fm)
        object.__setattr__(self, "free_s", fs)

    @property
    def n_pairs(self) -> int:
        return len(self.m)

    @property
    def full(self) -> np.ndarray:
        return np.array(self.m + self.s)

    @property
    def free_mask(self) -> np.ndarray:
        return np.array(self.free_m + self.free_s, dtype=bool)

    @property
    def n_free(self) -> int:
        return int(self.free_mask.sum())

    @property
    def q(self) -> np.ndarray:
        return self.full[self.free_mask]

    def with_q(self, q) -> "DesignVector":
        full = self.full.copy()
        full[self.free_mask] = np.asarray(q, dtype=float)
        n = self.n_pairs
        return replace(self, m=tuple(full[:n]), s=tuple(full[n:]))

    def with_free(self, free_m=None, free_s=None) -> "DesignVector":
        return replace(
            self,
            free_m=self.free_m if free_m is None else tuple(free_m),
            free_s=self.free_s if free_s is None else tuple(free_s),
        )

    def violations(self, p: CircuitParams) -> list[str]:
        out = []
        for k, (m, s) in enumerate(zip(self.m, self.s)):
            if not (p.y_tip + s < m < p.y_up - s):
                out.append(f"hole {k + 1}: midpoint {m:g} outside ({p.y_tip + s:g}, {p.y_up - s:g})")
        for k in range(self.n_pairs - 1):
            if not (self.m[k] + self.s[k] < self.m[k + 1] - self.s[k + 1]):
                out.append(f"holes {k + 1} and {k + 2} overlap")
        return out

    def margins(self, p: CircuitParams, full: np.ndarray | None = None) -> np.ndarray:
        """Slack of every admissibility inequality (all > 0 iff admissible).

        The inequalities are linear in the full parameter vector (m, s).
        """
        v = self.full if full is None else np.asarray(full, dtype=float)
        n = self.n_pairs
        m, s = v[:n], v[n:]
        out = [s, m - s - p.y_tip, p.y_up - s - m]
        if n > 1:
            out.append((m[1:] - s[1:]) - (m[:-1] + s[:-1]))
        return np.concatenate(out) if n else np.zeros(0)

    def check(self, p: CircuitParams) -> bool:
        bad = self.violations(p)
        for msg in bad:
            warnings.warn(msg, DesignWarning, stacklevel=2)
        return not bad


def design_jets(design: DesignVector, q=None):
    """Midpoints and sizes as jets in the free variables."""
    full = design.full if q is None else design.with_q(q).full
    mask = design.free_mask
    n = int(mask.sum())
    jets = []
    k = 0
    for v, free in zip(full, mask):
        if free:
            jets.append(Jet2.variable(v, k, n))
            k += 1
        else:
            jets.append(Jet2.constant(v, n))
    N = design.n_pairs
    return jets[:N], jets[N:], n


def _finite(*vals):
    for v in vals:
        x = v.val if isinstance(v, Jet2) else v
        if not np.all(np.isfinite(x)) or np.any(np.asarray(x) <= 0):
            raise DegenerateGeometry("non-finite or non-positive resistance")


def hole_resistance(p: CircuitParams, s):
    return p.rho_res * p.d / (math.pi * s * s)


def cone_resistance(p: CircuitParams, a, b):
    """Resistance of the conical liquid column between heights a < b."""
    t = math.tan(math.radians(p.theta))
    return (p.rho_res / math.pi) * p.cot * (1.0 / (p.s0 + a * t) - 1.0 / (p.s0 + b * t))


def circuit_currents(p: CircuitParams, design: DesignVector, q=None) -> list[Jet2]:
    """Currents [I_0, I_1, ..., I_N] as jets in the free design variables.

    I_0 leaves through the tip, I_k through each of the two holes at height
    m_k.  Solved by walking the ladder circuit from the tip upwards
    (effective resistances) and splitting the current top-down.
    """
    m, s, n = design_jets(design, q)
    N = len(m)
    Ibar = Jet2.constant(p.I_bar, n)
    if N == 0:
        return [Ibar]
    Rh = [hole_resistance(p, sk) for sk in s]
    segs = [cone_resistance(p, 0.0 if k == 0 else m[k - 1], m[k]) for k in range(N)]
    segs = [as_jet(v, n) for v in segs]
    _finite(*Rh, *segs)
    # Z[k]: resistance of everything below node k (excluding its holes)
    Z = []
    below = None  # effective resistance of node k-1 incl. its holes
    for k in range(N):
        z = segs[k] if below is None else segs[k] + below
        Z.append(z)
        below = 1.0 / (1.0 / z + 2.0 / Rh[k])
    currents = [None] * (N + 1)
    I_in = Ibar
    for k in range(N - 1, -1, -1):
        denom = Rh[k] + 2.0 * Z[k]
        currents[k + 1] = I_in * Z[k] / denom
        I_in = I_in * Rh[k] / denom
    currents[0] = I_in
    return currents


def T_polynomial(p: CircuitParams, m1, m2, s1, s2):
    """Common denominator of the two-pair closed-form currents."""
    c, d, s0 = p.cot, p.d, p.s0
    return (
        s0**4 * c**3 * d**2
        + 2 * s0**3 * c**2 * d**2 * m1
        + 2 * d * s0**2 * c**3 * m1 * s1**2
        + s0**3 * c**2 * m2 * d**2
        + 2 * s0**2 * c * m2 * d**2 * m1
        + 2 * d * s0 * c**2 * m2 * m1 * s1**2
        + m1**2 * s0**2 * c * d**2
        + 2 * d * m1**2 * s0 * c**2 * s1**2
        + m1**2 * m2 * d**2 * s0
        + 2 * d * m1**2 * m2 * c * s1**2
        + 2 * c**3 * s2**2 * m2 * d * s0**2
        + 4 * c**2 * s2**2 * m2 * d * s0 * m1
        + 4 * c**3 * s2**2 * m2 * m1 * s1**2
        - 4 * c**3 * s2**2 * m1**2 * s1**2
        + 2 * c * m1**2 * d * s2**2 * m2
    )


def currents_closed_form(p: CircuitParams, design: DesignVector, q=None) -> list[Jet2]:
    """Two-pair currents (I_0, I_1, I_2) from the polynomial closed form."""
    if design.n_pairs != 2:
        raise ValueError("closed form covers exactly two hole pairs")
    (m1, m2), (s1, s2), n = design_jets(design, q)
    c, d, s0 = p.cot, p.d, p.s0
    T = T_polynomial(p, m1, m2, s1, s2)
    _finite(T)
    I0 = p.I_bar * (s0 * c + m1) ** 2 * (s0 * c + m2) * d**2 * s0 / T
    I1 = p.I_bar * (s0 * c + m1) * (s0 * c + m2) * d * c * m1 * s1**2 / T
    poly = (
        m2 * d * s0**2 * c**2
        + 2 * c * m2 * d * s0 * m1
        + 2 * m2 * s1**2 * c**2 * m1
        - 2 * s1**2 * c**2 * m1**2
        + d * m1**2 * m2
    )
    I2 = p.I_bar * poly * c * s2**2 / T
    return [I0, I1, I2]


def hole_fluxes(p: CircuitParams, design: DesignVector, q=None) -> list[Jet2]:
    """Current densities J_k = I_k / s_k (k = 0 is the tip opening)."""
    currents = circuit_currents(p, design, q)
    _, s, n = design_jets(design, q)
    sizes = [Jet2.constant(p.s0, n)] + s
    return [I / sk for I, sk in zip(currents, sizes)]


def flux_gtilde(y, p: CircuitParams, design: DesignVector, q=None, fluxes=None) -> Jet2:
    """Regularised wall flux sum_k J_k exp(-(y - m_k)^(2 beta) / (4 s_k^2)).

    ``y`` is the height above the tip (array).  The tip opening carries the
    separate constant flux J_0 and is not part of this sum.
    """
    y = np.asarray(y, dtype=float)
    m, s, n = design_jets(design, q)
    if fluxes is None:
        fluxes = hole_fluxes(p, design, q)
    total = Jet2.constant(np.zeros_like(y), n)
    two_beta = 2 * int(p.beta)
    for k in range(design.n_pairs):
        arg = (Jet2.constant(y, n) - m[k]) ** two_beta / (4.0 * s[k] * s[k])
        total = total + fluxes[k + 1] * exp(-arg)
    return total


def effective_half_width(p: CircuitParams, s: float) -> float:
    """Half width where the mollifier drops to exp(-1): (4 s^2)^(1/(2 beta))."""
    return (4.0 * s * s) ** (1.0 / (2 * p.beta))


def mollifier_mass(p: CircuitParams, s: float) -> float:
    """Integral over the real line of exp(-x^(2 beta) / (4 s^2))."""
    b = 2 * p.beta
    return 2.0 * math.gamma(1.0 + 1.0 / b) * (4.0 * s * s) ** (1.0 / b)
