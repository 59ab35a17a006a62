"""Physical parameters and effective one-dimensional interactions.

The transverse-confinement-averaged Yukawa interaction between two
particles at longitudinal separation z is

    V(z) = scale * pi^(3/2) q_k q_l / (2 s) * exp(x^2 + c^2) * erfc(x + c),
    s = sqrt(2) l_c,  x = |z| / s,  c = s / (2 l_alpha).

Since exp(x^2 + c^2) erfc(x + c) = erfcx(x + c) exp(-2 x c), the product
is evaluated without ever forming exp(x^2). The Coulomb limit is c = 0.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erfcx

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """Raised when a target energy cannot be bracketed in the charge."""


@dataclass(frozen=True)
class ModelParams:
    """All constants of the e- + NeHe+ model (atomic units).

    Defaults are the published parameter set.
    """

    l_c: float = 1.25
    l_alpha: float = 1.986
    q_He: float = 1.453
    q_Ne: float = 1.307
    beta: float = 0.8
    m_Ne: float = 36785.339
    m_He: float = 7296.293
    q_e: float = 1.0

    def __post_init__(self):
        for name in ("l_c", "l_alpha", "m_Ne", "m_He"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if self.q_e != 1.0:
            raise ValueError("the electron charge is fixed to 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def m_red(self):
        return self.m_Ne * self.m_He / (self.m_Ne + self.m_He)

    @property
    def c_Ne(self):
        """Ne position in units of R, measured from the nuclear centre of mass."""
        return -self.m_red / self.m_Ne

    @property
    def c_He(self):
        return self.m_red / self.m_He

    # pair definitions ----------------------------------------------------
    def pair_e_He(self):
        return PairSpec(-self.q_e * self.q_He, self.l_alpha)

    def pair_e_Ne(self):
        return PairSpec(-self.q_e * self.q_Ne, self.l_alpha)

    def pair_ee(self):
        return PairSpec(self.q_e * self.q_e, None)

    def pair_NeHe(self):
        return PairSpec(self.q_Ne * self.q_He, self.l_alpha, self.beta)

    def with_charges(self, q_He=None, q_Ne=None):
        return replace(self, q_He=self.q_He if q_He is None else q_He,
                       q_Ne=self.q_Ne if q_Ne is None else q_Ne)

    # serialization: exactly the keys of the [model] config section
    KEYS = ("l_c", "l_alpha", "q_He", "q_Ne", "beta", "m_Ne", "m_He")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.KEYS}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PairSpec:
    """One interacting pair: charge product, Yukawa length (None = Coulomb), scale."""

    charge_product: float
    l_alpha: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.l_alpha is not None and not self.l_alpha > 0:
            raise ValueError("screening length must be strictly positive")


def effective_potential(z, pair, l_c):
    """Effective 1D interaction of ``pair`` at signed separation ``z``.

    Parameters
    ----------
    z : float or array_like
        Longitudinal separation (a.u.). Must be finite.
    pair : PairSpec
    l_c : float
        Confinement length (a.u.).

    Returns
    -------
    float or ndarray
        Energy in a.u.; even in z, finite at z = 0.
    """
    if not l_c > 0:
        raise ValueError("l_c must be positive")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite separation")
    s = math.sqrt(2.0) * l_c
    x = np.abs(z) / s
    c = 0.0 if pair.l_alpha is None else s / (2.0 * pair.l_alpha)
    pref = pair.scale * math.pi ** 1.5 * pair.charge_product / (2.0 * s)
    val = pref * erfcx(x + c) * np.exp(-2.0 * x * c)
    return val if val.ndim else float(val)


def total_potential_3d(z_e1, z_e2, R, params):
    """Sum of the six pair interactions at (z_e1, z_e2, R); broadcasts."""
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0):
        raise ValueError("R must be positive")
    lc = params.l_c
    z1 = np.asarray(z_e1, dtype=float)
    z2 = np.asarray(z_e2, dtype=float)
    zHe, zNe = params.c_He * R, params.c_Ne * R
    eHe, eNe = params.pair_e_He(), params.pair_e_Ne()
    v = effective_potential(z1 - z2, params.pair_ee(), lc)
    v = v + effective_potential(z1 - zHe, eHe, lc) + effective_potential(z1 - zNe, eNe, lc)
    v = v + effective_potential(z2 - zHe, eHe, lc) + effective_potential(z2 - zNe, eNe, lc)
    v = v + effective_potential(R, params.pair_NeHe(), lc)
    return v


def electron_nuclei_potential(z, R, params):
    """Potential felt by one electron from both cations (no cation-cation term)."""
    lc = params.l_c
    return (effective_potential(np.subtract(z, params.c_He * R), params.pair_e_He(), lc)
            + effective_potential(np.subtract(z, params.c_Ne * R), params.pair_e_Ne(), lc))


def atom_potential(charge, l_alpha, l_c):
    """Callable V(z) of one electron bound to a screened cation of ``charge``."""
    pair = PairSpec(-charge, l_alpha)
    return lambda z: effective_potential(z, pair, l_c)


def default_atom_grid():
    from .grids import Grid1D
    return Grid1D.from_spacing(-60.0, 60.0, 0.05)


def atom_ground_energy(charge, l_alpha, l_c, mass=1.0, grid=None, tol=1e-10):
    """Lowest eigenvalue of -1/(2m) d^2/dz^2 + V_eff(e, cation) on ``grid``."""
    from .eigensolve import solve_tise_1d
    grid = grid or default_atom_grid()
    sol = solve_tise_1d(atom_potential(charge, l_alpha, l_c), grid, mass, 1, tol=tol)
    return sol.energies[0]


def calibrate_charge(target_energy, l_alpha, l_c, mass=1.0, grid=None,
                     bracket=(0.5, 3.0), q_tol=1e-8, q_max=10.0):
    """Cation charge whose one-electron ground energy equals ``target_energy``.

    Bisection in q. The bracket is widened (down towards 0, up to
    ``q_max``) until it encloses the target; the ground energy must be
    strictly decreasing across it.

    Returns
    -------
    float
        Charge q (a.u.).

    Raises
    ------
    CalibrationError
        If ``target_energy`` is not negative or cannot be bracketed in (0, q_max].
    """
    if not target_energy < 0:
        raise CalibrationError(f"target energy must be negative (bound state), got {target_energy}")
    grid = grid or default_atom_grid()

    def energy(q):
        return atom_ground_energy(q, l_alpha, l_c, mass, grid)

    lo, hi = bracket
    e_lo, e_hi = energy(lo), energy(hi)
    history = [(lo, e_lo), (hi, e_hi)]
    while e_lo < target_energy and lo > 1e-6:
        lo *= 0.5
        e_lo = energy(lo)
        history.append((lo, e_lo))
    while e_hi > target_energy and hi < q_max:
        hi = min(2.0 * hi, q_max)
        e_hi = energy(hi)
        history.append((hi, e_hi))
    if not (e_lo >= target_energy >= e_hi):
        raise CalibrationError(
            f"target {target_energy} not bracketed for q in (0, {q_max}]; "
            f"evaluated (q, E): {history}")
    if not e_lo > e_hi:
        raise CalibrationError(f"ground energy not decreasing in q on [{lo}, {hi}]")
    while hi - lo > q_tol:
        mid = 0.5 * (lo + hi)
        e_mid = energy(mid)
        if not e_hi <= e_mid <= e_lo:
            raise CalibrationError(f"non-monotone ground energy near q = {mid}")
        if e_mid > target_energy:
            lo, e_lo = mid, e_mid
        else:
            hi, e_hi = mid, e_mid
    q = 0.5 * (lo + hi)
    log.info("calibrated q = %.9f for target %.6f (l_alpha=%g)", q, target_energy, l_alpha)
    return q
