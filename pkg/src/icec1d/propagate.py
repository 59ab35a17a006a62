"""Target relaxation, symmetrized initial states and split-step propagation.

Array layout of the three-coordinate wave function is (z_e1, z_e2, R),
C order (R fastest). Electronic axes are periodic Fourier grids; the R
axis is a Dirichlet grid whose two wall nodes are kept at zero, with the
kinetic operator applied in the sine (DST-I) basis of its interior nodes.
"""
import json
import logging
import math
import pathlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.linalg import eigh_tridiagonal

from . import kernels
from .constants import au_to_fs
from .eigensolve import solve_tise_1d
from .grids import DIRICHLET, PERIODIC, Grid1D, Grid3D
from .model import effective_potential, electron_nuclei_potential

log = logging.getLogger(__name__)

SYMMETRIC = "symmetric"
ANTISYMMETRIC = "antisymmetric"
NO_SYMMETRY = "none"
_SIGNS = {SYMMETRIC: 1.0, ANTISYMMETRIC: -1.0}


class PropagationError(RuntimeError):
    pass


class RelaxationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# absorber and projectile settings

@dataclass(frozen=True)
class CapSpec:
    """Quadratic complex absorbing potentials.

    ``z_left``/``z_right`` are the electronic onsets and ``R_onset`` the
    nuclear one; None switches that end off. ``eta_R`` defaults to ``eta``.
    """

    eta: float = 1e-3
    z_left: float | None = -100.0
    z_right: float | None = 100.0
    R_onset: float | None = 4.8
    eta_R: float | None = None

    def __post_init__(self):
        if not self.eta > 0 or (self.eta_R is not None and not self.eta_R > 0):
            raise ValueError("CAP strength must be positive")
        if self.z_left is not None and self.z_right is not None and self.z_left >= self.z_right:
            raise ValueError("left CAP onset must lie left of the right onset")

    @property
    def eta_nuclear(self):
        return self.eta if self.eta_R is None else self.eta_R

    @classmethod
    def none(cls):
        return cls(1.0, None, None, None)

    def to_dict(self):
        return {"eta": self.eta, "z_left": self.z_left, "z_right": self.z_right,
                "R_onset": self.R_onset, "eta_R": self.eta_R}


def _check_onset(onset, grid):
    if onset is not None and not grid.z_min < onset < grid.z_max:
        raise ValueError(f"CAP onset {onset} is not strictly inside ({grid.z_min}, {grid.z_max})")


def cap_profile(grid, spec, axis="electronic"):
    """Complex CAP values on ``grid``: 0 before onset, -i eta d^2 beyond.

    ``axis`` selects the electronic (two-sided) or nuclear (large-R) ends.
    """
    z = grid.points
    w = np.zeros(z.size, dtype=complex)
    if axis == "electronic":
        ends = ((spec.z_left, -1.0), (spec.z_right, 1.0))
        eta = spec.eta
    elif axis == "nuclear":
        ends = ((spec.R_onset, 1.0),)
        eta = spec.eta_nuclear
    else:
        raise ValueError(f"unknown axis {axis!r}")
    for onset, side in ends:
        if onset is None:
            continue
        _check_onset(onset, grid)
        d = np.maximum(side * (z - onset), 0.0)
        w -= 1j * eta * d * d
    return w


@dataclass(frozen=True)
class ProjectileSpec:
    """Incoming Gaussian electron.

    The momentum-space Gaussian (mean p0, standard deviation s) is fixed by
    matching exactly the mean kinetic energy <p^2/2> = epsilon_in and its
    standard deviation = delta_epsilon. The position density then has
    standard deviation 1/(2 s).
    """

    epsilon_in: float
    delta_epsilon: float = 0.06
    z0: float = -60.0
    direction: int = 1

    def __post_init__(self):
        if not self.epsilon_in > 0 or not self.delta_epsilon > 0:
            raise ValueError("epsilon_in and delta_epsilon must be positive")
        if 4 * self.epsilon_in ** 2 < 2 * self.delta_epsilon ** 2:
            raise ValueError("energy spread too large for a Gaussian of this mean energy")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")

    def momentum_parameters(self):
        """(p0, s): mean and standard deviation of the momentum density."""
        e, de = self.epsilon_in, self.delta_epsilon
        a = 2 * e - math.sqrt(4 * e * e - 2 * de * de)
        return self.direction * math.sqrt(2 * e - a), math.sqrt(a)

    @property
    def width(self):
        """Standard deviation of the position density (a.u.)."""
        return 1.0 / (2.0 * self.momentum_parameters()[1])

    def wavefunction(self, z):
        p0, _ = self.momentum_parameters()
        sig = self.width
        g = np.exp(-((z - self.z0) ** 2) / (4 * sig * sig) + 1j * p0 * (z - self.z0))
        return g * (2 * math.pi * sig * sig) ** -0.25


# ---------------------------------------------------------------------------
# wave function container and snapshot I/O

@dataclass
class WaveFunction3D:
    """Complex amplitudes on a Grid3D with time (a.u.) and norm history."""

    amplitudes: np.ndarray
    grid: Grid3D
    time: float = 0.0
    symmetry: str = NO_SYMMETRY
    norm_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.amplitudes.shape != self.grid.shape:
            raise ValueError(f"amplitude shape {self.amplitudes.shape} != grid {self.grid.shape}")
        if self.symmetry not in (SYMMETRIC, ANTISYMMETRIC, NO_SYMMETRY):
            raise ValueError(f"unknown symmetry {self.symmetry!r}")

    @property
    def cell_volume(self):
        return self.grid.electron.spacing ** 2 * self.grid.nuclear.spacing

    def norm2(self):
        """||psi||^2 (wall nodes of R are zero, so uniform weights are exact)."""
        return kernels.norm2(self.amplitudes) * self.cell_volume

    def exchange_residual(self):
        """||psi(z1,z2,R) -/+ psi(z2,z1,R)|| / ||psi|| for the declared symmetry."""
        if self.symmetry == NO_SYMMETRY:
            return 0.0
        r = kernels.exchange_residual(self.amplitudes, _SIGNS[self.symmetry])
        return math.sqrt(r / kernels.norm2(self.amplitudes))

    def copy(self):
        return WaveFunction3D(self.amplitudes.copy(), self.grid, self.time, self.symmetry,
                              list(self.norm_history), dict(self.meta))


def save_snapshot(wf, directory, name, params_hash=""):
    """Raw little-endian complex128 (z_e1 slowest, R fastest) plus JSON manifest."""
    d = pathlib.Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(wf.amplitudes, dtype="<c16").tofile(d / f"{name}.c16")
    manifest = {"file": f"{name}.c16", "grids": wf.grid.to_dict(), "shape": list(wf.grid.shape),
                "time_au": wf.time, "time_fs": au_to_fs(wf.time), "norm": wf.norm2(),
                "symmetry": wf.symmetry, "params_hash": params_hash, "meta": wf.meta}
    (d / f"{name}.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_snapshot(directory, name):
    d = pathlib.Path(directory)
    manifest = json.loads((d / f"{name}.json").read_text())
    grid = Grid3D.from_dict(manifest["grids"])
    raw = np.fromfile(d / manifest["file"], dtype="<c16")
    if raw.size != grid.total_points:
        raise ValueError(f"snapshot {name}: {raw.size} values, expected {grid.total_points}")
    return WaveFunction3D(raw.reshape(grid.shape).astype(complex), grid, manifest["time_au"],
                          manifest["symmetry"], meta=manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# one-dimensional kinetic operators

def fourier_wavenumbers(grid):
    if grid.boundary != PERIODIC:
        raise ValueError("Fourier kinetic needs a periodic grid")
    return 2 * math.pi * np.fft.fftfreq(grid.n_points, grid.spacing)


def sine_basis(grid):
    """Orthonormal DST-I matrix S (symmetric, S @ S = 1) and kinetic eigenvalues / mass.

    Acts on the interior nodes of a Dirichlet grid; returns (S, k^2) with
    k_n = n pi / L.
    """
    if grid.boundary != DIRICHLET:
        raise ValueError("sine basis needs a Dirichlet grid")
    n = grid.n_points - 2
    j = np.arange(1, n + 1)
    S = math.sqrt(2.0 / (n + 1)) * np.sin(math.pi * np.outer(j, j) / (n + 1))
    k = math.pi * j / grid.length
    return S, k * k


def sine_kinetic_matrix(grid, mass):
    S, k2 = sine_basis(grid)
    return (S * (k2 / (2 * mass))) @ S


# ---------------------------------------------------------------------------
# two-dimensional target (one electron + nuclei)

def target_potential(params, grid_e, grid_R):
    """V(z, R) on (electronic points) x (interior R points), including cation repulsion."""
    z = grid_e.points[:, None]
    R = grid_R.points[grid_R.interior][None, :]
    return (electron_nuclei_potential(z, R, params)
            + effective_potential(R, params.pair_NeHe(), params.l_c))


class TargetHamiltonian:
    """H = T_e + T_N + V on the (periodic z) x (interior R) product grid."""

    def __init__(self, params, grid_e, grid_R):
        self.grid_e, self.grid_R = grid_e, grid_R
        self.ke = fourier_wavenumbers(grid_e) ** 2 / 2.0
        self.TR = sine_kinetic_matrix(grid_R, params.m_red)
        self.V = target_potential(params, grid_e, grid_R)
        self.shape = self.V.shape
        self.dA = grid_e.spacing * grid_R.spacing

    def apply(self, phi):
        te = scipy.fft.ifft(self.ke[:, None] * scipy.fft.fft(phi, axis=0), axis=0).real
        return te + phi @ self.TR + self.V * phi

    def energy(self, phi):
        return float(np.vdot(phi, self.apply(phi)).real / np.vdot(phi, phi).real)

    def norm(self, phi):
        return math.sqrt(float(np.vdot(phi, phi).real) * self.dA)


def lanczos_expm(apply_h, v, tau, m_max=80, tol=1e-14):
    """exp(-tau H) v for symmetric H by a Lanczos (Krylov) projection.

    Full reorthogonalization; the Krylov space grows until the last
    expansion coefficient falls below ``tol`` relative to the first.
    """
    beta0 = math.sqrt(float(np.vdot(v, v).real))
    basis = [v / beta0]
    alpha, beta = [], []
    for j in range(m_max):
        w = apply_h(basis[j])
        alpha.append(float(np.vdot(basis[j], w).real))
        for q in basis:
            w = w - np.vdot(q, w).real * q
        for q in basis:  # second pass for stability
            w = w - np.vdot(q, w).real * q
        b = math.sqrt(float(np.vdot(w, w).real))
        theta, Q = eigh_tridiagonal(np.array(alpha), np.array(beta)) if beta else (
            np.array(alpha), np.ones((1, 1)))
        y = Q @ (np.exp(-tau * (theta - theta[0])) * Q[0])
        if b < 1e-300 or (j >= 3 and abs(y[-1]) * b < tol * abs(y[0])):
            break
        beta.append(b)
        basis.append(w / b)
    else:
        raise RelaxationError("Lanczos exponential did not converge; reduce dtau")
    out = sum(c * q for c, q in zip(y, basis))
    # the shift by theta[0] only rescales; the caller renormalizes
    return beta0 * out


@dataclass
class TargetState:
    """Relaxed target Phi(z, R) on (electronic points) x (all R points, walls = 0)."""

    phi: np.ndarray
    energy: float
    grid_e: Grid1D
    grid_R: Grid1D
    history: list

    def mean_R(self):
        rho = np.sum(np.abs(self.phi) ** 2, axis=0) * self.grid_e.spacing
        return float(np.sum(rho * self.grid_R.points * self.grid_R.weights))


def fourier_kinetic_matrix(grid, mass=1.0):
    """Dense matrix of the FFT kinetic operator on a periodic grid."""
    k = fourier_wavenumbers(grid)
    eye = np.eye(grid.n_points)
    return scipy.fft.ifft((k * k / (2 * mass))[:, None] * scipy.fft.fft(eye, axis=0), axis=0).real


def bo_seed(params, grid_e, grid_R):
    """Born-Oppenheimer product xi_0(z; R) chi_0(R) in the propagation discretization.

    Electronic states come from the Fourier-grid Hamiltonian at each
    interior R node, the nuclear state from the sine-basis Hamiltonian on
    the resulting ground curve, so the seed lives in the same space that
    the relaxation flow acts on.
    """
    Rs = grid_R.points[grid_R.interior]
    Te = fourier_kinetic_matrix(grid_e)
    z = grid_e.points
    xi = np.empty((z.size, Rs.size))
    eps = np.empty(Rs.size)
    prev = None
    for k, R in enumerate(Rs):
        h = Te + np.diag(electron_nuclei_potential(z, R, params))
        w, v = scipy.linalg.eigh(h, subset_by_index=[0, 0])
        v = v[:, 0]
        if prev is None:
            v = v * np.sign(v[np.argmax(np.abs(v))])
        elif v @ prev < 0:
            v = -v
        prev = v
        xi[:, k] = v
        eps[k] = w[0] + effective_potential(R, params.pair_NeHe(), params.l_c)
    TR = sine_kinetic_matrix(grid_R, params.m_red)
    _, chi = scipy.linalg.eigh(TR + np.diag(eps), subset_by_index=[0, 0])
    return xi * chi[:, 0][None, :]


def relax_target(params, grid_e, grid_R, seed=None, tau_total=82.684, dtau=0.413,
                 energy_tol=1e-8, max_tau_factor=10.0):
    """Imaginary-time relaxation of the one-electron target.

    Each step applies exp(-H dtau) exactly (to Krylov accuracy) and
    renormalizes, so the energy is nonincreasing. Relaxation stops once
    successive energies differ by less than ``energy_tol``; ``tau_total``
    is the nominal horizon, and the flow continues (with a warning) up to
    ``max_tau_factor`` times it before giving up.

    Raises
    ------
    RelaxationError
        If the energy increases between steps or convergence is not reached.
    """
    H = TargetHamiltonian(params, grid_e, grid_R)
    phi = bo_seed(params, grid_e, grid_R) if seed is None else np.array(seed, dtype=float)
    if phi.shape == (grid_e.n_points, grid_R.n_points):
        phi = phi[:, grid_R.interior]
    if phi.shape != H.shape:
        raise ValueError(f"seed shape {phi.shape} does not match target grid {H.shape}")
    phi = phi / H.norm(phi)
    e = H.energy(phi)
    history = [(0.0, e)]
    tau, n_steps = 0.0, 0
    max_steps = int(math.ceil(max_tau_factor * tau_total / dtau))
    while True:
        phi = lanczos_expm(H.apply, phi, dtau)
        phi /= H.norm(phi)
        tau += dtau
        n_steps += 1
        e_new = H.energy(phi)
        history.append((tau, e_new))
        if e_new > e + 1e-12 * max(1.0, abs(e)):
            raise RelaxationError(
                f"energy rose from {e!r} to {e_new!r} at tau = {tau}; use a smaller dtau")
        done = e - e_new < energy_tol
        e = e_new
        if done:
            break
        if n_steps >= max_steps:
            raise RelaxationError(f"energy not stationary to {energy_tol} after tau = {tau}")
    if tau > tau_total + 1e-9:
        warnings.warn(f"relaxation needed tau = {tau:.3f} > nominal {tau_total}", stacklevel=2)
    full = np.zeros((grid_e.n_points, grid_R.n_points))
    full[:, grid_R.interior] = phi
    if full[np.unravel_index(np.argmax(np.abs(full)), full.shape)] < 0:
        full = -full
    return TargetState(full, e, grid_e, grid_R, history)


# ---------------------------------------------------------------------------
# initial scattering state

def build_initial_state(target, projectile, symmetry=SYMMETRIC, overlap_warn=1e-8):
    """psi = [phi(z1) Phi(z2,R) +/- phi(z2) Phi(z1,R)] / sqrt(2 (1 +/- O)).

    O = int dR |<phi|Phi(., R)>|^2 is the exchange overlap term. The result
    is finally rescaled by its quadrature norm, so ||psi|| = 1 to round-off.
    """
    if symmetry not in _SIGNS:
        raise ValueError("initial state must be symmetric or antisymmetric")
    sign = _SIGNS[symmetry]
    ge, gR = target.grid_e, target.grid_R
    grid = Grid3D(ge, gR)
    z = ge.points
    sig = projectile.width
    edge_gap = min(projectile.z0 - ge.z_min, ge.z_max - projectile.z0)
    if edge_gap < 5 * sig:
        warnings.warn(f"projectile only {edge_gap / sig:.1f} widths from the domain edge",
                      stacklevel=2)
    rho_t = np.sum(target.phi ** 2, axis=1) * gR.spacing
    support = z[rho_t > 1e-10 * rho_t.max()]
    gap = support.min() - projectile.z0 if projectile.direction > 0 else projectile.z0 - support.max()
    if gap < 5 * sig:
        warnings.warn(f"projectile only {gap / sig:.1f} widths from the target support",
                      stacklevel=2)
    phi = projectile.wavefunction(z)
    Phi = target.phi
    ovl = (phi.conj() @ Phi) * ge.spacing  # per R
    O = float(np.sum(np.abs(ovl) ** 2 * gR.weights))
    if O > overlap_warn:
        warnings.warn(f"projectile-target overlap {O:.2e} exceeds {overlap_warn:g}", stacklevel=2)
    psi = np.empty(grid.shape, dtype=complex)
    for k in range(gR.n_points):
        a = np.outer(phi, Phi[:, k])
        psi[:, :, k] = a + sign * a.T
    psi /= math.sqrt(2.0 * (1.0 + sign * O))
    wf = WaveFunction3D(psi, grid, 0.0, symmetry, meta={"overlap": O})
    wf.amplitudes /= math.sqrt(wf.norm2())
    return wf


# ---------------------------------------------------------------------------
# real-time split-step propagation

class SplitStepPropagator:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2) with complex V.

    The CAP enters V as its negative imaginary part, so every potential
    factor is contractive. Adjacent half steps of consecutive steps are
    fused into one full potential step; the state is completed with a
    final half step whenever it is handed out.
    """

    def __init__(self, grid, params, caps, dt, threads=None):
        if grid.electron.boundary != PERIODIC:
            raise ValueError("electronic axes must be periodic")
        self.grid, self.params, self.caps, self.dt = grid, params, caps, dt
        self.threads = threads
        ge, gR = grid.electron, grid.nuclear
        z, R = ge.points, gR.points
        Rs = np.where(R > 0, R, gR.spacing)  # wall at R = 0 carries no amplitude
        self.v_eN = electron_nuclei_potential(z[:, None], Rs[None, :], params)
        self.v_ee = effective_potential(z[:, None] - z[None, :], params.pair_ee(), params.l_c)
        self.v_NN = effective_potential(Rs, params.pair_NeHe(), params.l_c)
        self.w_e = cap_profile(ge, caps, "electronic")
        self.w_R = cap_profile(gR, caps, "nuclear")
        k = self.k = fourier_wavenumbers(ge)
        self.k_max = float(np.abs(k).max())
        phase = dt * self.k_max ** 2 / 2
        if phase >= 0.5:
            warnings.warn(f"dt k_max^2/2 = {phase:.3f} rad exceeds 0.5; splitting error grows",
                          stacklevel=2)
        self.kin_e = np.exp(-0.5j * k * k * dt)
        S, k2 = sine_basis(gR)
        self.kin_R = (S * np.exp(-1j * k2 / (2 * params.m_red) * dt)) @ S
        self._factors = {0.5: self._potential_factors(0.5 * dt), 1.0: self._potential_factors(dt)}
        self.cell_volume = ge.spacing ** 2 * gR.spacing

    def _potential_factors(self, tau):
        a = np.exp(-1j * (self.v_eN + self.w_e[:, None]) * tau)
        b = np.exp(-1j * self.v_ee * tau)
        c = np.exp(-1j * (self.v_NN + self.w_R) * tau)
        c[0] = c[-1] = 0.0  # keep the Dirichlet walls at zero
        return np.ascontiguousarray(a), np.ascontiguousarray(b), np.ascontiguousarray(c)

    def potential(self, psi, fraction):
        """Apply exp(-i V fraction dt) in place; returns ||psi||^2 afterwards."""
        a, b, c = self._factors[fraction]
        return kernels.potential_phase(psi, a, b, c) * self.cell_volume

    def kinetic(self, psi):
        """Apply exp(-i T dt) in place (electronic FFTs, then the R sine basis)."""
        tmp = scipy.fft.fft2(psi, axes=(0, 1), overwrite_x=True, workers=self.threads)
        kernels.kinetic_phase(tmp, self.kin_e, self.kin_e)
        tmp = scipy.fft.ifft2(tmp, axes=(0, 1), overwrite_x=True, workers=self.threads)
        if tmp is not psi:
            psi[...] = tmp
            del tmp
        inner = slice(1, -1)
        U = self.kin_R.T
        for i in range(psi.shape[0]):
            psi[i, :, inner] = psi[i, :, inner] @ U

    def energy(self, psi):
        """<H> / <psi|psi> with the real potential (CAP excluded); small grids only."""
        k2 = self.k * self.k / 2
        kin = scipy.fft.ifft2(scipy.fft.fft2(psi, axes=(0, 1))
                              * (k2[:, None, None] + k2[None, :, None]), axes=(0, 1))
        TR = sine_kinetic_matrix(self.grid.nuclear, self.params.m_red)
        kin[:, :, 1:-1] += psi[:, :, 1:-1] @ TR
        v = (self.v_eN[:, None, :] + self.v_eN[None, :, :] + self.v_ee[:, :, None]
             + self.v_NN[None, None, :])
        return float(np.vdot(psi, kin + v * psi).real / np.vdot(psi, psi).real)


def propagate(psi, params, caps, dt, t_final, output_stride, threads=None, copy=True,
              stop_norm=None, max_norm_increase=1e-10):
    """Advance ``psi`` (in place) to ``t_final`` (a.u.), yielding snapshots.

    Yields the initial state first and then every ``output_stride`` steps
    (and at the final step). Each step's norm is appended to
    ``psi.norm_history`` as (t, ||psi||^2); inside fused stretches it is
    the norm after the fused potential factor, stamped at mid-step.

    Parameters
    ----------
    copy : bool
        Yield independent copies (default) or the live state, which is
        only valid until the generator is resumed.
    stop_norm : float, optional
        Stop early once ||psi||^2 drops below this value.

    Raises
    ------
    PropagationError
        On a norm increase above ``max_norm_increase`` per step or a NaN.
    """
    prop = SplitStepPropagator(psi.grid, params, caps, dt, threads)
    n_steps = int(round((t_final - psi.time) / dt))
    if n_steps < 0:
        raise ValueError("t_final precedes the current time")
    state = psi.amplitudes
    t0 = psi.time
    norm = psi.norm2()
    psi.norm_history.append((psi.time, norm))
    psi.meta["symmetry_residual"] = psi.exchange_residual()
    yield psi.copy() if copy else psi
    open_half = False
    for step in range(1, n_steps + 1):
        new = prop.potential(state, 1.0 if open_half else 0.5)
        prop.kinetic(state)
        emit = step % output_stride == 0 or step == n_steps
        stop = False
        if emit:
            new = prop.potential(state, 0.5)
            open_half = False
        else:
            open_half = True
        t = t0 + step * dt
        if not math.isfinite(new):
            raise PropagationError(f"non-finite norm at step {step} (t = {t} a.u.)")
        if new - norm > max_norm_increase:
            raise PropagationError(
                f"norm increased by {new - norm:.3e} at step {step}; check CAP sign or dt")
        norm = new
        # a fused step has absorbed only up to the middle of the step
        psi.norm_history.append((t if emit else t - 0.5 * dt, norm))
        if stop_norm is not None and norm < stop_norm:
            if not emit:
                prop.potential(state, 0.5)  # close the half step before handing out
                norm = psi.norm2()
                psi.norm_history[-1] = (t, norm)
            emit = stop = True
        if emit:
            psi.time = t
            psi.meta["symmetry_residual"] = psi.exchange_residual()
            yield psi.copy() if copy else psi
        if stop:
            break
