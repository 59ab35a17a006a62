"""Densities, reduced spectra and information measures of wave-function snapshots.

All entropies are in bits. By default entropies use raw quantities (which
integrate to the CAP-depleted norm) while means and dispersions use
normalized densities.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import zherk
from scipy.signal import find_peaks

from . import kernels
from .constants import au_to_fs
from .grids import DIRICHLET

POP_CLAMP = 1e-12
DENSITY_FLOOR = 1e-30
RAW = "raw"
NORMALIZED = "normalized"


class AnalysisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# densities

@dataclass
class Densities:
    """Marginal densities of |psi|^2; raw ones integrate to ||psi||^2."""

    rho_e: np.ndarray
    rho_N: np.ndarray
    rho_ee: np.ndarray
    rho_eN: np.ndarray
    norm: float
    w_e: np.ndarray
    w_R: np.ndarray
    z: np.ndarray
    R: np.ndarray
    normalized: bool = False

    def as_normalized(self):
        if self.normalized:
            return self
        f = 1.0 / self.norm
        return Densities(self.rho_e * f, self.rho_N * f, self.rho_ee * f, self.rho_eN * f,
                         1.0, self.w_e, self.w_R, self.z, self.R, True)


def _axis_weights(wf):
    """Electronic and nuclear quadrature weights for the snapshot."""
    return wf.grid.electron.weights, wf.grid.nuclear.weights


def compute_densities(wf):
    """One- and two-body marginals of a snapshot (weighted contractions of |psi|^2)."""
    w_e, w_R = _axis_weights(wf)
    psi = wf.amplitudes
    if np.all(w_e == w_e[0]) and _walls_empty(wf):
        # fast path: uniform weights wherever psi can be nonzero
        r12, r1k = kernels.pair_marginals(psi)
        rho_ee = r12 * wf.grid.nuclear.spacing
        rho_eN = r1k * w_e[0]
    else:
        p = np.abs(psi) ** 2
        rho_ee = p @ w_R
        rho_eN = np.einsum("ijk,j->ik", p, w_e)
    rho_e = rho_eN @ w_R
    rho_N = w_e @ rho_eN
    norm = float(rho_e @ w_e)
    if not norm > 0:
        raise AnalysisError("zero-norm snapshot")
    return Densities(rho_e, rho_N, rho_ee, rho_eN, norm, w_e, w_R,
                     wf.grid.electron.points, wf.grid.nuclear.points)


def _walls_empty(wf):
    g = wf.grid.nuclear
    if g.boundary != DIRICHLET:
        return False
    a = wf.amplitudes
    return not (np.any(a[:, :, 0]) or np.any(a[:, :, -1]))


# ---------------------------------------------------------------------------
# reduced density matrix spectra

@dataclass
class SpectralData:
    """Natural populations of the electron and nuclear reduced density matrices."""

    lambda_e: np.ndarray
    lambda_N: np.ndarray
    orbitals_e: np.ndarray | None = None

    @property
    def trace_e(self):
        return float(np.sum(self.lambda_e))

    @property
    def trace_N(self):
        return float(np.sum(self.lambda_N))


def _hermitian_spectrum(G, want_vectors=False):
    G = np.triu(G) + np.triu(G, 1).conj().T
    if want_vectors:
        lam, vec = np.linalg.eigh(G)
        return lam[::-1], vec[:, ::-1]
    return np.linalg.eigvalsh(G)[::-1], None


def reduced_spectra(wf, orbitals=False, max_axis=2048):
    """Spectra of rho_e (electron 1 vs the rest) and rho_N (nuclei vs electrons).

    Weighted matricizations psi_(z1),(z2 R) and psi_(R),(z1 z2) are formed
    with square-root quadrature weights absorbed on every axis; their Gram
    matrices (sizes N_z and N_R) carry the nonzero spectra. Populations
    below ``POP_CLAMP`` in magnitude (round-off negatives) are set to 0.
    """
    n1, n2, n3 = wf.amplitudes.shape
    if n1 > max_axis:
        raise AnalysisError(f"electronic axis {n1} exceeds the matricization budget {max_axis}")
    w_e, w_R = _axis_weights(wf)
    uniform_e = np.all(w_e == w_e[0])
    uniform_R = np.all(w_R[1:-1] == w_R[1]) and _walls_empty(wf)
    if uniform_e and uniform_R:
        x = wf.amplitudes
        scale = float(w_e[0] * w_e[0] * wf.grid.nuclear.spacing)
        sw_e = None
    else:
        x = wf.amplitudes * np.sqrt(w_e[None, :, None] * w_R[None, None, :])
        x = x * np.sqrt(w_e)[:, None, None]
        scale = 1.0
        sw_e = np.sqrt(w_e)
    # zherk works on the transposed (Fortran-ordered) views, so nothing is copied
    G_e = zherk(scale, x.reshape(n1, n2 * n3).T, trans=2, lower=0)
    G_N = zherk(scale, x.reshape(n1 * n2, n3).T, trans=0, lower=0)
    try:
        lam_e, vec = _hermitian_spectrum(G_e, orbitals)
        lam_N, _ = _hermitian_spectrum(G_N)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError(f"spectral decomposition failed at t = {wf.time} a.u.") from exc
    lam_e = np.where(lam_e < POP_CLAMP, 0.0, lam_e)
    lam_N = np.where(lam_N < POP_CLAMP, 0.0, lam_N)
    orb = None
    if orbitals:
        # the Gram of conj-transposed data carries conjugated orbitals
        orb = vec.conj().T
        orb = orb / (np.sqrt(w_e)[None, :] if sw_e is None else sw_e[None, :])
    return SpectralData(lam_e, lam_N, orb)


# ---------------------------------------------------------------------------
# entropies and mutual informations

def von_neumann_entropy(populations):
    """-sum lambda log2 lambda over populations above the clamp (raw, not renormalized).

    Populations cannot exceed the norm (<= 1); values a few ulps above 1
    are round-off and are clipped so the entropy stays nonnegative.
    """
    lam = np.minimum(np.asarray(populations, dtype=float), 1.0)
    lam = lam[lam > POP_CLAMP]
    return float(-np.sum(lam * np.log2(lam))) + 0.0


def conditional_entropies(S_e, S_N):
    """(S_e|N, S_N|e, S_ee|N, S_eN|e) from the purity identities of the 3-body state."""
    return S_e - S_N, 0.0, -S_N, -S_e


def shannon_differential_entropy(density, weights, normalize=False):
    """-sum w rho log2 rho over points with rho above ``DENSITY_FLOOR``."""
    rho = np.asarray(density, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), rho.shape)
    if normalize:
        tot = float(np.sum(w * rho))
        if not tot > 0:
            raise AnalysisError("zero-integral density")
        rho = rho / tot
    return kernels.entropy_sum(rho, w, DENSITY_FLOOR)


def mutual_informations(S_e_vN, S_N_vN, S_e_Sh, S_N_Sh, S_ee_Sh, S_eN_Sh):
    """(I_ee^vN, I_eN^vN, I_ee^Sh, I_eN^Sh)."""
    return (2 * S_e_vN - S_N_vN, S_N_vN, 2 * S_e_Sh - S_ee_Sh, S_e_Sh + S_N_Sh - S_eN_Sh)


def expectation_and_dispersion(density, points, weights):
    """Mean and standard deviation of a density (normalized internally)."""
    rho = np.asarray(density, dtype=float)
    tot = float(np.sum(weights * rho))
    if not tot > 0:
        raise AnalysisError("zero-integral density")
    p = weights * rho / tot
    mean = float(np.sum(p * points))
    var = float(np.sum(p * (points - mean) ** 2))
    return mean, math.sqrt(max(var, 0.0))


# ---------------------------------------------------------------------------
# per-snapshot analysis and the trace

TRACE_COLUMNS = (
    "time_fs", "norm",
    "S_e_vN", "S_N_vN", "S_e_given_N", "S_N_given_e", "S_ee_given_N", "S_eN_given_e",
    "S_e_Sh", "S_N_Sh", "S_ee_Sh", "S_eN_Sh",
    "I_ee_vN", "I_eN_vN", "I_ee_Sh", "I_eN_Sh",
    "mean_z_e", "std_z_e", "mean_R", "std_R",
    "trace_e", "trace_N", "P_R_out", "symmetry_residual",
)


def analyze_snapshot(wf, n_populations=8, entropy_convention=RAW, R_out=3.0):
    """One InfoTrace row (dict) and the leading electronic populations.

    ``P_R_out`` is the raw nuclear probability beyond ``R_out``, a marker
    of the dissociating branch.
    """
    dens = compute_densities(wf)
    spec = reduced_spectra(wf)
    S_e = von_neumann_entropy(spec.lambda_e)
    S_N = von_neumann_entropy(spec.lambda_N)
    d = dens.as_normalized() if entropy_convention == NORMALIZED else dens
    w_e, w_R = dens.w_e, dens.w_R
    S_e_sh = shannon_differential_entropy(d.rho_e, w_e)
    S_N_sh = shannon_differential_entropy(d.rho_N, w_R)
    S_ee_sh = shannon_differential_entropy(d.rho_ee, w_e[:, None] * w_e[None, :])
    S_eN_sh = shannon_differential_entropy(d.rho_eN, w_e[:, None] * w_R[None, :])
    cond = conditional_entropies(S_e, S_N)
    mi = mutual_informations(S_e, S_N, S_e_sh, S_N_sh, S_ee_sh, S_eN_sh)
    mz, sz = expectation_and_dispersion(dens.rho_e, dens.z, w_e)
    mR, sR = expectation_and_dispersion(dens.rho_N, dens.R, w_R)
    out = dens.R > R_out
    row = dict(zip(TRACE_COLUMNS, (
        au_to_fs(wf.time), dens.norm, S_e, S_N, *cond, S_e_sh, S_N_sh, S_ee_sh, S_eN_sh, *mi,
        mz, sz, mR, sR, spec.trace_e, spec.trace_N,
        float(np.sum(dens.rho_N[out] * w_R[out])),
        float(wf.meta.get("symmetry_residual", wf.exchange_residual())))))
    pops = np.zeros(n_populations)
    k = min(n_populations, spec.lambda_e.size)
    pops[:k] = spec.lambda_e[:k]
    return row, pops


@dataclass
class InfoTrace:
    """Time-ordered analysis rows plus natural-orbital population rows."""

    rows: list = field(default_factory=list)
    populations: list = field(default_factory=list)

    def append(self, row, pops):
        self.rows.append(row)
        self.populations.append(np.asarray(pops, dtype=float))

    def merge_sorted(self):
        order = np.argsort([r["time_fs"] for r in self.rows], kind="stable")
        self.rows = [self.rows[i] for i in order]
        self.populations = [self.populations[i] for i in order]

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def times(self):
        return self.column("time_fs")

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path):
        _write_rows(path, TRACE_COLUMNS, [[r[c] for c in TRACE_COLUMNS] for r in self.rows])

    def write_populations_csv(self, path):
        k = max((p.size for p in self.populations), default=0)
        header = ["time_fs"] + [f"lambda_{j + 1}" for j in range(k)]
        _write_rows(path, header, [[r["time_fs"], *p] for r, p in zip(self.rows, self.populations)])

    @classmethod
    def read_csv(cls, path, populations_path=None):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [{k: float(v) for k, v in r.items()} for r in reader]
        pops = [np.zeros(0) for _ in rows]
        if populations_path is not None:
            data = np.loadtxt(populations_path, delimiter=",", skiprows=1, ndmin=2)
            pops = [row[1:] for row in data]
        return cls(rows, pops)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# collision times and retention

@dataclass(frozen=True)
class CollisionTimes:
    t_S: float
    t_Delta: float
    t_I: float
    flags: tuple = ()

    def spread(self):
        v = (self.t_S, self.t_Delta, self.t_I)
        return max(v) - min(v)


def _refined_extremum(t, y, k):
    """3-point parabolic refinement around index k (t may be non-uniform)."""
    t0, t1, t2 = t[k - 1:k + 2]
    y0, y1, y2 = y[k - 1:k + 2]
    d1 = (y1 - y0) / (t1 - t0)
    d2 = (y2 - y1) / (t2 - t1)
    curv = (d2 - d1) / (t2 - t0)
    if curv == 0:
        return float(t1)
    # vertex of the interpolating parabola
    tv = 0.5 * (t0 + t1) - d1 / (2 * curv)
    return float(min(max(tv, t0), t2))


def _window_extremum(t, y, lo, hi, kind, name, flags):
    sel = np.flatnonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))
    if sel.size < 3:
        raise AnalysisError(f"window [{lo}, {hi}] holds fewer than 3 samples")
    ys = y[sel] if kind == "max" else -y[sel]
    j = int(np.argmax(ys))  # first occurrence: ties go to the earliest time
    k = int(sel[j])
    if j == 0 or j == sel.size - 1:
        flags.append(f"{name}: extremum on window boundary (window too small)")
        return float(t[k])
    return _refined_extremum(t, y, k)


def _initial_transient_end(t, n):
    """Index where an initial norm-loss transient (packet tail inside a CAP) has decayed.

    That is the first local minimum of the loss rate -dN/dt; for a record
    without such a transient it is the first sample or close to it.
    """
    if t.size < 3:
        return 0
    rate = -np.gradient(n, t)
    rising = np.flatnonzero(rate[:-1] <= rate[1:])
    return int(rising[0]) if rising.size else 0


def default_window(trace, delta_t=2.0, norm_floor=0.99):
    """[t_peak - delta_t, t_peak + delta_t] around the S_e^vN maximum, clipped.

    The peak is searched, and the window ends, while the norm is at least
    ``norm_floor`` times its value after any initial CAP transient: raw
    entropies change as the CAP removes outgoing flux, and that bump can
    exceed the collision peak at low energies.
    """
    t = trace.times
    s = trace.column("S_e_vN")
    n = trace.column("norm")
    intact = n >= norm_floor * n[_initial_transient_end(t, n)]
    end = t[-1]
    if intact.any():
        s = np.where(intact, s, -np.inf)
        end = t[np.flatnonzero(intact)[-1]]
    k = int(np.argmax(s))
    return max(t[0], t[k] - delta_t), min(end, t[k] + delta_t)


def estimate_collision_times(trace, window=None):
    """t_col from max S_e^vN, min Delta z_e and min I_ee^Sh inside ``window`` (fs)."""
    if len(trace) < 3:
        raise AnalysisError("trace too short")
    t = trace.times
    lo, hi = window if window is not None else default_window(trace)
    if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12 or not lo < hi:
        raise AnalysisError(f"window [{lo}, {hi}] not inside the trace [{t[0]}, {t[-1]}]")
    flags = []
    tS = _window_extremum(t, trace.column("S_e_vN"), lo, hi, "max", "t_S", flags)
    tD = _window_extremum(t, trace.column("std_z_e"), lo, hi, "min", "t_Delta", flags)
    tI = _window_extremum(t, trace.column("I_ee_Sh"), lo, hi, "min", "t_I", flags)
    return CollisionTimes(tS, tD, tI, tuple(flags))


def entanglement_retention(trace, t_col, delta_t=2.0):
    """(delta_S(t_col - delta_t), delta_S(t_col + delta_t)) with S_e^vN interpolated linearly."""
    t = trace.times
    s = trace.column("S_e_vN")
    if t_col - delta_t < t[0] - 1e-12 or t_col + delta_t > t[-1] + 1e-12:
        raise AnalysisError("t_col +/- delta_t outside the trace")
    s_col = float(np.interp(t_col, t, s))
    if s_col < 1e-8:
        raise AnalysisError("S_e^vN(t_col) is too close to zero")
    return (float(np.interp(t_col - delta_t, t, s)) / s_col,
            float(np.interp(t_col + delta_t, t, s)) / s_col)


def norm_decay_stages(times, norms, rel_prominence=0.1, smooth_window=None, min_loss=1e-6):
    """Count distinct stages of norm loss as prominent peaks of -dN/dt.

    Returns the number of stages and the peak times. ``rel_prominence`` is
    relative to the largest loss rate. Maxima on the ends of the record
    are not counted, and a record losing less than ``min_loss`` overall
    has no stages (round-off only).
    """
    t = np.asarray(times, dtype=float)
    n = np.asarray(norms, dtype=float)
    if n[0] - n.min() < min_loss:
        return 0, np.zeros(0)
    rate = -np.gradient(n, t)
    if smooth_window:
        k = np.ones(smooth_window) / smooth_window
        rate = np.convolve(rate, k, mode="same")
    if not rate.max() > 0:
        return 0, np.zeros(0)
    # interior maxima only: a rate still rising at the end is not a finished stage
    peaks, _ = find_peaks(rate, prominence=rel_prominence * rate.max())
    return int(peaks.size), t[peaks]
