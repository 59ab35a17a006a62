"""Born-Oppenheimer potential energy curves of the one-electron NeHe++ + e- ion."""
import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .eigensolve import EigenSolution, EigenSolveError, solve_tise_1d
from .grids import Grid1D
from .model import effective_potential, electron_nuclei_potential

log = logging.getLogger(__name__)


class PecError(RuntimeError):
    pass


@dataclass
class PecTable:
    """Curves eps_n(R) and (optionally) electronic states xi_n(z; R).

    ``electronic_states`` has shape (n_R, n_curves, n_z) or is None.
    """

    R_grid: np.ndarray
    curves: np.ndarray  # (n_curves, n_R)
    electronic_grid: Grid1D
    electronic_states: np.ndarray | None = None

    @property
    def n_curves(self):
        return self.curves.shape[0]

    def shifted(self, const):
        return PecTable(self.R_grid, self.curves + const, self.electronic_grid,
                        self.electronic_states)


@dataclass(frozen=True)
class PecDerived:
    R_eq: float
    eps0_eq: float
    delta_eps_01: float
    delta_eps_02: float
    dissociation_limits: tuple

    def to_dict(self):
        return {"R_eq": self.R_eq, "eps0_eq": self.eps0_eq, "delta_eps_01": self.delta_eps_01,
                "delta_eps_02": self.delta_eps_02,
                "dissociation_limits": list(self.dissociation_limits)}


def default_electronic_grid():
    """Dirichlet (-80, 80), spacing 0.05: converges the lowest curves to ~1e-4."""
    return Grid1D.from_spacing(-80.0, 80.0, 0.05)


def default_R_grid():
    return np.round(np.arange(391) * 0.05 + 0.5, 10)


def cation_repulsion(R, params):
    return effective_potential(R, params.pair_NeHe(), params.l_c)


def scan_pec(params, R_grid=None, n_curves=6, electronic_grid=None, keep_states=False,
             tol=1e-9):
    """Lowest ``n_curves`` electronic energies (plus cation repulsion) on ``R_grid``.

    Each state's sign is chosen so its overlap with the same state at the
    previous R is positive.

    Raises
    ------
    PecError
        On a failed single-R solve; the message names the offending R.
    """
    R_grid = default_R_grid() if R_grid is None else np.asarray(R_grid, dtype=float)
    grid = electronic_grid or default_electronic_grid()
    if n_curves < 3:
        raise ValueError("n_curves must be at least 3")
    if np.any(R_grid <= 0) or np.any(np.diff(R_grid) <= 0):
        raise ValueError("R grid must be positive and strictly ascending")
    curves = np.empty((n_curves, R_grid.size))
    states = np.empty((R_grid.size, n_curves, grid.n_points)) if keep_states else None
    prev = None
    for k, R in enumerate(R_grid):
        try:
            sol = solve_tise_1d(lambda z: electron_nuclei_potential(z, R, params), grid, 1.0,
                                n_curves, tol)
        except (EigenSolveError, ValueError) as exc:
            raise PecError(f"electronic solve failed at R = {R}: {exc}") from exc
        curves[:, k] = sol.energies + cation_repulsion(R, params)
        vec = sol.states
        if prev is not None:
            s = np.sign(np.einsum("ij,ij->i", vec, prev))
            s[s == 0] = 1.0
            vec = vec * s[:, None]
        prev = vec
        if keep_states:
            # normalize under the grid quadrature weights for downstream consumers
            states[k] = vec / np.sqrt(vec ** 2 @ grid.weights)[:, None]
    return PecTable(R_grid, curves, grid, states)


def _parabola_vertex(x, y):
    """Vertex of the parabola through three equally spaced points."""
    h = x[1] - x[0]
    denom = y[0] - 2 * y[1] + y[2]
    if denom <= 0:
        return x[1], y[1]
    dx = 0.5 * h * (y[0] - y[2]) / denom
    return x[1] + dx, y[1] - 0.25 * (y[0] - y[2]) * dx / h


def derive_thresholds(table):
    """R_eq (parabolic refinement), vertical gaps there, and dissociation limits."""
    e0 = table.curves[0]
    k = int(np.argmin(e0))
    if k == 0 or k == e0.size - 1:
        raise PecError("unbound ground curve: no interior minimum on the scan")
    R_eq, e_eq = _parabola_vertex(table.R_grid[k - 1:k + 2], e0[k - 1:k + 2])
    j = int(np.argmin(np.abs(table.R_grid - R_eq)))
    gaps = table.curves[:, j] - table.curves[0, j]
    return PecDerived(float(R_eq), float(e_eq), float(gaps[1]), float(gaps[2]),
                      tuple(float(v) for v in table.curves[:, -1]))


def vibrational_states(curve, R_grid, m_red, n_states=4):
    """Nuclear eigenstates on one curve, Dirichlet at both ends of ``R_grid``.

    Only states below the curve's last value (its dissociation limit on the
    scan) are kept. An empty solution is returned, with a warning, if none
    is bound.
    """
    R_grid = np.asarray(R_grid, dtype=float)
    grid = Grid1D(R_grid.size, float(R_grid[0]), float(R_grid[-1]))
    if not np.allclose(grid.points, R_grid, rtol=0, atol=1e-9 * grid.length):
        raise ValueError("vibrational solve needs a uniform R grid")
    sol = solve_tise_1d(np.asarray(curve, dtype=float), grid, m_red, n_states)
    bound = sol.energies < curve[-1]
    if not bound.any():
        log.warning("no bound vibrational state below the dissociation limit %g", curve[-1])
    nb = int(bound.sum())
    return EigenSolution(sol.energies[:nb], sol.states[:nb], grid, nb,
                         sol.residual_norms[:nb], mass_matrix=sol.mass_matrix)


def harmonic_frequency(table, m_red, n=0):
    """sqrt(eps_n''(R_eq)/m_red) from a centered second difference at the grid minimum."""
    e = table.curves[n]
    k = int(np.argmin(e))
    h = table.R_grid[1] - table.R_grid[0]
    return float(np.sqrt((e[k - 1] - 2 * e[k] + e[k + 1]) / h ** 2 / m_red))


def write_pec_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R"] + [f"eps_{n}" for n in range(table.n_curves)])
        for k, R in enumerate(table.R_grid):
            w.writerow([repr(float(R))] + [repr(float(v)) for v in table.curves[:, k]])


def read_pec_csv(path, electronic_grid=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return PecTable(data[:, 0], data[:, 1:].T.copy(), electronic_grid or default_electronic_grid())


def dump_states(table, directory):
    """Electronic states as raw little-endian float64 plus a JSON manifest."""
    import pathlib
    if table.electronic_states is None:
        raise ValueError("table was scanned without keep_states")
    d = pathlib.Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, R in enumerate(table.R_grid):
        for n in range(table.n_curves):
            name = f"xi_{n}_R{k:04d}.f64"
            table.electronic_states[k, n].astype("<f8").tofile(d / name)
            entries.append({"file": name, "n": n, "R": float(R)})
    manifest = {"grid": table.electronic_grid.to_dict(), "dtype": "<f8", "states": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
