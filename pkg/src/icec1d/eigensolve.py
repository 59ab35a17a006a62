"""Variational 1D eigensolver: linear finite elements with consistent mass.

The Galerkin problem K c + V c = E M c is assembled on the grid nodes
(walls removed for Dirichlet grids). Because the trial space of the
refined mesh contains that of the coarse mesh, every computed eigenvalue
is an upper bound that decreases monotonically under nested refinement
(exactly so when the potential integrals are exact).

Returned states are orthonormal in the L2 inner product of the
piecewise-linear interpolant, i.e. under the consistent mass matrix.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grids import DIRICHLET, Grid1D

#: largest problem size solved with a dense generalized eigensolver
DENSE_MAX = 2000

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(4)
_GAUSS_T = 0.5 * (_GAUSS_X + 1.0)
_GAUSS_W = 0.5 * _GAUSS_W


class EigenSolveError(RuntimeError):
    """Eigensolver failure; ``n_converged`` pairs were obtained."""

    def __init__(self, message, n_converged=0):
        super().__init__(message)
        self.n_converged = n_converged


class RefinementError(RuntimeError):
    """Mesh refinement hit the size cap; ``history`` holds (n_points, E0) rows."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class EigenSolution:
    """Lowest eigenpairs of a 1D Hamiltonian on ``grid``.

    Attributes
    ----------
    energies : ndarray, shape (n,)
        Ascending eigenvalues (a.u.).
    states : ndarray, shape (n, grid.n_points)
        Nodal values; zero on Dirichlet walls.
    grid : Grid1D
    n_converged : int
    residual_norms : ndarray, shape (n,)
        ``||H psi - E psi|| / ||psi||`` in the L2 norm of the discrete operator.
    history : list of (int, float)
        (n_points, ground energy) per refinement level, if any.
    """

    energies: np.ndarray
    states: np.ndarray
    grid: Grid1D
    n_converged: int
    residual_norms: np.ndarray
    history: list = field(default_factory=list)
    mass_matrix: object = field(default=None, repr=False)

    def overlaps(self):
        """Matrix of inner products <psi_i|psi_j> (identity up to round-off)."""
        c = self.states[:, _free(self.grid)]
        return c @ (self.mass_matrix @ c.T)

    def shifted(self, const):
        return EigenSolution(self.energies + const, self.states, self.grid, self.n_converged,
                             self.residual_norms, list(self.history), self.mass_matrix)


def _free(grid):
    return grid.interior


def _element_potential(potential, grid):
    """Per-element potential entries (v00, v01, v11), each shape (n_el,), and min V."""
    pts, h = grid.points, grid.spacing
    n = grid.n_points
    periodic = grid.boundary != DIRICHLET
    left = pts
    if not periodic:
        left = pts[:-1]
    if callable(potential):
        xq = left[:, None] + h * _GAUSS_T[None, :]
        vq = np.asarray(potential(xq), dtype=float)
        if not np.all(np.isfinite(vq)):
            raise ValueError("potential is not finite on the grid")
        n0, n1 = 1.0 - _GAUSS_T, _GAUSS_T
        v00 = h * vq @ (_GAUSS_W * n0 * n0)
        v01 = h * vq @ (_GAUSS_W * n0 * n1)
        v11 = h * vq @ (_GAUSS_W * n1 * n1)
        return v00, v01, v11, float(vq.min())
    v = np.asarray(potential, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"sampled potential must have shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("potential is not finite on the grid")
    va = v
    vb = np.roll(v, -1)
    if not periodic:
        va, vb = v[:-1], v[1:]
    # exact integrals of the linear interpolant of V against N_a N_b
    return h * (3 * va + vb) / 12, h * (va + vb) / 12, h * (va + 3 * vb) / 12, float(v.min())


def _element_ends(grid):
    n = grid.n_points
    n_el = n if grid.boundary != DIRICHLET else n - 1
    i0 = np.arange(n_el)
    return i0, (i0 + 1) % n


def assemble(potential, grid, mass=1.0):
    """Sparse (A, M) on the free nodes, A = kinetic + potential.

    Returns
    -------
    A, M : scipy.sparse.csc_matrix
    elements : tuple
        (v00, v01, v11, v_min) per-element potential data.
    """
    if not mass > 0:
        raise ValueError("mass must be positive")
    n, h = grid.n_points, grid.spacing
    elements = _element_potential(potential, grid)
    v00, v01, v11, _ = elements
    kd = 1.0 / (2.0 * mass * h)
    i0, i1 = _element_ends(grid)
    a_diag = np.zeros(n)
    m_diag = np.zeros(n)
    np.add.at(a_diag, i0, kd + v00)
    np.add.at(a_diag, i1, kd + v11)
    np.add.at(m_diag, i0, h / 3)
    np.add.at(m_diag, i1, h / 3)
    a_off = -kd + v01
    m_off = np.full(i0.size, h / 6)
    rows = np.concatenate([np.arange(n), i0, i1])
    cols = np.concatenate([np.arange(n), i1, i0])
    A = sp.csr_matrix((np.concatenate([a_diag, a_off, a_off]), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((np.concatenate([m_diag, m_off, m_off]), (rows, cols)), shape=(n, n))
    free = _free(grid)
    if grid.boundary == DIRICHLET:
        A = A[free][:, free]
        M = M[free][:, free]
    return A.tocsc(), M.tocsc(), elements


def _rayleigh(full, grid, mass, elements):
    """Energy of nodal vectors ``full`` (rows) in a cancellation-free form.

    The kinetic part is a sum of squared differences, so no O(1/h)
    terms cancel; the quotient is accurate to a few ulps even on very
    fine meshes where the assembled matrix product is not.
    """
    v00, v01, v11, _ = elements
    h = grid.spacing
    i0, i1 = _element_ends(grid)
    a, b = full[:, i0], full[:, i1]
    kin = np.sum((b - a) ** 2, axis=1) / (2.0 * mass * h)
    pot = np.sum(v00 * a * a + 2.0 * v01 * a * b + v11 * b * b, axis=1)
    nrm = (h / 3.0) * np.sum(a * a + a * b + b * b, axis=1)
    return (kin + pot) / nrm


def solve_tise_1d(potential, grid, mass=1.0, n_eigen=1, tol=1e-9, max_iter=None):
    """Lowest eigenpairs of ``-1/(2 mass) d^2/dz^2 + V`` on ``grid``.

    Parameters
    ----------
    potential : callable or ndarray
        Either ``V(z)`` (vectorized; integrated with 4-point Gauss rules per
        element) or values at ``grid.points`` (integrated exactly as a
        piecewise-linear function).
    grid : Grid1D
    mass : float
    n_eigen : int
        Must be below half the number of grid points.
    tol : float
        Residual tolerance, relative to the state norm and to max(1, |E|).
        A round-off allowance of 64 eps ||H|| is added, since the
        discrete operator norm grows like 1/h^2.
    max_iter : int, optional
        Iteration cap of the sparse solver.

    Returns
    -------
    EigenSolution
    """
    if not 1 <= n_eigen < grid.n_points / 2:
        raise ValueError("n_eigen must satisfy 1 <= n_eigen < n_points/2")
    A, M, elements = assemble(potential, grid, mass)
    v_min = elements[3]
    n_free = A.shape[0]
    if n_free <= DENSE_MAX:
        w, c = scipy.linalg.eigh(A.toarray(), M.toarray(), subset_by_index=[0, n_eigen - 1])
    else:
        # every Galerkin eigenvalue lies above min V, so this shift targets the bottom
        sigma = v_min - 1.0
        try:
            w, c = spla.eigsh(A, k=n_eigen, M=M, sigma=sigma, which="LM", tol=0.0,
                              maxiter=max_iter)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolveError(f"shift-invert Lanczos did not converge: {exc}",
                                  len(exc.eigenvalues)) from exc
        order = np.argsort(w)
        w, c = w[order], c[:, order]
        # re-normalize in the M inner product (ARPACK returns M-orthonormal up to round-off)
        c = c / np.sqrt(np.einsum("ij,ij->j", c, M @ c))
    # deterministic sign: the largest-magnitude nodal value is positive
    idx = np.argmax(np.abs(c), axis=0)
    c = c * np.sign(c[idx, np.arange(c.shape[1])])
    states = np.zeros((n_eigen, grid.n_points))
    states[:, _free(grid)] = c.T
    w = _rayleigh(states, grid, mass, elements)
    solve_m = spla.factorized(M)
    res = np.empty(n_eigen)
    for j in range(n_eigen):
        r = A @ c[:, j] - w[j] * (M @ c[:, j])
        res[j] = np.sqrt(max(r @ solve_m(r), 0.0))
    # round-off floor: eps times the spectral radius of the discrete operator
    h_norm = 6.0 / (mass * grid.spacing ** 2) + float(np.max(np.abs(A.diagonal() / M.diagonal())))
    allowed = tol * np.maximum(1.0, np.abs(w)) + 64 * np.finfo(float).eps * h_norm
    n_conv = int(np.sum(res <= allowed))
    if n_conv < n_eigen:
        raise EigenSolveError(
            f"{n_eigen - n_conv} eigenpairs exceed residual tolerance {tol:g} "
            f"(max residual {res.max():.3e})", n_conv)
    return EigenSolution(w, states, grid, n_conv, res, mass_matrix=M)


def refine_until(potential, mass, n_eigen, energy_tol, grid, max_points=1 << 21, tol=1e-9):
    """Halve the spacing until successive ground energies differ by < ``energy_tol``.

    Returns the solution on the finest grid, with ``history`` holding one
    (n_points, E0) row per level. ``potential`` must be callable.
    """
    if not energy_tol > 0:
        raise ValueError("energy_tol must be positive")
    if not callable(potential):
        raise TypeError("refinement needs a callable potential")
    sol = solve_tise_1d(potential, grid, mass, n_eigen, tol)
    history = [(grid.n_points, float(sol.energies[0]))]
    while True:
        grid = grid.refined()
        if grid.n_points > max_points:
            raise RefinementError(f"size cap {max_points} reached before convergence", history)
        new = solve_tise_1d(potential, grid, mass, n_eigen, tol)
        history.append((grid.n_points, float(new.energies[0])))
        if abs(history[-1][1] - history[-2][1]) < energy_tol:
            new.history = history
            return new
        sol = new


def observed_order(history):
    """Richardson estimate of the convergence order from the last three levels."""
    if len(history) < 3:
        raise ValueError("need at least three refinement levels")
    e0, e1, e2 = (row[1] for row in history[-3:])
    return float(np.log2(abs(e0 - e1) / abs(e1 - e2)))
