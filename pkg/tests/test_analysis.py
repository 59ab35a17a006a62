import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icec1d.analysis import (AnalysisError, InfoTrace, TRACE_COLUMNS, analyze_snapshot,
                             compute_densities, conditional_entropies, default_window,
                             entanglement_retention, estimate_collision_times,
                             expectation_and_dispersion, mutual_informations,
                             norm_decay_stages, reduced_spectra, shannon_differential_entropy,
                             von_neumann_entropy)
from icec1d.grids import Grid1D, Grid3D
from icec1d.propagate import SYMMETRIC, WaveFunction3D


def make_grid(n=10, m=9):
    return Grid3D(Grid1D(n, -3.0, 3.0, "periodic"), Grid1D(m, 0.5, 3.0))


def random_wf(grid, seed, symmetric=True, walls=False):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    if symmetric:
        a = a + a.transpose(1, 0, 2)
    if not walls:
        a[:, :, 0] = a[:, :, -1] = 0
    wf = WaveFunction3D(a, grid, 0.0, SYMMETRIC if symmetric else "none")
    wf.amplitudes /= math.sqrt(wf.norm2()) if not walls else 1.0
    return wf


def dense_reduced_matrices(wf):
    """Explicit weighted partial traces (independent of the Gram-matrix shortcut)."""
    w_e, w_R = wf.grid.electron.weights, wf.grid.nuclear.weights
    x = wf.amplitudes * np.sqrt(w_e[:, None, None] * w_e[None, :, None] * w_R[None, None, :])
    rho_e = np.einsum("ijk,ljk->il", x, x.conj())
    rho_N = np.einsum("ijk,ijl->kl", x, x.conj())
    return rho_e, rho_N


@pytest.mark.parametrize("walls", [False, True])
def test_spectra_match_dense_partial_trace(walls):
    wf = random_wf(make_grid(), 3, walls=walls)
    rho_e, rho_N = dense_reduced_matrices(wf)
    spec = reduced_spectra(wf)
    le = np.sort(np.linalg.eigvalsh(rho_e))[::-1]
    lN = np.sort(np.linalg.eigvalsh(rho_N))[::-1]
    np.testing.assert_allclose(spec.lambda_e, np.where(le < 1e-12, 0, le), atol=1e-13)
    np.testing.assert_allclose(spec.lambda_N[:lN.size], np.where(lN < 1e-12, 0, lN), atol=1e-13)


def test_orbitals_are_eigenvectors():
    wf = random_wf(make_grid(), 4)
    spec = reduced_spectra(wf, orbitals=True)
    rho_e, _ = dense_reduced_matrices(wf)
    w = wf.grid.electron.weights
    for lam, orb in zip(spec.lambda_e[:3], spec.orbitals_e[:3]):
        v = orb * np.sqrt(w)
        np.testing.assert_allclose(rho_e @ v, lam * v, atol=1e-12)


@given(st.integers(0, 10 ** 6), st.booleans())
def test_trace_and_entropy_identities(seed, symmetric):
    wf = random_wf(make_grid(8, 8), seed, symmetric)
    row, _ = analyze_snapshot(wf)
    assert abs(row["trace_e"] - row["norm"]) < 1e-8
    assert abs(row["trace_N"] - row["norm"]) < 1e-8
    assert row["S_N_given_e"] == 0.0
    assert row["I_eN_vN"] == row["S_N_vN"]
    assert row["I_ee_vN"] >= -1e-8  # subadditivity
    assert row["I_ee_Sh"] >= -1e-8 and row["I_eN_Sh"] >= -1e-8
    assert row["S_e_vN"] >= 0 and row["S_N_vN"] >= 0


def test_product_and_bell_like_states():
    grid = make_grid(16, 10)
    z = grid.electron.points
    R = grid.nuclear.points
    f = np.exp(-z ** 2)
    g = z * np.exp(-z ** 2)
    chi = np.sin(np.pi * (R - 0.5) / 2.5)
    prod = np.einsum("i,j,k->ijk", f, f, chi).astype(complex)
    wf = WaveFunction3D(prod, grid, 0.0, SYMMETRIC)
    wf.amplitudes /= math.sqrt(wf.norm2())
    row, pops = analyze_snapshot(wf)
    assert row["S_e_vN"] == pytest.approx(0.0, abs=1e-9)
    assert row["S_N_vN"] == pytest.approx(0.0, abs=1e-9)
    sym = (np.einsum("i,j,k->ijk", f, g, chi) + np.einsum("i,j,k->ijk", g, f, chi)).astype(complex)
    wf = WaveFunction3D(sym, grid, 0.0, SYMMETRIC)
    wf.amplitudes /= math.sqrt(wf.norm2())
    row, pops = analyze_snapshot(wf)
    # f and g are orthogonal on the symmetric grid: two equal natural populations
    assert row["S_e_vN"] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(pops[:2], 0.5, atol=1e-12)
    assert row["S_N_vN"] == pytest.approx(0.0, abs=1e-9)
    assert row["I_ee_vN"] == pytest.approx(2.0, abs=1e-9)


def test_fast_and_generic_density_paths_agree():
    wf = random_wf(make_grid(), 5)
    fast = compute_densities(wf)
    p = np.abs(wf.amplitudes) ** 2
    w_e, w_R = wf.grid.electron.weights, wf.grid.nuclear.weights
    np.testing.assert_allclose(fast.rho_ee, p @ w_R, rtol=1e-13)
    np.testing.assert_allclose(fast.rho_eN, np.einsum("ijk,j->ik", p, w_e), rtol=1e-13)
    assert fast.norm == pytest.approx(wf.norm2(), rel=1e-13)


@pytest.mark.parametrize("sigma", [0.5, 1.3, 4.0])
def test_gaussian_differential_entropy(sigma):
    g = Grid1D.from_spacing(-60.0, 60.0, 0.01)
    rho = np.exp(-g.points ** 2 / (2 * sigma ** 2)) / math.sqrt(2 * math.pi * sigma ** 2)
    got = shannon_differential_entropy(rho, g.weights)
    assert got == pytest.approx(0.5 * math.log2(2 * math.pi * math.e * sigma ** 2), abs=1e-6)


def test_raw_and_normalized_entropy_conventions():
    g = Grid1D.from_spacing(-30.0, 30.0, 0.01)
    rho = np.exp(-g.points ** 2 / 2) / math.sqrt(2 * math.pi)
    n = 0.6
    raw = shannon_differential_entropy(n * rho, g.weights)
    norm = shannon_differential_entropy(n * rho, g.weights, normalize=True)
    assert norm == pytest.approx(shannon_differential_entropy(rho, g.weights), rel=1e-12)
    assert raw == pytest.approx(n * norm - n * math.log2(n), rel=1e-10)
    with pytest.raises(AnalysisError):
        shannon_differential_entropy(np.zeros(5), np.ones(5), normalize=True)


def test_von_neumann_clamp_and_identities():
    assert von_neumann_entropy([0.5, 0.5, 1e-15, -1e-14]) == 1.0
    assert von_neumann_entropy([1.0]) == 0.0
    assert conditional_entropies(0.8, 0.3) == (0.5, 0.0, -0.3, -0.8)
    assert mutual_informations(1.0, 0.3, 2.0, 1.5, 3.5, 3.0) == (1.7, 0.3, 0.5, 0.5)


def test_expectation_and_dispersion():
    x = np.linspace(-10, 10, 2001)
    rho = 3.0 * np.exp(-(x - 1.5) ** 2 / (2 * 0.7 ** 2))
    m, s = expectation_and_dispersion(rho, x, np.full_like(x, 0.01))
    assert m == pytest.approx(1.5, abs=1e-10) and s == pytest.approx(0.7, rel=1e-8)


# ---------------------------------------------------------------------------
# trace-level estimators

def synthetic_trace(t, **cols):
    trace = InfoTrace()
    for k, tk in enumerate(t):
        row = {c: 0.0 for c in TRACE_COLUMNS}
        row["time_fs"] = tk
        for name, vals in cols.items():
            row[name] = float(vals[k])
        trace.append(row, np.zeros(2))
    return trace


def test_collision_times_parabolic_refinement():
    t = np.linspace(0, 8, 81)
    tr = synthetic_trace(t, S_e_vN=1.2 - (t - 3.03) ** 2, std_z_e=2 + (t - 3.47) ** 2,
                         I_ee_Sh=0.5 * (t - 2.91) ** 2)
    ct = estimate_collision_times(tr, (1.0, 5.0))
    assert ct.t_S == pytest.approx(3.03, abs=1e-9)
    assert ct.t_Delta == pytest.approx(3.47, abs=1e-9)
    assert ct.t_I == pytest.approx(2.91, abs=1e-9)
    assert ct.spread() == pytest.approx(0.56, abs=1e-9)
    assert ct.flags == ()


def test_collision_window_boundary_flag():
    t = np.linspace(0, 8, 81)
    tr = synthetic_trace(t, S_e_vN=t, std_z_e=-t, I_ee_Sh=-t)
    ct = estimate_collision_times(tr, (1.0, 2.0))
    assert len(ct.flags) == 3
    with pytest.raises(AnalysisError):
        estimate_collision_times(tr, (-1.0, 2.0))


def test_default_window_and_retention():
    t = np.linspace(0, 10, 101)
    s = np.interp(t, [0, 4, 10], [1.0, 2.0, 1.6])
    tr = synthetic_trace(t, S_e_vN=s)
    assert default_window(tr, 2.0) == (2.0, 6.0)
    before, after = entanglement_retention(tr, 4.0, 2.0)
    assert before == pytest.approx(1.5 / 2.0, rel=1e-12)
    assert after == pytest.approx((2.0 - 0.4 * 2 / 6) / 2.0, rel=1e-12)
    with pytest.raises(AnalysisError):
        entanglement_retention(tr, 9.0, 2.0)


def test_default_window_ignores_absorption_bump():
    t = np.linspace(0, 10, 101)
    s = 1.0 + 0.1 * np.exp(-(t - 3.0) ** 2) + 0.3 * np.exp(-(t - 7.0) ** 2)
    norm = np.where(t < 5.0, 1.0, np.exp(-(t - 5.0)))
    tr = synthetic_trace(t, S_e_vN=s, norm=norm)
    assert default_window(tr, 2.0) == pytest.approx((1.0, 5.0))
    assert default_window(tr, 2.0, norm_floor=0.0) == pytest.approx((5.0, 9.0))


@pytest.mark.parametrize("centres", [[3.0], [2.0, 5.0], [1.5, 4.0, 7.0]])
def test_norm_decay_stage_count(centres):
    t = np.linspace(0, 9, 901)
    n = np.ones_like(t)
    for c in centres:
        n -= 0.2 / (1 + np.exp(-(t - c) / 0.2))
    count, times = norm_decay_stages(t, n)
    assert count == len(centres)
    np.testing.assert_allclose(times, centres, atol=0.02)


def test_norm_decay_constant_norm():
    t = np.linspace(0, 1, 11)
    assert norm_decay_stages(t, np.ones_like(t))[0] == 0


def test_info_trace_csv_roundtrip(tmp_path):
    wf = random_wf(make_grid(8, 8), 11)
    tr = InfoTrace()
    for k in range(3):
        wf.time = float(k)
        tr.append(*analyze_snapshot(wf, n_populations=4))
    tr.write_csv(tmp_path / "t.csv")
    tr.write_populations_csv(tmp_path / "p.csv")
    back = InfoTrace.read_csv(tmp_path / "t.csv", tmp_path / "p.csv")
    assert back.rows == tr.rows
    np.testing.assert_array_equal(np.array(back.populations), np.array(tr.populations))
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == TRACE_COLUMNS


def test_default_window_discounts_initial_cap_transient():
    t = np.linspace(0, 10, 101)
    s = 1.0 + 0.1 * np.exp(-(t - 3.0) ** 2)
    # 2% of the packet tail starts inside the CAP and is removed within ~0.3
    norm = 0.98 + 0.02 * np.exp(-t / 0.05)
    tr = synthetic_trace(t, S_e_vN=s, norm=norm)
    assert default_window(tr, 2.0) == pytest.approx((1.0, 5.0))
