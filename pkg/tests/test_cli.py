import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icec1d.analysis import TRACE_COLUMNS, InfoTrace
from icec1d.cli import main, summarize
from icec1d.config import ConfigError, RunConfig

TINY = """
[grid]
z_min = -25.6
z_max = 25.6
n_z = 64
R_min = 0.6
R_max = 4.5
n_R = 26
[projectile]
z0 = -12.0
delta_epsilon = 0.3
[propagation]
dt = 0.1
t_final_fs = 0.25
output_stride = 3
z_cap_left = -18
z_cap_right = 18
R_cap = 3.8
[analysis]
stride = 2
delta_t_fs = 0.05
[calibration]
z_half_width = 30
z_spacing = 0.1
l_alpha_curve = 1.986
[pec]
R_min = 1.2
R_max = 2.4
R_step = 0.1
n_curves = 3
z_half_width = 30
z_spacing = 0.1
[io]
snapshots = analyzed
"""


def write_config(path, text=TINY, **sections):
    cfg = RunConfig.from_string(text)
    for section, values in sections.items():
        cfg = cfg.with_values(section, **values)
    path.write_text(cfg.to_string())
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d / "cfg.ini")
    assert main(["run", "--config", str(cfg), "--out", str(d / "out")]) == 0
    return d


# ---------------------------------------------------------------------------
# configuration

def test_config_roundtrip_defaults():
    cfg = RunConfig.defaults()
    text = cfg.to_string()
    again = RunConfig.from_string(text)
    assert again.values == cfg.values and again.to_string() == text


@given(st.floats(0.05, 2.0), st.integers(1, 50), st.sampled_from(["raw", "normalized"]),
       st.one_of(st.none(), st.floats(0.01, 0.99)))
def test_config_roundtrip_values(eps, stride, conv, stop):
    cfg = RunConfig.defaults().with_values("projectile", epsilon_in=eps)
    cfg = cfg.with_values("analysis", stride=stride, entropy_convention=conv)
    cfg = cfg.with_values("propagation", stop_norm=stop)
    again = RunConfig.from_string(cfg.to_string())
    assert again.values == cfg.values
    assert again.full_hash() == cfg.full_hash()


@pytest.mark.parametrize("text", [
    "[model]\nbogus = 1\n",
    "[nonsense]\nx = 1\n",
    "[analysis]\nentropy_convention = weird\n",
    "[io]\nsnapshots = some\n",
    "[model]\nl_c = abc\n",
    "[model]\nl_c = -1\n",
    "[analysis]\nstride = 0\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        RunConfig.from_string(text)


def test_section_hash_isolated():
    a = RunConfig.defaults()
    b = a.with_values("projectile", epsilon_in=0.4)
    assert a.section_hash("model", "grid") == b.section_hash("model", "grid")
    assert a.section_hash("projectile") != b.section_hash("projectile")


# ---------------------------------------------------------------------------
# pipeline

def test_run_outputs_and_invariants(run_dir):
    out = run_dir / "out"
    for name in ("info_trace.csv", "nop.csv", "norm.csv", "summary.json", "manifest.json",
                 "target.f64", "target.json", "snapshots/index.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert all(summary["invariants"].values())
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"]["run"]["done"] and manifest["stages"]["relax"]["done"]
    assert [e["stage"] for e in manifest["events"]] == ["relax", "run"]
    assert not (out / "manifest.lock").exists()


def test_rerun_is_skipped(run_dir, capsys):
    before = (run_dir / "out" / "info_trace.csv").read_bytes()
    assert main(["run", "--config", str(run_dir / "cfg.ini"), "--out", str(run_dir / "out")]) == 0
    manifest = json.loads((run_dir / "out" / "manifest.json").read_text())
    assert len(manifest["events"]) == 2  # nothing re-executed
    assert (run_dir / "out" / "info_trace.csv").read_bytes() == before


def test_determinism_bit_identical(run_dir, tmp_path):
    assert main(["run", "--config", str(run_dir / "cfg.ini"), "--out", str(tmp_path / "b")]) == 0
    for name in ("info_trace.csv", "nop.csv", "norm.csv", "summary.json"):
        assert (tmp_path / "b" / name).read_bytes() == (run_dir / "out" / name).read_bytes()


def test_analyze_reproduces_trace(run_dir):
    out = run_dir / "out"
    assert main(["analyze", "--config", str(run_dir / "cfg.ini"), "--out", str(out)]) == 0
    a = np.loadtxt(out / "info_trace.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(out / "analysis" / "info_trace.csv", delimiter=",", skiprows=1)
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-12


def test_analyze_stride_subsamples(run_dir):
    out = run_dir / "out"
    assert main(["analyze", "--config", str(run_dir / "cfg.ini"), "--out", str(out),
                 "--stride", "4"]) == 0
    full = np.loadtxt(out / "info_trace.csv", delimiter=",", skiprows=1)
    sub = np.loadtxt(out / "analysis" / "info_trace.csv", delimiter=",", skiprows=1)
    assert 0 < sub.shape[0] < full.shape[0]
    # every subsampled row appears unchanged in the full trace
    for row in sub:
        assert np.any(np.all(np.abs(full - row) <= 1e-12, axis=1))


def test_analyze_corrupt_snapshot(tmp_path, run_dir):
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(run_dir / "out", out)
    index = json.loads((out / "snapshots" / "index.json").read_text())
    victim = out / "snapshots" / (index["snapshots"][1]["name"] + ".c16")
    victim.write_bytes(victim.read_bytes()[:100])
    cfg = str(run_dir / "cfg.ini")
    assert main(["analyze", "--config", cfg, "--out", str(out)]) == 0
    n = np.loadtxt(out / "analysis" / "info_trace.csv", delimiter=",", skiprows=1).shape[0]
    assert n == len(index["snapshots"]) - 1
    assert main(["analyze", "--config", cfg, "--out", str(out), "--strict"]) == 2


def test_analyze_without_snapshots(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2


def test_changed_projectile_reuses_target(run_dir, tmp_path):
    import shutil
    out = tmp_path / "re"
    shutil.copytree(run_dir / "out", out)
    cfg = write_config(tmp_path / "c2.ini", projectile={"epsilon_in": 0.5})
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    events = json.loads((out / "manifest.json").read_text())["events"]
    stages = [e["stage"] for e in events]
    assert stages.count("relax") == 1 and stages[-1] == "run" and stages.count("run") == 2


def test_lock_blocks_concurrent_use(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    (tmp_path / "locked").mkdir()
    (tmp_path / "locked" / "manifest.lock").write_text("123")
    assert main(["relax", "--config", str(cfg), "--out", str(tmp_path / "locked")]) == 2


def test_calibrate_and_pec(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini")
    out = tmp_path / "cal"
    assert main(["calibrate", "--config", str(cfg), "--out", str(out)]) == 0
    cal = json.loads((out / "calibrated.json").read_text())
    assert cal["target_Ne_source"] == "forward solve"
    assert cal["q_Ne"] == pytest.approx(1.307, abs=1e-6)
    assert main(["pec", "--config", str(cfg), "--out", str(out)]) == 0
    th = json.loads((out / "thresholds.json").read_text())
    assert 1.5 < th["R_eq"] < 2.1
    header = (out / "pec.csv").read_text().splitlines()[0]
    assert header == "R,eps_0,eps_1,eps_2"
    # switching to calibrated charges invalidates pec
    cfg2 = write_config(tmp_path / "c2.ini", calibration={"use_calibrated": True})
    assert main(["pec", "--config", str(cfg2), "--out", str(out)]) == 0
    th2 = json.loads((out / "thresholds.json").read_text())
    assert th2["eps0_eq"] < th["eps0_eq"]


def test_calibrate_impossible_target(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", calibration={"target_He": 0.5})
    assert main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 2


def test_threads_env(run_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("ICEC1D_THREADS", "1")
    assert main(["run", "--config", str(run_dir / "cfg.ini"), "--out", str(tmp_path / "t")]) == 0
    assert ((tmp_path / "t" / "info_trace.csv").read_bytes()
            == (run_dir / "out" / "info_trace.csv").read_bytes())


def test_zero_charge_smoke_run(tmp_path):
    cfg = write_config(tmp_path / "free.ini", model={"q_He": 0.0, "q_Ne": 0.0},
                       propagation={"z_cap_left": None, "z_cap_right": None, "R_cap": None})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "free")]) == 0
    norms = np.loadtxt(tmp_path / "free" / "norm.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.max(np.abs(norms - 1.0)) < 1e-10


def test_summary_keeps_after_ratio_for_early_collision():
    t = np.linspace(0.0, 4.0, 81)
    trace = InfoTrace()
    for tk in t:
        row = {c: 0.0 for c in TRACE_COLUMNS}
        row.update(time_fs=tk, norm=1.0, trace_e=1.0, trace_N=1.0,
                   S_e_vN=1.0 + 0.2 * np.exp(-((tk - 1.0) / 0.3) ** 2) - 0.1 * (tk > 2.5),
                   std_z_e=5.0 + (tk - 1.0) ** 2, I_ee_Sh=0.5 + (tk - 1.0) ** 2)
        trace.append(row, np.zeros(2))
    cfg = RunConfig.from_string(TINY).with_values("analysis", delta_t_fs=2.0)
    s = summarize(trace, t, np.ones_like(t), cfg)
    assert s["collision"]["t_S"] == pytest.approx(1.0, abs=0.05)
    ret = s["retention"]
    assert "error" in ret and "delta_S_before" not in ret
    assert ret["delta_S_after"] == pytest.approx(0.9 / 1.2, rel=1e-3)
