"""Command-line pipeline: calibrate -> pec -> relax -> run (propagate + analyze).

Each stage records a key (hash of the configuration sections it depends
on plus the keys of its upstream stages) in ``manifest.json``. A stage is
skipped when its key is unchanged and its files exist; rerunning a stage
invalidates everything downstream.
"""
import argparse
import contextlib
import csv
import json
import logging
import math
import os
import pathlib
import sys
import time

import numpy as np

from . import __version__, kernels
from .analysis import (AnalysisError, InfoTrace, analyze_snapshot, default_window,
                       entanglement_retention, estimate_collision_times, norm_decay_stages)
from .config import ConfigError, RunConfig
from .constants import au_to_fs, fs_to_au
from .grids import Grid1D
from .model import CalibrationError, atom_ground_energy, calibrate_charge
from .pec import (PecError, derive_thresholds, dump_states, harmonic_frequency, scan_pec,
                  vibrational_states, write_pec_csv)
from .propagate import (CapSpec, ProjectileSpec, PropagationError, RelaxationError,
                        TargetState, build_initial_state, load_snapshot, propagate,
                        relax_target, save_snapshot)

log = logging.getLogger("icec1d")

EXIT_ERROR = 2
EXIT_INVARIANTS = 3
THREADS_ENV = "ICEC1D_THREADS"

DOWNSTREAM = {
    "calibrate": ("pec", "relax", "run", "analyze"),
    "pec": (),
    "relax": ("run", "analyze"),
    "run": ("analyze",),
    "analyze": (),
}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# manifest

class RunManifest:
    """Stage flags and an append-only event log stored as JSON."""

    def __init__(self, run_dir, cfg):
        self.dir = pathlib.Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"library_version": __version__, "stages": {}, "events": []}
        self.data["config_hash"] = cfg.full_hash()
        self.data["library_version"] = __version__

    def fresh(self, stage, key):
        s = self.data["stages"].get(stage)
        return bool(s and s.get("done") and s.get("key") == key
                    and all((self.dir / f).exists() for f in s.get("files", [])))

    def record(self, stage, key, files, wall, **extra):
        for down in DOWNSTREAM.get(stage, ()):
            if down in self.data["stages"]:
                self.data["stages"][down]["done"] = False
        self.data["stages"][stage] = {"done": True, "key": key, "files": sorted(files),
                                      "wall_seconds": round(wall, 3), **extra}
        self._event(stage, "completed", wall_seconds=round(wall, 3))

    def fail(self, stage, message):
        if stage in self.data["stages"]:
            self.data["stages"][stage]["done"] = False
        self._event(stage, "failed", error=message)

    def _event(self, stage, status, **extra):
        self.data["events"].append({"stage": stage, "status": status,
                                    "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra})
        self.save()

    def save(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1))
        os.replace(tmp, self.path)

    def key(self, stage):
        return self.data["stages"].get(stage, {}).get("key", "")


@contextlib.contextmanager
def manifest_lock(run_dir):
    path = pathlib.Path(run_dir) / "manifest.lock"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("lock", f"run directory {run_dir} is locked ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# helpers

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _dump_json(path, obj):
    pathlib.Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _key(*parts):
    import hashlib
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def effective_params(cfg, run_dir):
    params = cfg.model_params()
    if cfg["calibration"]["use_calibrated"]:
        path = pathlib.Path(run_dir) / "calibrated.json"
        if not path.exists():
            raise StageError("pec", "use_calibrated is set but calibrate has not run")
        cal = json.loads(path.read_text())
        params = params.with_charges(cal["q_He"], cal["q_Ne"])
    return params


def _calibrate_key(cfg):
    return _key(cfg.section_hash("model", "calibration"))


def _upstream(cfg):
    return _calibrate_key(cfg) if cfg["calibration"]["use_calibrated"] else ""


# ---------------------------------------------------------------------------
# stages

def stage_calibrate(cfg, run_dir, manifest, force=False):
    key = _calibrate_key(cfg)
    if not force and manifest.fresh("calibrate", key):
        log.info("calibrate: up to date")
        return json.loads((pathlib.Path(run_dir) / "calibrated.json").read_text())
    t0 = time.time()
    c, m = cfg["calibration"], cfg["model"]
    grid = Grid1D.from_spacing(-c["z_half_width"], c["z_half_width"], c["z_spacing"])
    target_ne = c["target_Ne"]
    if target_ne is None:
        target_ne = atom_ground_energy(m["q_Ne"], m["l_alpha"], m["l_c"], grid=grid)
    q_he = calibrate_charge(c["target_He"], m["l_alpha"], m["l_c"], grid=grid)
    q_ne = calibrate_charge(target_ne, m["l_alpha"], m["l_c"], grid=grid)
    e_he_model = atom_ground_energy(m["q_He"], m["l_alpha"], m["l_c"], grid=grid)
    rows = []
    for la in c["l_alpha_curve"]:
        rows.append((la, calibrate_charge(c["target_He"], la, m["l_c"], grid=grid),
                     calibrate_charge(target_ne, la, m["l_c"], grid=grid)))
    d = pathlib.Path(run_dir)
    _write_csv(d / "calibration.csv", ["l_alpha", "q_He", "q_Ne"], rows)
    result = {"q_He": q_he, "q_Ne": q_ne, "target_He": c["target_He"], "target_Ne": target_ne,
              "target_Ne_source": "config" if c["target_Ne"] is not None else "forward solve",
              "E_He_at_model_q": e_he_model, "model_q_He": m["q_He"], "model_q_Ne": m["q_Ne"]}
    _dump_json(d / "calibrated.json", result)
    manifest.record("calibrate", key, ["calibration.csv", "calibrated.json"], time.time() - t0)
    return result


def stage_pec(cfg, run_dir, manifest, force=False):
    key = _key(cfg.section_hash("model", "pec"), _upstream(cfg))
    d = pathlib.Path(run_dir)
    if not force and manifest.fresh("pec", key):
        log.info("pec: up to date")
        return json.loads((d / "thresholds.json").read_text())
    t0 = time.time()
    pc = cfg["pec"]
    params = effective_params(cfg, run_dir)
    n_R = int(round((pc["R_max"] - pc["R_min"]) / pc["R_step"])) + 1
    R = np.round(pc["R_min"] + pc["R_step"] * np.arange(n_R), 12)
    grid = Grid1D.from_spacing(-pc["z_half_width"], pc["z_half_width"], pc["z_spacing"])
    table = scan_pec(params, R, pc["n_curves"], grid, keep_states=pc["dump_states"])
    der = derive_thresholds(table)
    vib = vibrational_states(table.curves[0], table.R_grid, params.m_red, pc["n_vib"])
    result = der.to_dict()
    result.update({"omega_vib_harmonic": harmonic_frequency(table, params.m_red),
                   "vibrational_energies": [float(e) for e in vib.energies]})
    write_pec_csv(table, d / "pec.csv")
    _dump_json(d / "thresholds.json", result)
    files = ["pec.csv", "thresholds.json"]
    if pc["dump_states"]:
        dump_states(table, d / "pec_states")
        files.append("pec_states/manifest.json")
    manifest.record("pec", key, files, time.time() - t0)
    return result


def _relax_key(cfg):
    return _key(cfg.section_hash("model", "grid", "relaxation"), _upstream(cfg))


def load_target(directory, grid3d):
    d = pathlib.Path(directory)
    meta = json.loads((d / "target.json").read_text())
    ge, gR = grid3d.electron, grid3d.nuclear
    phi = np.fromfile(d / "target.f64", dtype="<f8").reshape(ge.n_points, gR.n_points)
    return TargetState(phi, meta["energy"], ge, gR, [tuple(h) for h in meta["history"]])


def stage_relax(cfg, run_dir, manifest, force=False):
    key = _relax_key(cfg)
    grid = cfg.grid3d()
    if not force and manifest.fresh("relax", key):
        log.info("relax: up to date")
        return load_target(run_dir, grid)
    t0 = time.time()
    rc = cfg["relaxation"]
    params = effective_params(cfg, run_dir)
    target = relax_target(params, grid.electron, grid.nuclear, None, rc["tau_total"], rc["dtau"],
                          rc["energy_tol"])
    d = pathlib.Path(run_dir)
    target.phi.astype("<f8").tofile(d / "target.f64")
    _dump_json(d / "target.json", {"energy": target.energy, "mean_R": target.mean_R(),
                                   "history": target.history, "grid": grid.to_dict()})
    manifest.record("relax", key, ["target.f64", "target.json"], time.time() - t0,
                    energy=target.energy)
    return target


def caps_from(cfg):
    p = cfg["propagation"]
    return CapSpec(p["eta"], p["z_cap_left"], p["z_cap_right"], p["R_cap"], p["eta_R"])


def check_invariants(trace, tol=1e-8):
    """Per-snapshot invariant suite; returns {name: bool}."""
    rows = trace.rows
    ok = {
        "trace_consistency": all(abs(r["trace_e"] - r["norm"]) <= tol
                                 and abs(r["trace_N"] - r["norm"]) <= tol for r in rows),
        "S_N_given_e_zero": all(r["S_N_given_e"] == 0.0 for r in rows),
        "I_eN_vN_equals_S_N": all(r["I_eN_vN"] == r["S_N_vN"] for r in rows),
        "shannon_MI_nonnegative": all(r["I_ee_Sh"] >= -tol and r["I_eN_Sh"] >= -tol for r in rows),
        "quantum_MI_nonnegative": all(r["I_ee_vN"] >= -tol for r in rows),
        "exchange_symmetry": all(r["symmetry_residual"] < tol for r in rows),
        "vN_nonnegative": all(r["S_e_vN"] >= 0 and r["S_N_vN"] >= 0 for r in rows),
    }
    return ok


def summarize(trace, norm_times_fs, norms, cfg):
    a = cfg["analysis"]
    out = {"invariants": check_invariants(trace)}
    n_st, t_st = norm_decay_stages(norm_times_fs, norms, a["stage_prominence"])
    out["norm_stages"] = n_st
    out["norm_stage_times_fs"] = [float(t) for t in t_st]
    try:
        window = default_window(trace, a["delta_t_fs"])
        ct = estimate_collision_times(trace, window)
        out["collision"] = {"t_S": ct.t_S, "t_Delta": ct.t_Delta, "t_I": ct.t_I,
                            "window": list(window), "flags": list(ct.flags)}
        try:
            before, after = entanglement_retention(trace, ct.t_S, a["delta_t_fs"])
            out["retention"] = {"delta_S_before": before, "delta_S_after": after}
        except AnalysisError as exc:
            out["retention"] = {"error": str(exc)}
            # an early collision leaves t_be before the record; t_af may still be inside
            t, s = trace.times, trace.column("S_e_vN")
            t_af = ct.t_S + a["delta_t_fs"]
            s_col = float(np.interp(ct.t_S, t, s))
            if t_af <= t[-1] + 1e-12 and s_col > 1e-8:
                out["retention"]["delta_S_after"] = float(np.interp(t_af, t, s)) / s_col
    except AnalysisError as exc:
        out["collision"] = {"error": str(exc)}
    s_e = trace.column("S_e_vN")
    out["S_e_initial"] = float(s_e[0])
    out["S_N_initial"] = float(trace.column("S_N_vN")[0])
    out["S_e_final"] = float(s_e[-1])
    out["P_R_out_max"] = float(trace.column("P_R_out").max())
    out["final_norm"] = float(norms[-1])
    return out


def stage_run(cfg, run_dir, manifest, force=False, threads=None, target=None, params=None):
    d = pathlib.Path(run_dir)
    if target is None:
        target = stage_relax(cfg, run_dir, manifest)
        upstream = manifest.key("relax")
    else:
        upstream = _relax_key(cfg)
    key = _key(upstream, cfg.section_hash("projectile", "propagation", "analysis", "io"))
    if not force and manifest.fresh("run", key):
        log.info("run: up to date")
        return json.loads((d / "summary.json").read_text())
    t0 = time.time()
    if params is None:
        params = effective_params(cfg, run_dir)
    pj, pr, an, io_ = cfg["projectile"], cfg["propagation"], cfg["analysis"], cfg["io"]
    spec = ProjectileSpec(pj["epsilon_in"], pj["delta_epsilon"], pj["z0"])
    wf = build_initial_state(target, spec, pj["symmetry"])
    snap_dir = d / "snapshots"
    if io_["snapshots"] != "none":
        snap_dir.mkdir(exist_ok=True)
    index, trace = [], InfoTrace()
    phash = cfg.section_hash("model")
    try:
        for idx, snap in enumerate(propagate(wf, params, caps_from(cfg), pr["dt"],
                                             fs_to_au(pr["t_final_fs"]), pr["output_stride"],
                                             threads=threads, copy=False,
                                             stop_norm=pr["stop_norm"])):
            analyzed = idx % an["stride"] == 0
            if analyzed:
                row, pops = analyze_snapshot(snap, an["n_populations"],
                                             an["entropy_convention"], an["R_out"])
                trace.append(row, pops)
                log.info("t = %.3f fs  norm = %.6f  S_e = %.4f  S_N = %.4f", row["time_fs"],
                         row["norm"], row["S_e_vN"], row["S_N_vN"])
            if io_["snapshots"] == "all" or (analyzed and io_["snapshots"] == "analyzed"):
                name = f"snap_{idx:06d}"
                save_snapshot(snap, snap_dir, name, phash)
                index.append({"name": name, "index": idx, "time_fs": au_to_fs(snap.time),
                              "analyzed": analyzed})
    except (PropagationError, AnalysisError) as exc:
        manifest.fail("run", str(exc))
        raise StageError("run", str(exc)) from exc
    if io_["snapshots"] != "none":
        _dump_json(snap_dir / "index.json", {"stride": an["stride"], "snapshots": index})
    trace.write_csv(d / "info_trace.csv")
    trace.write_populations_csv(d / "nop.csv")
    hist = np.array(wf.norm_history)
    t_fs = au_to_fs(hist[:, 0])
    _write_csv(d / "norm.csv", ["time_fs", "norm"], [(float(a), float(b)) for a, b in
                                                      zip(t_fs, hist[:, 1])])
    summary = summarize(trace, t_fs, hist[:, 1], cfg)
    summary["epsilon_in"] = pj["epsilon_in"]
    summary["target_energy"] = target.energy
    _dump_json(d / "summary.json", summary)
    passed = all(summary["invariants"].values())
    manifest.record("run", key, ["info_trace.csv", "nop.csv", "norm.csv", "summary.json"],
                    time.time() - t0, invariants_passed=passed)
    return summary


def stage_analyze(cfg, run_dir, manifest, stride=None, strict=False):
    """Recompute the InfoTrace from stored snapshots into ``analysis/``."""
    t0 = time.time()
    d = pathlib.Path(run_dir)
    snap_dir = d / "snapshots"
    index_path = snap_dir / "index.json"
    if not index_path.exists():
        raise StageError("analyze", f"no snapshot index in {snap_dir}")
    index = json.loads(index_path.read_text())
    entries = index["snapshots"]
    if not entries:
        raise StageError("analyze", "snapshot index is empty")
    stride = stride or index["stride"]
    an = cfg["analysis"]
    trace = InfoTrace()
    skipped = []
    for e in entries:
        if e["index"] % stride:
            continue
        try:
            snap = load_snapshot(snap_dir, e["name"])
        except (OSError, ValueError, KeyError) as exc:
            if strict:
                raise StageError("analyze", f"snapshot {e['name']}: {exc}") from exc
            log.warning("skipping snapshot %s: %s", e["name"], exc)
            skipped.append(e["name"])
            continue
        row, pops = analyze_snapshot(snap, an["n_populations"], an["entropy_convention"],
                                     an["R_out"])
        trace.append(row, pops)
    if not len(trace):
        raise StageError("analyze", "no readable snapshots")
    trace.merge_sorted()
    out = d / "analysis"
    out.mkdir(exist_ok=True)
    trace.write_csv(out / "info_trace.csv")
    trace.write_populations_csv(out / "nop.csv")
    manifest.record("analyze", _key(manifest.key("run"), str(stride)),
                    ["analysis/info_trace.csv", "analysis/nop.csv"], time.time() - t0,
                    skipped=skipped)
    return trace, skipped


def stage_sweep(cfg, run_dir, manifest, threads=None):
    target = stage_relax(cfg, run_dir, manifest)
    params = effective_params(cfg, run_dir)
    rows = []
    ok = True
    for eps in cfg["sweep"]["energies"]:
        sub = pathlib.Path(run_dir) / f"eps_{eps:.2f}"
        sub_cfg = cfg.with_values("projectile", epsilon_in=eps).with_values(
            "io", run_dir=str(sub))
        sub_manifest = RunManifest(sub, sub_cfg)
        summary = stage_run(sub_cfg, sub, sub_manifest, threads=threads, target=target,
                            params=params)
        ok &= all(summary["invariants"].values())
        col = summary.get("collision", {})
        ret = summary.get("retention", {})
        rows.append((eps, col.get("t_S", math.nan), col.get("t_Delta", math.nan),
                     col.get("t_I", math.nan), ret.get("delta_S_before", math.nan),
                     ret.get("delta_S_after", math.nan), summary["norm_stages"]))
    _write_csv(pathlib.Path(run_dir) / "sweep_summary.csv",
               ["epsilon_in", "t_col_S", "t_col_Delta", "t_col_I", "delta_S_before",
                "delta_S_after", "norm_stages"], rows)
    return ok


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="icec1d", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=["calibrate", "pec", "relax", "run", "analyze", "sweep"])
    ap.add_argument("--config", required=True, help="INI run configuration")
    ap.add_argument("--out", help="run directory (overrides [io] run_dir)")
    ap.add_argument("--strict", action="store_true", help="fail on corrupt snapshots")
    ap.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV})")
    ap.add_argument("--stride", type=int, help="analyze: snapshot stride override")
    ap.add_argument("--force", action="store_true", help="rerun the stage even if up to date")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or (int(os.environ[THREADS_ENV]) if os.environ.get(THREADS_ENV)
                               else None)
    if threads:
        kernels.set_threads(threads)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.out:
            cfg = cfg.with_values("io", run_dir=args.out)
        run_dir = cfg["io"]["run_dir"]
        with manifest_lock(run_dir):
            manifest = RunManifest(run_dir, cfg)
            (pathlib.Path(run_dir) / "config.ini").write_text(cfg.to_string())
            cmd = args.command
            if cmd == "calibrate":
                res = stage_calibrate(cfg, run_dir, manifest, args.force)
                print(f"q_He = {res['q_He']:.8f}  q_Ne = {res['q_Ne']:.8f}  "
                      f"(target_Ne = {res['target_Ne']:.8f}, {res['target_Ne_source']})")
            elif cmd == "pec":
                res = stage_pec(cfg, run_dir, manifest, args.force)
                print(f"R_eq = {res['R_eq']:.5f}  delta_eps_01 = {res['delta_eps_01']:.5f}  "
                      f"delta_eps_02 = {res['delta_eps_02']:.5f}")
            elif cmd == "relax":
                tgt = stage_relax(cfg, run_dir, manifest, args.force)
                print(f"target energy = {tgt.energy:.10f}  <R> = {tgt.mean_R():.5f}")
            elif cmd == "run":
                summary = stage_run(cfg, run_dir, manifest, args.force, threads)
                print(json.dumps(summary, indent=1, sort_keys=True))
                if not all(summary["invariants"].values()):
                    return EXIT_INVARIANTS
            elif cmd == "analyze":
                trace, skipped = stage_analyze(cfg, run_dir, manifest, args.stride, args.strict)
                print(f"analyzed {len(trace)} snapshots, skipped {len(skipped)}")
            elif cmd == "sweep":
                if not stage_sweep(cfg, run_dir, manifest, threads):
                    return EXIT_INVARIANTS
    except (ConfigError, CalibrationError, PecError, RelaxationError, StageError,
            AnalysisError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
