"""Batch scenarios: run a configured experiment, write artifacts and a summary.

Each scenario returns a :class:`ScenarioResult` whose ``values`` are the
headline numbers and whose ``violations`` list every invariant outside
tolerance.  ``summary.json`` carries both; it has no timestamps, so
reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qstruct import bohm, classical, gridstate, sgdyn
from qstruct.config import ScenarioConfig
from qstruct.gridstate import Grid1D, change_structure, covering_grids, split_entropy
from qstruct.structure import cm_relative_map, invert

log = logging.getLogger(__name__)


@dataclass
class ScenarioResult:
    scenario: str
    values: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def check(self, name: str, ok: bool, detail: str) -> None:
        if not ok:
            self.violations.append(f"{name}: {detail}")

    def summary(self, tolerances: dict) -> dict:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "values": self.values,
            "tolerances": tolerances,
            "violations": self.violations,
        }


def _clean(obj):
    """Make values JSON-serializable (numpy scalars, tuples, non-finite floats)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def worker_count() -> int:
    cap = os.environ.get("QSTRUCT_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


# --- sg-run ----------------------------------------------------------------


def _sg_initial(cfg: ScenarioConfig, sg: sgdyn.SGConfig):
    i = cfg.initial
    return sgdyn.sg_initial_state(
        sg, z0=i["z0"], sigma=i["sigma_cm"], k0=i["k0"], spin_amps=(i["spin_up"], i["spin_dn"])
    )


def _sg_checks(res: ScenarioResult, cfg: ScenarioConfig, sg, record, initial, final) -> None:
    tol = cfg.tolerances
    v = res.values
    report = sgdyn.branch_analysis(final)
    w0 = np.array(record.weights[0])
    t_end = record.times[-1]
    v["t_final"] = t_end
    v["steps"] = sg.steps
    v["dt"] = sg.dt
    v["spin_entropy_final"] = record.spin_entropy[-1]
    v["spin_entropy_max"] = max(record.spin_entropy)
    v["branch_overlap_final"] = report.overlap
    v["branch_weights_final"] = report.weights
    v["weight_drift_max"] = float(np.max(np.abs(np.array(record.weights) - w0)))
    v["norm_drift_max"] = float(np.max(np.abs(np.array(record.norm) - 1.0)))
    v["meanZ_final"] = report.mean_z
    v["meanP_final"] = record.mean_p[-1]
    v["R_fidelity"] = sgdyn.internal_fidelity(initial, final)
    v["R_L1_drift_max"] = max(record.r_l1_drift)

    res.check("norm", v["norm_drift_max"] < tol["norm_drift_max"], f"norm drift {v['norm_drift_max']:.3e}")
    res.check("weights", v["weight_drift_max"] <= tol["weight_tol"], f"S_z weight drift {v['weight_drift_max']:.3e}")
    res.check("R_fidelity", v["R_fidelity"] >= 1 - tol["r_infidelity_max"], f"R fidelity {v['R_fidelity']:.12f}")
    res.check("R_L1", v["R_L1_drift_max"] <= tol["r_l1_max"], f"R marginal L1 drift {v['R_L1_drift_max']:.3e}")

    both = w0.min() > 0
    if sg.b == 0 or sg.mu == 0:
        res.check("free_entropy", v["spin_entropy_max"] <= tol["free_entropy_max"],
                  f"spin entropy reached {v['spin_entropy_max']:.3e} without a gradient")
        return

    expected = sgdyn.ehrenfest_momentum(sg, t_end, cfg.initial["k0"])
    v["meanP_ehrenfest"] = expected
    rel = [abs(p - e) / abs(e - cfg.initial["k0"]) for p, e, w in zip(v["meanP_final"], expected, w0) if w > 0]
    v["ehrenfest_rel_err"] = max(rel)
    res.check("ehrenfest", v["ehrenfest_rel_err"] <= tol["ehrenfest_rel_tol"],
              f"branch momentum off the Ehrenfest value by {v['ehrenfest_rel_err']:.3%}")
    if not both:
        return
    res.check("overlap", report.overlap < tol["overlap_max"], f"branch overlap {report.overlap:.3e}")
    if abs(w0[0] - w0[1]) < 1e-12:
        s_err = abs(v["spin_entropy_final"] - math.log(2))
        v["spin_entropy_err"] = s_err
        res.check("spin_entropy", s_err <= tol["spin_entropy_tol"], f"|S_spin - ln 2| = {s_err:.3e}")
        v["branch_weight_err"] = float(np.max(np.abs(np.array(report.weights) - 0.5)))
        res.check("branch_weights", v["branch_weight_err"] <= tol["weight_tol"],
                  f"branch weights {report.weights}")

    shifts = sgdyn.subsystem_shifts(initial, final, sg)
    v["shift_Z_CM"] = shifts.d_z_cm
    v["shift_z_e"] = shifts.d_z_e
    v["shift_z_p"] = shifts.d_z_p
    ratios = shifts.ratios()
    v["shift_ratio_z_e"] = ratios["z_e"]
    v["shift_ratio_z_p"] = ratios["z_p"]
    lo = tol["deflection_ratio_min"]
    res.check("statement_O", min(ratios["z_e"] + ratios["z_p"]) > lo,
              f"particle shifts relative to CM shift {ratios}")


def run_sg(cfg: ScenarioConfig, out: Path) -> ScenarioResult:
    sg = cfg.sg_config()
    initial = _sg_initial(cfg, sg)
    record, final = sgdyn.run(initial, sg, save_every=cfg.numerics["save_every"])
    res = ScenarioResult("sg-run")
    _sg_checks(res, cfg, sg, record, initial, final)
    record.to_csv(out / "record.csv")
    gridstate.save_snapshot(final, out / "final_state.json", out / "final_state.csv")
    res.artifacts += ["record.csv", "final_state.json", "final_state.csv"]
    return res


# --- bohm-run --------------------------------------------------------------


def run_bohm(cfg: ScenarioConfig, out: Path) -> ScenarioResult:
    sg = cfg.sg_config()
    b = cfg.bohm
    tol = cfg.tolerances
    initial = _sg_initial(cfg, sg)
    cm = cm_relative_map(sg.m_e, sg.m_p)
    ensemble = bohm.sample_initial(initial, b["n_traj"], cfg.seed, cm)
    record = sgdyn.EvolutionRecord()
    r0 = gridstate.marginal_density(initial, 1)
    ks_t, ks_v = [], []
    last = {}

    def on_save(t, state, x):
        record.append(t, state, r0)
        if b["n_traj"] >= bohm.MIN_KS_SAMPLES:
            ks_t.append(t)
            ks_v.append(bohm.equivariance_statistic(x, state, cm))
        last["state"] = state

    dt_traj = b["dt_traj_ratio"] * sg.dt
    masses = (sg.total_mass, sg.reduced_mass)
    filled = bohm.integrate(
        ensemble, sgdyn.evolve(initial, sg), dt_traj, masses,
        save_every=cfg.numerics["save_every"], node_epsilon=b["node_epsilon"], on_save=on_save,
    )
    final = last["state"]

    res = ScenarioResult("bohm-run")
    v = res.values
    v["n_traj"] = b["n_traj"]
    v["dt_traj"] = dt_traj
    v["saved_times"] = len(filled.times)
    v["norm_drift_max"] = float(np.max(np.abs(np.array(record.norm) - 1.0)))
    res.check("norm", v["norm_drift_max"] < tol["norm_drift_max"], f"norm drift {v['norm_drift_max']:.3e}")
    if ks_v:
        v["ks_max"] = max(ks_v)
        v["ks_initial"] = ks_v[0]
        v["ks_final"] = ks_v[-1]
        res.check("equivariance", v["ks_max"] <= tol["ks_max"], f"max KS distance {v['ks_max']:.4f}")
    else:
        res.check("equivariance", False, f"need at least {bohm.MIN_KS_SAMPLES} trajectories for KS")

    report = bohm.subsystem_deflection(filled, cm)
    ep = filled.ep_positions()
    v["deflection"] = report.to_dict()
    v["z_e_final_bimodal"] = bohm.is_bimodal(ep[-1, :, 0]) if filled.n else False
    v["Z_CM_order_preserved"] = bohm.ordering_preserved(filled.cmr_positions()[..., 0])
    res.check("no_crossing", v["Z_CM_order_preserved"], "trajectories changed order in Z_CM")
    res.check("rho_drift", report.rho_ks_drift <= tol["ks_max"], f"rho KS drift {report.rho_ks_drift:.4f}")
    if sg.b != 0 and sg.mu != 0 and min(record.weights[0]) > 0:
        sigma = cfg.initial["sigma_cm"]
        dz = report.branch_means["Z_CM"]
        v["cm_deflection_sigmas"] = [abs(x) / sigma for x in dz]
        res.check("cm_deflection", min(v["cm_deflection_sigmas"]) > tol["cm_deflection_sigmas"],
                  f"branch Z_CM deflections {dz}")
        ratios = [abs(report.branch_means[name][k]) / abs(dz[k]) for name in ("z_e", "z_p") for k in (0, 1)]
        v["particle_deflection_ratio_min"] = min(ratios)
        res.check("statement_O_prime", min(ratios) >= tol["deflection_ratio_min"],
                  f"particle deflections relative to CM {ratios}")
        res.check("bimodal", v["z_e_final_bimodal"], "final z_e histogram is not bimodal")

    record.to_csv(out / "record.csv")
    filled.to_csv(out / "trajectories.csv", max_traj=b["csv_max_traj"])
    (out / "ensemble_summary.json").write_text(bohm.ensemble_summary(report, ks_t, ks_v))
    res.artifacts += ["record.csv", "trajectories.csv", "ensemble_summary.json"]
    return res


# --- er-demo ---------------------------------------------------------------


def _product_grids(variances, sigmas: float, n: int) -> tuple[Grid1D, Grid1D]:
    return tuple(Grid1D(-sigmas * math.sqrt(v), sigmas * math.sqrt(v), n) for v in variances)


def run_er(cfg: ScenarioConfig, out: Path) -> ScenarioResult:
    e = cfg.er
    tol = cfg.tolerances
    cm = cm_relative_map(e["m1"], e["m2"])
    res = ScenarioResult("er-demo")
    v = res.values

    # product in e+p, viewed in CM+R
    ep_grids = _product_grids((e["var1"], e["var2"]), e["grid_sigmas"], e["n"])
    ep = gridstate.gaussian_spin_state((0, 0), (math.sqrt(e["var1"]), math.sqrt(e["var2"])), (0, 0), (1, 0), ep_grids)
    cmr = change_structure(ep, cm, covering_grids(ep_grids, cm, (e["n"], e["n"])))
    v["ep_product"] = {
        "entropy_ep": split_entropy(ep, "q1|q2,spin"),
        "entropy_cmr": split_entropy(cmr, "q1|q2,spin"),
        "entropy_cmr_analytic": gridstate.gaussian_split_entropy(np.diag([e["var1"], e["var2"]]), cm),
        "norm_after_refactorization": cmr.norm_sq(),
    }

    # product in CM+R, viewed in e+p
    cmr_grids = _product_grids((e["cm_var"], e["rho_var"]), e["grid_sigmas"], e["n"])
    cmr2 = gridstate.gaussian_spin_state(
        (0, 0), (math.sqrt(e["cm_var"]), math.sqrt(e["rho_var"])), (0, 0), (1, 0), cmr_grids, "CM+R"
    )
    to_ep = invert(cm)
    ep2 = change_structure(cmr2, to_ep, covering_grids(cmr_grids, to_ep, (e["n"], e["n"])))
    v["cmr_product"] = {
        "entropy_cmr": split_entropy(cmr2, "q1|q2,spin"),
        "entropy_ep": split_entropy(ep2, "q1|q2,spin"),
        "entropy_ep_analytic": gridstate.gaussian_split_entropy(np.diag([e["cm_var"], e["rho_var"]]), to_ep),
        "norm_after_refactorization": ep2.norm_sq(),
    }

    a, b = v["ep_product"], v["cmr_product"]
    small = tol["product_entropy_max"]
    res.check("ep_product", a["entropy_ep"] <= small, f"e|p entropy {a['entropy_ep']:.3e}")
    res.check("cmr_product", b["entropy_cmr"] <= small, f"CM|R entropy {b['entropy_cmr']:.3e}")
    for name, grid_s, exact in (("ep_product", a["entropy_cmr"], a["entropy_cmr_analytic"]),
                                ("cmr_product", b["entropy_ep"], b["entropy_ep_analytic"])):
        res.check(f"{name}_oracle", abs(grid_s - exact) <= tol["oracle_entropy_tol"],
                  f"grid entropy {grid_s:.6f} vs analytic {exact:.6f}")
        if exact >= tol["entangled_entropy_min"]:
            res.check(f"{name}_relativity", grid_s >= tol["entangled_entropy_min"],
                      f"refactorized entropy {grid_s:.4f} below {tol['entangled_entropy_min']}")
        elif exact < 1e-12:
            res.check(f"{name}_separable", grid_s <= small, f"refactorized entropy {grid_s:.3e}")
    v["symmetric"] = bool(math.isclose(e["m1"] * e["var1"], e["m2"] * e["var2"], rel_tol=1e-12))

    gridstate.save_snapshot(ep, out / "ep_product.json")
    gridstate.save_snapshot(cmr, out / "ep_product_in_cmr.json")
    res.artifacts += ["ep_product.json", "ep_product.csv", "ep_product_in_cmr.json", "ep_product_in_cmr.csv"]
    return res


# --- classical-sweep -------------------------------------------------------


def run_classical(cfg: ScenarioConfig, out: Path) -> ScenarioResult:
    s = cfg.sweep
    tol = cfg.tolerances
    res = ScenarioResult("classical-sweep")
    v = res.values
    grid = classical.default_sweep(s["sigma1"], s["sigma2"], s["masses"])
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        points = list(pool.map(lambda p: classical.sweep_point(*p), grid))

    with open(out / "sweep.csv", "w") as fh:
        fh.write("sigma1,sigma2,m1,m2,MI_cmr,gap\n")
        for p in points:
            fh.write(",".join(repr(float(x)) for x in (p.sigma1, p.sigma2, p.m1, p.m2, p.mi_cmr, p.gap)) + "\n")

    on = [p for p in points if p.on_locus]
    v["points"] = len(points)
    v["on_locus_points"] = len(on)
    v["on_locus_mi_max"] = max((p.mi_cmr for p in on), default=0.0)
    res.check("locus_zero", v["on_locus_mi_max"] <= tol["mi_zero_tol"], f"on-locus MI {v['on_locus_mi_max']:.3e}")

    # every on-locus point needs an off-locus neighbour one sweep step away with MI above threshold
    s1, s2 = list(s["sigma1"]), list(s["sigma2"])
    index = {(p.sigma1, p.sigma2, p.m1, p.m2): p for p in points}
    neighbour_mi = []
    for p in on:
        i, j = s1.index(p.sigma1), s2.index(p.sigma2)
        near = [index.get((s1[i + di], p.sigma2, p.m1, p.m2)) for di in (-1, 1) if 0 <= i + di < len(s1)]
        near += [index.get((p.sigma1, s2[j + dj], p.m1, p.m2)) for dj in (-1, 1) if 0 <= j + dj < len(s2)]
        best = max((q.mi_cmr for q in near if q is not None and not q.on_locus), default=0.0)
        neighbour_mi.append(best)
    v["off_locus_neighbour_mi_min"] = min(neighbour_mi, default=0.0)
    res.check("locus_sharp", bool(on) and v["off_locus_neighbour_mi_min"] > tol["mi_offlocus_min"],
              "no on-locus point with an off-locus neighbour above threshold")
    off = [p for p in points if not p.on_locus]
    v["off_locus_mi_min"] = min((p.mi_cmr for p in off), default=0.0)

    # matrix route vs closed-form correlation route for every point
    errs = []
    for p in points:
        r = classical.correlation_after_cm_map(p.sigma1**2, p.sigma2**2, p.m1, p.m2)
        errs.append(abs(p.mi_cmr - classical.gaussian_mutual_information(r)))
    v["mi_oracle_err_max"] = max(errs)
    res.check("mi_oracle", v["mi_oracle_err_max"] <= tol["mi_oracle_tol"], f"MI oracle error {v['mi_oracle_err_max']:.3e}")

    worked = classical.sweep_point(1.0, math.sqrt(2.0), 1.0, 1.0)
    v["worked_point"] = {"var1": 1.0, "var2": 2.0, "m1": 1.0, "m2": 1.0, "MI_cmr": worked.mi_cmr, "gap": worked.gap}
    res.check("worked_point", abs(worked.mi_cmr - 0.0589) <= 1e-4, f"worked-point MI {worked.mi_cmr:.6f}")
    d = classical.product_density(classical.Gaussian1D(0.0, 1.0), classical.Gaussian1D(0.0, 2.0))
    t = classical.transform_density(d, cm_relative_map(1.0, 1.0))
    (out / "worked_point_densities.json").write_text(
        json.dumps({"e+p": d.to_dict(), "CM+R": t.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    res.artifacts += ["sweep.csv", "worked_point_densities.json"]
    return res


RUNNERS = {
    "sg-run": run_sg,
    "bohm-run": run_bohm,
    "er-demo": run_er,
    "classical-sweep": run_classical,
}


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Run ``cfg.scenario``, writing artifacts and ``summary.json`` into ``cfg.output_dir``.

    Raises OSError if the output directory cannot be created or written.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    res = RUNNERS[cfg.scenario](cfg, out)
    write_json(out / "summary.json", res.summary(cfg.tolerances))
    res.artifacts.append("summary.json")
    log.info("%s: %s", cfg.scenario, "passed" if res.passed else f"{len(res.violations)} violations")
    return res
