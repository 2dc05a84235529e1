"""Experiment runner: every study is a subcommand writing CSV + JSON artifacts.

Exit status: 0 when the task's invariants all hold, 1 when a computed
invariant fails, 2 for configuration errors (reported exhaustively, nothing
written).  Identical (config, seed) pairs produce byte-identical artifacts.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import carleman, config as cfgmod, control, inverse
from .mesh import build_mesh, hardy_check
from .report import write_csv, write_json
from .rng import smooth_profile, stream
from .solvers import (ProblemSpec, duality_residual, energy_report,
                      solve_backward, solve_forward, trajectory_rows)
from .tree import build_tree
from .weights import build_weight_system

SINGULAR_ESTIMATES = ("thm-3.1", "thm-3.2", "lemma-3.4", "thm-4.2")


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _build_frame(cfg):
    p = cfg.sections["problem"]
    d = cfg.sections["discretization"]
    tree = build_tree(d["depth"], p["T"], cap=d["cap"])
    mesh = build_mesh(d["N"])
    return tree, mesh


def _problem_spec(cfg, with_coeffs=True, eps=None):
    p = cfg.sections["problem"]
    kwargs = dict(alpha=p["alpha"], eps=p["eps"] if eps is None else eps,
                  T=p["T"])
    if with_coeffs:
        kwargs.update(a=p["a"] or None, b=p["b"] or None, c=p["c"] or None)
    return ProblemSpec(**kwargs)


def _weight_system(cfg, kind, beta, lam, s, eps=None):
    p = cfg.sections["problem"]
    w = cfg.sections["weights"]
    return build_weight_system(kind, beta, lam, s,
                               p["eps"] if eps is None else eps, p["T"],
                               tuple(p["omega"]), tuple(p["omega1"]),
                               tuple(p["omega2"]), margin=w["margin"])


# ---------------------------------------------------------------------------
# task runners: each returns (summary dict, {filename: (header, rows)})


def run_simulate(cfg, seed, threads):
    tree, mesh = _build_frame(cfg)
    spec = _problem_spec(cfg)
    rng = stream(seed, "simulate/y0")
    y0 = smooth_profile(rng, mesh.centers)
    spec_data = ProblemSpec(alpha=spec.alpha, eps=spec.eps, T=spec.T, a=spec.a,
                            b=spec.b, c=spec.c, y0=y0)
    traj = solve_forward(spec_data, tree, mesh)
    energy = energy_report(traj, spec_data, tree, mesh)

    # duality on random data is the module's load-bearing invariant
    g = [stream(seed, "simulate/g", k).standard_normal((tree.node_count(k), mesh.N))
         * mesh.cell_mask(tuple(cfg.sections["problem"]["omega"]))
         for k in range(tree.n)]
    G = [stream(seed, "simulate/G", k).standard_normal((tree.node_count(k), mesh.N))
         for k in range(tree.n)]
    zT = stream(seed, "simulate/zT").standard_normal((tree.node_count(tree.n), mesh.N))
    fwd = solve_forward(spec_data, tree, mesh, g=g, G=G)
    bwd = solve_backward(spec, tree, mesh, zT)
    residual = duality_residual(spec_data, tree, mesh, fwd, bwd, g=g, G=G)

    free = solve_forward(ProblemSpec(alpha=spec.alpha, eps=spec.eps, y0=y0),
                         tree, mesh)
    norms = [float(np.sqrt(mesh.l2_norm_sq(v).mean())) for v in free.state.values]
    dissipative = max(norms) <= norms[0] * (1.0 + 1e-12)

    invariants = {"duality_residual_le_1e-10": residual <= 1e-10,
                  "noise_free_dissipative": bool(dissipative)}
    summary = {
        "results": {"duality_residual": residual,
                    "energy": {"sup_state": energy.sup_state,
                               "grad_energy": energy.grad_energy,
                               "fitted": energy.fitted}},
        "invariants": invariants,
    }
    header, rows = trajectory_rows(traj)
    return summary, {"trajectory.csv": (header, rows)}


def run_check(cfg, seed, threads):
    tree, mesh = _build_frame(cfg)
    t = cfg.sections["task"]
    w = cfg.sections["weights"]
    estimate = t["estimate"]
    beta = cfgmod.resolve_beta(cfg)
    kind = "singular" if estimate in SINGULAR_ESTIMATES else "regular"
    with_coeffs = estimate == "thm-4.2"
    spec = _problem_spec(cfg, with_coeffs=with_coeffs)
    system = _weight_system(cfg, kind, beta, w["lambda_grid"][0], w["s_grid"][0])

    label = f"check/{estimate}"
    ensemble = carleman.generate_ensemble(estimate, spec, tree, mesh,
                                          t["ensemble"], seed, label)
    reports = []
    for lam in w["lambda_grid"]:
        for s in w["s_grid"]:
            reports.append(carleman.run_check(
                estimate, ensemble, system.with_params(s=s, lam=lam),
                spec, tree, mesh))

    lhs_keys = sorted(reports[0].lhs)
    rhs_keys = sorted(reports[0].rhs)
    header = (["estimate", "s", "lambda", "eps", "N", "depth", "ensemble",
               "log_shift"] + [f"lhs_{k}" for k in lhs_keys]
              + [f"rhs_{k}" for k in rhs_keys] + ["fitted_C"])
    rows = []
    for r in reports:
        rows.append([r.name, r.params["s"], r.params["lambda"], r.params["eps"],
                     r.params["N"], r.params["depth"], r.ensemble, r.log_shift]
                    + [r.lhs[k] for k in lhs_keys] + [r.rhs[k] for k in rhs_keys]
                    + [r.fitted])

    nonneg = all(all(v >= 0.0 for v in list(r.lhs.values()) + list(r.rhs.values()))
                 for r in reports)
    finite = all(np.isfinite(r.fitted) for r in reports)
    tails = []
    for lam in w["lambda_grid"]:
        fits = [r.fitted for r in reports if r.params["lambda"] == lam]
        tails.append(carleman.monotone_tail_start(fits))
    tail_ok = all(ts is not None and ts < len(w["s_grid"]) - 1 for ts in tails)

    invariants = {"terms_nonnegative": bool(nonneg),
                  "fitted_finite": bool(finite),
                  "monotone_tail_in_s": bool(tail_ok)}
    summary = {
        "results": {
            "reports": [r.to_dict() for r in reports],
            "tail_start_index_per_lambda": [None if ts is None else int(ts)
                                            for ts in tails],
        },
        "invariants": invariants,
    }
    return summary, {"sweep.csv": (header, rows)}


def run_null_control(cfg, seed, threads):
    tree, mesh = _build_frame(cfg)
    t = cfg.sections["task"]
    spec = _problem_spec(cfg)
    beta = cfgmod.resolve_beta(cfg, purpose="control")
    system = _weight_system(cfg, "singular", beta, t["lambda_control"],
                            t["s_control"])
    hum_cfg = control.HumConfig(tau=t["tau_grid"][0], system=system,
                                s=t["s_control"], lam=t["lambda_control"],
                                cg_max=t["cg_max"], cg_tol=t["cg_tol"])
    y0 = smooth_profile(stream(seed, "null-control/y0"), mesh.centers)

    study = control.decay_study(spec, tree, mesh, y0, t["tau_grid"], hum_cfg)
    rows = [[r["tau"], r["terminal_energy"], r["weighted_cost"],
             r["cost_over_initial"], r["iterations"], r["optimality_residual"],
             r["converged"]] for r in study["rows"]]
    header = ["tau", "terminal_energy", "weighted_cost", "cost_over_initial",
              "iterations", "optimality_residual", "converged"]

    cfg_last = control.HumConfig(tau=t["tau_grid"][-1], system=system,
                                 s=t["s_control"], lam=t["lambda_control"],
                                 cg_max=t["cg_max"], cg_tol=t["cg_tol"])
    controls, traj, diag = control.hum_solve(spec, tree, mesh, y0, cfg_last)
    ctrl_rows = []
    for k in range(tree.n):
        for m in range(controls.g[k].shape[0]):
            for j in range(mesh.N):
                ctrl_rows.append([k, m, j, float(controls.g[k][m, j]),
                                  float(controls.G[k][m, j])])

    energies = [r["terminal_energy"] for r in study["rows"]]
    monotone = all(e2 < e1 for e1, e2 in zip(energies, energies[1:]))
    invariants = {
        "terminal_energy_strictly_decreasing": bool(monotone),
        "optimality_residual_le_tol": all(
            r["optimality_residual"] <= 10.0 * t["cg_tol"] for r in study["rows"]),
        "cg_converged": all(r["converged"] for r in study["rows"]),
        "control_supported_on_omega": bool(controls.check_support(mesh)),
    }
    summary = {
        "results": {"uncontrolled_terminal": study["uncontrolled_terminal"],
                    "initial_energy": study["initial_energy"],
                    "rows": study["rows"],
                    "last_tau_iterations": diag.iterations},
        "invariants": invariants,
    }
    tr_header, tr_rows = trajectory_rows(traj)
    return summary, {"decay.csv": (header, rows),
                     "controls.csv": (["step", "node", "x_index", "g", "G"],
                                      ctrl_rows),
                     "trajectory.csv": (tr_header, tr_rows)}


def run_inverse_source(cfg, seed, threads):
    tree, mesh = _build_frame(cfg)
    t = cfg.sections["task"]
    alpha = cfg.sections["problem"]["alpha"]
    omega = tuple(cfg.sections["problem"]["omega"])
    r = 1.0 + 0.5 * np.sin(np.pi * mesh.centers)

    design = inverse.assemble_map(r, tree, mesh, alpha, omega)
    h_true = 1.0 + 0.3 * smooth_time_profile_seeded(seed, tree.n)
    obs = inverse.forward_map(inverse.SourceSpec(r=r, h=h_true, y0=None),
                              tree, mesh, alpha, omega)
    h_hat, info = inverse.reconstruct(obs, r, tree, mesh, alpha, omega,
                                      mu=t["mu"], design=design)
    roundtrip = (inverse.intensity_norm(h_hat - h_true, tree)
                 / inverse.intensity_norm(h_true, tree))

    pulse = np.zeros(tree.n)
    pulse[tree.n // 2] = 1.0
    pobs = inverse.forward_map(inverse.SourceSpec(r=r, h=pulse, y0=None),
                               tree, mesh, alpha, omega)
    causal = all(float(np.max(np.abs(pobs.interior[k - 1]))) == 0.0
                 for k in range(1, tree.n // 2 + 1))

    lip = inverse.lipschitz_study(t["pairs"], tree, mesh, alpha, r, omega,
                                  seed=seed, design=design)

    invariants = {"roundtrip_relative_error_le_1e-8": roundtrip <= 1e-8,
                  "causality_exact": bool(causal),
                  "lipschitz_max_finite": bool(np.isfinite(lip.max_ratio)
                                               and lip.max_ratio > 0)}
    summary = {
        "results": {"roundtrip_relative_error": float(roundtrip),
                    "lipschitz": lip.to_dict(),
                    "smallest_singular_value": float(info.singular_values[0])},
        "invariants": invariants,
    }
    rec_rows = [[k, float(h_true[k]), float(h_hat[k])] for k in range(tree.n)]
    lip_rows = [[i, float(x)] for i, x in enumerate(lip.ratios)]
    return summary, {"reconstruction.csv": (["step", "h_true", "h_hat"], rec_rows),
                     "lipschitz.csv": (["pair", "ratio"], lip_rows)}


def smooth_time_profile_seeded(seed, n):
    from .rng import smooth_time_profile
    return smooth_time_profile(stream(seed, "inverse/h-true"), n)


def run_hardy(cfg, seed, threads):
    t = cfg.sections["task"]
    N = cfg.sections["discretization"]["N"]
    bound = 1.0 + 5.0 / N
    rows = []
    worst = 0.0
    for gamma in t["gammas"]:
        for eps in t["hardy_eps"]:
            if eps == 0.0 and gamma >= 1.0:
                continue  # outside the guaranteed range
            for i in range(t["profiles"]):
                rng = stream(seed, f"hardy/g={gamma}/e={eps}", i)
                z = rng.standard_normal(N)
                lhs, rhs, ratio = hardy_check(gamma, eps, z)
                worst = max(worst, ratio)
                rows.append([gamma, eps, i, lhs, rhs, ratio])
    invariants = {"ratio_le_bound": worst <= bound}
    summary = {"results": {"worst_ratio": worst, "bound": bound},
               "invariants": invariants}
    return summary, {"hardy.csv": (["gamma", "eps", "profile", "lhs", "rhs",
                                    "ratio"], rows)}


def run_observability(cfg, seed, threads):
    tree, mesh = _build_frame(cfg)
    t = cfg.sections["task"]
    spec = _problem_spec(cfg)
    omega = tuple(cfg.sections["problem"]["omega"])
    terminals = [carleman.brownian_terminal_profiles(tree, mesh,
                                                     stream(seed, "observability/zT", i))
                 for i in range(t["draws"])]
    report = carleman.check_observability(spec, tree, mesh, omega, terminals)
    invariants = {"max_ratio_finite": bool(np.isfinite(report.max_ratio)
                                           and report.max_ratio > 0.0)}
    summary = {"results": report.to_dict(), "invariants": invariants}
    rows = [[i, float(x)] for i, x in enumerate(report.ratios)]
    return summary, {"observability.csv": (["draw", "ratio"], rows)}


RUNNERS = {
    "simulate": run_simulate,
    "check": run_check,
    "null-control": run_null_control,
    "inverse-source": run_inverse_source,
    "hardy": run_hardy,
    "observability": run_observability,
}


# ---------------------------------------------------------------------------
# argument plumbing


def _make_parser():
    parser = argparse.ArgumentParser(
        prog="degen-spde",
        description="Numerical studies for a degenerate stochastic parabolic model")
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--out", help="output directory (default 'out')")
    parser.add_argument("--threads", type=int,
                        help="worker threads; falls back to DEGEN_SPDE_THREADS")
    sub = parser.add_subparsers(dest="task")
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--alpha", type=float)
        p.add_argument("--eps", type=float)
        p.add_argument("--T", type=float)
        p.add_argument("--N", type=int)
        p.add_argument("--n", "--depth", dest="depth", type=int)
        if name == "check":
            p.add_argument("--estimate")
            p.add_argument("--ensemble", type=int)
        if name == "null-control":
            p.add_argument("--tau-grid", dest="tau_grid",
                           help="either lo:hi decades (1e-1:1e-4) or a comma list")
        if name == "inverse-source":
            p.add_argument("--pairs", type=int)
        if name == "observability":
            p.add_argument("--draws", type=int)
        if name == "hardy":
            p.add_argument("--profiles", type=int)
    return parser


def _parse_tau_grid(textval: str):
    if ":" in textval:
        lo, hi = textval.split(":")
        lo_e = int(np.round(np.log10(float(lo))))
        hi_e = int(np.round(np.log10(float(hi))))
        step = -1 if hi_e < lo_e else 1
        return tuple(10.0**e for e in range(lo_e, hi_e + step, step))
    return tuple(float(x) for x in textval.split(","))


def _apply_overrides(cfg, args):
    mapping = {
        "alpha": ("problem", "alpha"), "eps": ("problem", "eps"),
        "T": ("problem", "T"), "N": ("discretization", "N"),
        "depth": ("discretization", "depth"),
        "estimate": ("task", "estimate"), "ensemble": ("task", "ensemble"),
        "pairs": ("task", "pairs"), "draws": ("task", "draws"),
        "profiles": ("task", "profiles"),
    }
    for attr, (section, key) in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(section, key, val)
    tau = getattr(args, "tau_grid", None)
    if tau is not None:
        cfg.sections["task"]["tau_grid"] = _parse_tau_grid(tau)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.threads is not None:
        cfg.set("run", "threads", args.threads)


def main(argv=None) -> int:
    parser = _make_parser()
    args = parser.parse_args(argv)
    if args.task is None:
        parser.print_help()
        return 2

    cfg = cfgmod.default_config()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
            return 2
        try:
            cfg = cfgmod.parse_config(text)
        except cfgmod.ConfigParseError as exc:
            for e in exc.errors:
                print(f"config error: {e}", file=sys.stderr)
            return 2
    cfg.set("task", "name", args.task)
    _apply_overrides(cfg, args)

    errors = cfgmod.validate(cfg)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2

    seed = cfg.sections["run"]["seed"]
    threads = cfg.sections["run"]["threads"]
    if args.threads is None and "DEGEN_SPDE_THREADS" in os.environ:
        try:
            threads = max(1, int(os.environ["DEGEN_SPDE_THREADS"]))
        except ValueError:
            print("config error: DEGEN_SPDE_THREADS must be an integer",
                  file=sys.stderr)
            return 2

    summary, artifacts = RUNNERS[args.task](cfg, seed, threads)

    out_dir = Path(args.out or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    for fname, (header, rows) in artifacts.items():
        write_csv(out_dir / fname, header, rows)
    passed = all(summary["invariants"].values())
    payload = {
        "task": args.task,
        "seed": seed,
        "parameters": cfg.sections,
        "pass": passed,
        **summary,
    }
    write_json(out_dir / "summary.json", payload)

    status = "PASS" if passed else "FAIL"
    print(f"{status} {args.task}: " + ", ".join(
        f"{k}={'ok' if v else 'FAIL'}" for k, v in summary["invariants"].items()))
    return 0 if passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
