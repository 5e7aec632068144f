"""Command-line entry point ``mmspec``.

Exit codes: 0 when every verdict passes, 1 when a verdict fails, 2 on invalid
input, 3 when a solver gives up.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .energy import default_lq, default_quadratic, energy_to_dict, n_components
from .errors import MMSpecError, NoConvergence, ValidationError
from .lab import PRESETS, REL_TOL, spectral_continuity_experiment
from .space import make_cycle, make_path, make_product, make_thin_torus, space_to_dict
from .sphere import build_phi, find_eigenpair, mean_zero_seeds, multistart, sphere_flow_run
from .spectrum import spectrum_report
from .transport import DUAL_TOL, solve_ot

EXIT_OK, EXIT_VERDICT, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2, 3
EIGEN_TOL = 1e-8


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _config(args, **extra) -> dict:
    # paths are replaced by content digests so outputs do not depend on location
    skip = {"out", "jobs", "figures", "func"}
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if k in ("space", "energy", "source", "target", "config") and v is not None:
            v = _file_digest(v)
        cfg[k] = v
    cfg.update(extra)
    return cfg


def _emit(title: str, text: str):
    print(f"--- {title} ---")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    print(f"--- end {title} ---")


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    kind = args.kind
    if kind == "cycle":
        S = make_cycle(args.n, args.circumference)
    elif kind == "path":
        S = make_path(args.n, args.length)
    elif kind == "thin_torus":
        S = make_thin_torus(args.n, args.m, args.eps)
    else:
        S = make_product(make_cycle(args.n, args.circumference), make_cycle(args.m, args.circumference))
    E = default_quadratic(S) if args.q is None else default_lq(S, args.q)
    cfg, tol = _config(args), {"validation": 1e-12}
    out = _out(args)
    mio.write_json(out / "space.json", space_to_dict(S), cfg, tol)
    mio.write_json(out / "energy.json", energy_to_dict(E), cfg, tol)
    summary = {
        "points": S.n,
        "ambient_dim": S.dim,
        "edges": len(S.graph),
        "energy": E.kind if args.q is None else f"lq q={args.q}",
        "components": n_components(E),
        "valid": True,
    }
    _emit("generate", mio.dumps(summary))
    return EXIT_OK


def _load_pair(args):
    S = mio.load_space(args.space)
    if args.energy is None:
        raise ValidationError("an energy file is required (use `generate` to create one)")
    return S, mio.load_energy(S, args.energy)


def cmd_validate(args) -> int:
    S = mio.load_space(args.space)
    info = {"points": S.n, "ambient_dim": S.dim, "valid": True}
    if args.energy is not None:
        E = mio.load_energy(S, args.energy)
        info.update(energy=E.kind, q=E.q, components=n_components(E))
    _emit("validate", mio.dumps(info))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    S, E = _load_pair(args)
    rows = spectrum_report(E, args.k_max, budget=args.budget, seed=args.seed, jobs=args.jobs)
    cfg = _config(args)
    tol = {"eigen_residual": EIGEN_TOL, "orthonormality": 1e-10}
    out = _out(args)
    header = ["k", "lambda_upper", "exact_flag", "inner_max_certified", "residual_of_matched_eigenpair"]
    table = [(r.k, r.lambda_upper, r.exact_flag, r.inner_max_certified, r.residual_of_matched_eigenpair) for r in rows]
    text = mio.csv_text(header, table, cfg, tol)
    (out / "spectrum.csv").write_text(text)
    pairs = [
        {"k": r.k, "lambda": r.matched_value, "residual": r.residual_of_matched_eigenpair}
        for r in rows
    ]
    mio.write_json(out / "eigenpairs.json", {"pairs": pairs}, cfg, tol)
    _emit("spectrum.csv", text)
    if args.figures:
        from .plotting import spectrum_figure

        print(f"figure: {spectrum_figure(rows, out / 'spectrum.png')}")
    return EXIT_OK


def _parse_u0(spec: str, n: int) -> np.ndarray:
    text = Path(spec).read_text() if os.path.exists(spec) else spec
    try:
        u = np.asarray(json.loads(text), float)
    except (json.JSONDecodeError, ValueError, TypeError):
        raise ValidationError("u0 must be a JSON list of numbers or a file holding one") from None
    if u.shape != (n,):
        raise ValidationError(f"u0 has {u.size} entries, the space has {n} points")
    return u


def _unit_start(E, spec: str) -> np.ndarray:
    u = _parse_u0(spec, E.space.n)
    nrm = math.sqrt(E.space.measure @ u**2)
    if not nrm > 0:
        raise ValidationError("u0 must not vanish")
    return u / nrm


def _write_trajectory(E, u0, T, cfg, out, figures):
    # sphere flow at the energy level of the start
    cf = build_phi(E, E.energy(u0))
    tau = 0.25 / cf.L
    traj = sphere_flow_run(cf, u0, T, tau)
    tol = {"sphere_drift": 5e-6 * tau * cf.L}
    text = mio.csv_text(["t", "energy", "slope", "evi_max_residual", "norm"], traj.rows(), cfg, tol)
    (out / "trajectory.csv").write_text(text)
    _emit("trajectory", mio.dumps({"states": len(traj.states), "tau": tau, "final_energy": traj.states[-1].energy}))
    if figures:
        from .plotting import trajectory_figure

        print(f"figure: {trajectory_figure(traj, out / 'trajectory.png')}")


def cmd_eigen(args) -> int:
    S, E = _load_pair(args)
    tol = args.tol if args.tol is not None else EIGEN_TOL
    deflate = [np.ones(S.n)] if args.deflate_constants else None
    cfg = _config(args)
    out = _out(args)
    u0 = None if args.u0 is None else _unit_start(E, args.u0)
    if args.trajectory is not None:
        if u0 is None:
            raise ValidationError("--trajectory needs a start vector --u0")
        _write_trajectory(E, u0, args.trajectory, cfg, out, args.figures)
    if u0 is not None:
        try:
            pairs = [find_eigenpair(E, u0, tol=tol, deflate=deflate)]
        except NoConvergence as exc:
            pairs = [exc.best]
    else:
        seeds = mean_zero_seeds(E, args.starts, np.random.default_rng(args.seed), deflate)
        pairs = multistart(E, seeds, tol=tol, jobs=args.jobs, deflate=deflate)
    body = {"pairs": [p.to_dict() for p in pairs]}
    mio.write_json(out / "eigenpairs.json", body, cfg, {"eigen_residual": tol})
    summary = [{"lambda": p.value, "residual": p.residual, "starts_used": p.starts_used} for p in pairs]
    _emit("eigen", mio.dumps(summary))
    ok = all(p is not None and p.residual <= tol for p in pairs)
    return EXIT_OK if ok else EXIT_VERDICT


def _family_from(args):
    if args.config is not None:
        cfg = mio.load_json(args.config)
        if not isinstance(cfg, dict) or "family" not in cfg:
            raise ValidationError("experiment config needs a 'family' field")
        name, params = cfg["family"], dict(cfg.get("params", {}))
        k_max = int(cfg.get("k_max", args.k_max))
        budget = int(cfg.get("budget", args.budget))
        rel = float(cfg.get("thresholds", {}).get("rel", args.tol if args.tol is not None else REL_TOL))
    else:
        name, params, k_max, budget = args.preset, {}, args.k_max, args.budget
        rel = args.tol if args.tol is not None else REL_TOL
    if name not in PRESETS:
        raise ValidationError(f"unknown family {name!r}; choose from {sorted(PRESETS)}")
    try:
        fam = PRESETS[name](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {name}: {exc}") from None
    return fam, k_max, budget, rel


def cmd_converge(args) -> int:
    fam, k_max, budget, rel = _family_from(args)
    rep = spectral_continuity_experiment(fam, k_max, budget, args.seed, rel, args.jobs)
    cfg = _config(args, family=fam.name, params=fam.params, k_max=k_max, budget=budget)
    tol = {"relative_gap": rel, "trend_floor": 1e-9}
    out = _out(args)
    text = mio.csv_text(["i", "k", "lambda_i_k", "lambda_limit_k", "gap"], rep.rows(), cfg, tol)
    (out / "continuity.csv").write_text(text)
    summary = {
        "family": fam.name,
        "kind": fam.kind,
        "k_max": k_max,
        "verdict": rep.verdict,
        "verdicts": rep.verdicts,
        "upper_ok": rep.upper_ok,
        "lower_ok": rep.lower_ok,
        "upper_gap": [float(np.max(rep.upper_gap[-3:, k])) for k in range(k_max)],
        "lower_gap": [float(np.max(rep.lower_gap[-3:, k])) for k in range(k_max)],
        "w2": rep.w2,
        "annotations": rep.annotations,
        "exact": rep.exact,
    }
    mio.write_json(out / "continuity.json", summary, cfg, tol)
    _emit("continuity.csv", text)
    _emit("verdict", mio.dumps({"verdict": rep.verdict, "verdicts": rep.verdicts}))
    if args.figures:
        from .plotting import continuity_figure

        print(f"figure: {continuity_figure(rep, out / 'continuity.png')}")
    return EXIT_OK if rep.verdict else EXIT_VERDICT


def cmd_ot(args) -> int:
    A = mio.load_space(args.source)
    B = mio.load_space(args.target)
    plan = solve_ot(A, B)
    cfg = _config(args)
    tol = {"marginal": 1e-10, "dual_residual": DUAL_TOL}
    out = _out(args)
    mio.write_json(out / "plan.json", plan.to_dict(), cfg, tol)
    _emit("plan", mio.dumps({"cost": plan.cost, "dual_residual": plan.dual_residual, "entries": int(np.count_nonzero(plan.plan))}))
    if args.figures:
        from .plotting import plan_figure

        print(f"figure: {plan_figure(plan, out / 'plan.png')}")
    return EXIT_OK if plan.dual_residual <= DUAL_TOL else EXIT_VERDICT


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--tol", type=float, default=None, help="override the command's main tolerance")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--out", default="mmspec-out", help="output directory")
    common.add_argument("--figures", action="store_true", help="also write PNG figures")

    p = argparse.ArgumentParser(prog="mmspec", description="Spectra of Cheeger energies on finite metric measure spaces.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a generated space and its default energy")
    g.add_argument("kind", choices=["cycle", "path", "thin_torus", "product"])
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--m", type=int, default=4)
    g.add_argument("--circumference", type=float, default=1.0)
    g.add_argument("--length", type=float, default=1.0)
    g.add_argument("--eps", type=float, default=0.1)
    g.add_argument("--q", type=lambda s: math.inf if s in ("inf", "Infinity") else float(s), default=None, help="write an lq energy instead of the quadratic one")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", parents=[common], help="validate a space file (and an energy file)")
    v.add_argument("space")
    v.add_argument("--energy")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("spectrum", parents=[common], help="min-max values with matched eigenpairs")
    s.add_argument("space")
    s.add_argument("energy")
    s.add_argument("--k-max", type=int, default=4)
    s.add_argument("--budget", type=int, default=16)
    s.set_defaults(func=cmd_spectrum)

    e = sub.add_parser("eigen", parents=[common], help="eigenpairs by the sphere-constrained flow")
    e.add_argument("space")
    e.add_argument("energy")
    e.add_argument("--u0", help="start vector (normalized before use): JSON list or file")
    e.add_argument("--starts", type=int, default=8, help="random starts when --u0 is absent")
    e.add_argument("--deflate-constants", action="store_true")
    e.add_argument("--trajectory", type=float, metavar="T", help="also dump the sphere flow from --u0 up to time T")
    e.set_defaults(func=cmd_eigen)

    c = sub.add_parser("converge", parents=[common], help="spectral continuity along a converging family")
    grp = c.add_mutually_exclusive_group(required=True)
    grp.add_argument("--preset", choices=sorted(PRESETS))
    grp.add_argument("--config", help="experiment config JSON")
    c.add_argument("--k-max", type=int, default=4)
    c.add_argument("--budget", type=int, default=8)
    c.set_defaults(func=cmd_converge)

    o = sub.add_parser("ot", parents=[common], help="optimal coupling between two space files")
    o.add_argument("source")
    o.add_argument("target")
    o.set_defaults(func=cmd_ot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MMSpecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
