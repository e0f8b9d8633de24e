"""Command-line front end.

Every run writes its outputs plus ``manifest-<command>.json`` into
``--out``. Outputs are reproducible byte for byte from the inputs, the
configuration and ``--seed``; only the manifest carries wall-clock data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    COST_TOTAL,
    REFERENCE_COST_MEAN,
    ZoneTable,
    atomic_write,
    build_system,
    file_hash,
    gen_synthetic,
    load_csv,
    save_csv,
    save_matrix,
)
from .dynamics import IntegratorConfig, find_equilibrium, r_squared, simulate_ode, simulate_sde
from .errors import ConvergenceError, InputError, NumericalError, UrbanStructureError
from .inference import (
    Chain,
    ChainConfig,
    RouletteConfig,
    diagnostics,
    grid_axis,
    grid_log_posterior,
    pm_gibbs_chain,
    saddle_gibbs_chain,
)
from .model import HyperParams, Theta
from .samplers import AisConfig, parallel_tempering_sample

CONFIG_ENV = "URBAN_STRUCTURE_CONFIG"

log = logging.getLogger("urban_structure")

DEFAULT_CONFIG = {
    "hyper": {"gamma": 100.0, "delta": None, "kappa": None, "epsilon": 1.0, "lam": 0.1, "K": 1.0},
    "cost_total": COST_TOTAL,
    "chain": {},
    "ais": {},
    "roulette": {},
    "integrator": {},
    "tempering": {"n_levels": 5, "n_burn": 1000},
}


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path}: {exc}") from None
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "gamma", None) is not None:
        cfg["hyper"]["gamma"] = args.gamma
    if getattr(args, "lam", None) is not None:
        cfg["hyper"]["lam"] = args.lam
    if getattr(args, "iters", None) is not None:
        cfg["chain"]["n_iters"] = args.iters
    if getattr(args, "particles", None) is not None:
        cfg["ais"]["n_particles"] = args.particles
    if getattr(args, "temps", None) is not None:
        cfg["ais"]["n_temperatures"] = args.temps
    return cfg


def _load_problem(args, cfg):
    """System, observed sizes and hyperparameters from the zone tables."""
    origins, dests = load_csv(args.origins), load_csv(args.dests)
    h = cfg["hyper"]
    system, y, report = build_system(origins, dests, K=h["K"], delta=h.get("delta"),
                                     cost_total=cfg["cost_total"])
    kappa = h.get("kappa") or report.kappa
    hyper = HyperParams(gamma=h["gamma"], delta=report.delta, kappa=kappa,
                        epsilon=h.get("epsilon", 1.0), lam=h.get("lam", 0.1), K=h["K"])
    return system, y, hyper, report, file_hash(args.origins, args.dests)


def _write_csv_rows(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else repr(float(v)) for v in row) for row in rows]
    atomic_write(path, "\n".join(lines) + "\n")


# --- Subcommands -----------------------------------------------------------


def cmd_gen(args, cfg):
    h = cfg["hyper"]
    delta = h.get("delta") or 0.006
    kappa = h.get("kappa") or (1.0 + delta * args.M) / h["K"]
    hyper = HyperParams(gamma=h["gamma"], delta=delta, kappa=kappa, lam=h.get("lam", 0.1), K=h["K"])
    inst = gen_synthetic(args.M, args.N, Theta(args.alpha, args.beta), hyper, args.seed)
    out = Path(args.out)
    origins = ZoneTable([f"o{i + 1}" for i in range(args.N)], inst.origin_xy[:, 0],
                        inst.origin_xy[:, 1], inst.system.origin)
    dests = ZoneTable([f"d{j + 1}" for j in range(args.M)], inst.dest_xy[:, 0],
                      inst.dest_xy[:, 1], inst.y)
    save_csv(origins, out / "origins.csv")
    save_csv(dests, out / "dests.csv")
    truth = {
        "alpha": args.alpha, "beta": args.beta, "x_true": inst.x_true.tolist(),
        "hyper": dataclasses.asdict(hyper),
        "cost_total": REFERENCE_COST_MEAN * args.M * args.N,
    }
    atomic_write(out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return ["origins.csv", "dests.csv", "truth.json"], None


def cmd_simulate(args, cfg):
    system, y, hyper, _, digest = _load_problem(args, cfg)
    theta = Theta(args.alpha, args.beta)
    icfg = IntegratorConfig(**{**cfg["integrator"], **_drop_none(dt=args.dt, n_steps=args.steps)})
    w0 = y if args.from_data else np.full(system.M, hyper.K / system.M)
    if args.sde:
        _require_seed(args)
        traj = simulate_sde(system, theta, hyper, np.log(w0), icfg, args.seed)
    else:
        traj = simulate_ode(system, theta, hyper, w0, icfg)
    atomic_write(Path(args.out) / "trajectory.csv", traj.to_csv())
    return ["trajectory.csv"], digest


def cmd_equilibrium(args, cfg):
    system, y, hyper, _, digest = _load_problem(args, cfg)
    w0 = y if args.from_data else np.full(system.M, hyper.K / system.M)
    icfg = IntegratorConfig(**{"dt": 0.5, **cfg["integrator"]})
    w = find_equilibrium(system, Theta(args.alpha, args.beta), hyper, w0, icfg)
    ids = load_csv(args.dests).ids
    _write_csv_rows(Path(args.out) / "equilibrium.csv", ["id", "size"], [(i, v) for i, v in zip(ids, w)])
    return ["equilibrium.csv"], digest


def _sweep(fn, n, threads):
    axis = grid_axis(n)
    cells = [(i, j) for i in range(n) for j in range(n)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            vals = list(pool.map(fn, cells))
    else:
        vals = [fn(c) for c in cells]
    return axis, np.array(vals).reshape(n, n)


def cmd_rsq(args, cfg):
    system, y, hyper, _, digest = _load_problem(args, cfg)
    axis = grid_axis(args.grid_n)

    def cell(ij):
        try:
            return r_squared(system, Theta(axis[ij[0]], axis[ij[1]]), hyper, y)
        except (NumericalError, ConvergenceError):
            return np.nan

    axis, mat = _sweep(cell, args.grid_n, args.threads)
    out = Path(args.out)
    save_matrix(out / "rsq.csv", mat)
    save_matrix(out / "alpha.csv", axis[:, None])
    save_matrix(out / "beta.csv", axis[:, None])
    i, j = np.unravel_index(np.nanargmax(mat), mat.shape)
    log.info("R^2 maximum %.4f at alpha=%.2f beta=%.2f", mat[i, j], axis[i], axis[j])
    return ["rsq.csv", "alpha.csv", "beta.csv"], digest


def cmd_grid(args, cfg):
    system, y, hyper, _, digest = _load_problem(args, cfg)
    res = grid_log_posterior(system, y, hyper, n=args.grid_n, threads=args.threads)
    out = Path(args.out)
    save_matrix(out / "log_posterior.csv", res.log_post)
    save_matrix(out / "error_mask.csv", res.error_mask.astype(float))
    save_matrix(out / "alpha.csv", res.alphas[:, None])
    save_matrix(out / "beta.csv", res.betas[:, None])
    log.info("grid argmax alpha=%.2f beta=%.2f", *res.argmax())
    return ["log_posterior.csv", "error_mask.csv", "alpha.csv", "beta.csv"], digest


def cmd_prior_sample(args, cfg):
    _require_seed(args)
    system, _, hyper, _, digest = _load_problem(args, cfg)
    tcfg = cfg["tempering"]
    states = parallel_tempering_sample(
        system, Theta(args.alpha, args.beta), hyper, n_levels=tcfg.get("n_levels", 5),
        chain_len=args.samples, rng=np.random.default_rng(args.seed), n_burn=tcfg.get("n_burn", 1000),
    )
    header = [f"x_{j + 1}" for j in range(system.M)]
    _write_csv_rows(Path(args.out) / "samples.csv", header, states)
    return ["samples.csv"], digest


def cmd_infer(args, cfg):
    _require_seed(args)
    system, y, hyper, _, digest = _load_problem(args, cfg)
    chain_cfg = ChainConfig(**cfg["chain"])
    rng = np.random.default_rng(args.seed)
    if args.method == "saddle":
        chain = saddle_gibbs_chain(system, y, hyper, chain_cfg.n_iters, chain_cfg, rng)
    else:
        roulette = RouletteConfig(ais=AisConfig(**cfg["ais"]), **cfg["roulette"])
        chain = pm_gibbs_chain(system, y, hyper, chain_cfg.n_iters, chain_cfg, rng, roulette=roulette)
    header = {
        "seed": args.seed, "method": args.method, "config": cfg, "dataset_sha256": digest,
        "theta_acceptance": chain.theta_acceptance, "x_acceptance": chain.x_acceptance,
        "n_failed": chain.n_failed, **chain.meta,
    }
    atomic_write(Path(args.out) / "chain.csv", chain.to_csv(header))
    return ["chain.csv"], digest


def cmd_summarize(args, cfg):
    chain = Chain.from_csv(Path(args.chain).read_text(encoding="utf-8"))
    summary = diagnostics(chain)
    out = Path(args.out)
    atomic_write(out / "summary.json", json.dumps(
        {k: v for k, v in summary.as_dict().items() if k != "kde"}, indent=2, sort_keys=True) + "\n")
    names = []
    for name, (grid, dens) in summary.kde.items():
        _write_csv_rows(out / f"kde_{name}.csv", [name, "density"], zip(grid, dens))
        names.append(f"kde_{name}.csv")
    for flag in summary.flags:
        log.warning("%s", flag)
    return ["summary.json", *names], file_hash(args.chain)


def _drop_none(**kw):
    return {k: v for k, v in kw.items() if v is not None}


def _require_seed(args):
    if getattr(args, "seed", None) is None:
        raise InputError("--seed is required for stochastic commands")


# --- Parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urban-structure", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, seed=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        if data:
            sp.add_argument("--origins", required=True, help="origin zone CSV")
            sp.add_argument("--dests", required=True, help="destination zone CSV (observed sizes)")
        sp.add_argument("--seed", type=int, required=seed)

    def theta_args(sp):
        sp.add_argument("--alpha", type=float, required=True)
        sp.add_argument("--beta", type=float, required=True)

    sp = sub.add_parser("gen", help="draw a synthetic instance")
    common(sp, data=False, seed=True)
    theta_args(sp)
    sp.add_argument("--M", type=int, required=True)
    sp.add_argument("--N", type=int, required=True)

    sp = sub.add_parser("simulate", help="integrate the ODE or SDE")
    common(sp)
    theta_args(sp)
    sp.add_argument("--sde", action="store_true")
    sp.add_argument("--dt", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--from-data", action="store_true", help="start at the observed sizes")

    sp = sub.add_parser("equilibrium", help="relax to a deterministic equilibrium")
    common(sp)
    theta_args(sp)
    sp.add_argument("--from-data", action="store_true")

    sp = sub.add_parser("rsq", help="R^2 of equilibria over the parameter grid")
    common(sp)
    sp.add_argument("--grid-n", type=int, default=100)

    sp = sub.add_parser("grid", help="noise-free log posterior over the parameter grid")
    common(sp)
    sp.add_argument("--grid-n", type=int, default=100)

    sp = sub.add_parser("prior-sample", help="parallel-tempered draws of X given theta")
    common(sp)
    theta_args(sp)
    sp.add_argument("--samples", type=int, default=10_000)

    sp = sub.add_parser("infer", help="run a posterior chain")
    common(sp)
    sp.add_argument("--method", choices=("saddle", "pm"), default="saddle")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--particles", type=int)
    sp.add_argument("--temps", type=int)

    sp = sub.add_parser("summarize", help="posterior summaries of a saved chain")
    sp.add_argument("--out", required=True)
    sp.add_argument("--chain", required=True)
    return p


COMMANDS = {
    "gen": cmd_gen, "simulate": cmd_simulate, "equilibrium": cmd_equilibrium, "rsq": cmd_rsq,
    "grid": cmd_grid, "prior-sample": cmd_prior_sample, "infer": cmd_infer, "summarize": cmd_summarize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        outputs, digest = COMMANDS[args.command](args, cfg)
    except UrbanStructureError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, TypeError) as exc:
        # TypeError comes from unknown keys in a config section.
        print(f"error: bad_input: {exc}", file=sys.stderr)
        return InputError.exit_code
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "dataset_sha256": digest,
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
        "outputs": sorted(outputs),
    }
    atomic_write(Path(args.out) / f"manifest-{args.command}.json",
                 json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
