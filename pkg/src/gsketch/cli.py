"""Command-line experiment runner.

Every command reads rows from ``--input`` or draws them from ``--generator``
and writes one CSV table to ``--out`` (stdout by default).  Summaries go to
stderr so the CSV stays byte-identical across replays with the same seed.

Exit codes: 0 success, 2 unparsable input or flags, 3 inconsistent
dimensions or parameters, 4 no fresh sampler left, 5 any other sampling or
estimation failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys

import numpy as np

from .config import RunConfig, load_config
from .errors import ContractViolation, EstimationFailure, FreshnessExhausted, InputError, StepFailed, UndefinedDistribution
from .estimator import estimate_mass
from .generators import GENERATORS
from .gsampler import BoostedSampler, GSampler, SamplerConfig
from .hashing import derive_seed
from .hessian import build_hessian_engine, hessian_run, newton_problem
from .io import read_rows
from .oracle import MAX_DIM, MAX_ROWS, ExactInstance, exact_second_moments, exact_variances
from .sgd import SGDConfig, build_engine, run_baseline, step_variance

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONTRACT = 3
EXIT_FRESHNESS = 4
EXIT_FAILURE = 5

BASELINE_MODES = {"uniform": "uniform", "exact": "exact_importance", "gd": "full_gd"}
BENCH_GENERATORS = ("example1", "example2", "example3")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return "" if v is None else str(v)


def _table(header, rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    for row in rows:
        out.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def generate(name: str, n: int, d: int, seed: int, nu: float = 1 / 16):
    if name not in GENERATORS:
        raise ContractViolation(f"unknown generator {name!r}")
    if name == "example3":
        return GENERATORS[name](n, d, nu=nu, seed=seed)
    return GENERATORS[name](n, d, seed=seed)


def load_rows(cfg: RunConfig):
    if cfg.input:
        return read_rows(cfg.input, cfg.format)
    return generate(cfg.generator, cfg.n, cfg.d, cfg.seed, cfg.nu)


def query_point(cfg: RunConfig, d: int) -> np.ndarray:
    if not cfg.x:
        return np.zeros(d)
    try:
        x = np.array([float(v) for v in cfg.x.split(",")])
    except ValueError:
        raise InputError(f"bad query point {cfg.x!r}") from None
    if len(x) != d:
        raise ContractViolation(f"query point has {len(x)} coordinates, rows have {d}")
    return x


def _oracle(A, b, measure):
    n, d = A.shape
    return ExactInstance(A, b, measure) if n <= MAX_ROWS and d <= MAX_DIM else None


def cmd_sample(cfg: RunConfig, log=None) -> str:
    log = log or sys.stderr
    A, b = load_rows(cfg)
    n, d = A.shape
    measure = cfg.measure_spec()
    sampler = BoostedSampler(SamplerConfig(d=d, n=n, eps=cfg.eps, alpha=cfg.alpha), cfg.seed, cfg.delta or 0.01)
    sampler.insert(np.arange(n), A, b).freeze()
    x = query_point(cfg, d)
    rng = np.random.default_rng(derive_seed(cfg.seed, "cli", "sample"))
    ids, vec, p_hat, used = sampler.draw_many(x, cfg.draws, measure, rng=rng)
    norms = np.linalg.norm(vec, axis=1)
    rows = [(t, int(i) if i >= 0 else None, int(u) if u >= 0 else None, p, v)
            for t, (i, u, p, v) in enumerate(zip(ids, used, p_hat, norms))]
    print(f"draws={cfg.draws} failed={int((ids < 0).sum())} instances={sampler.n_tries}", file=log)
    return _table(["draw", "row", "instance", "p_hat", "v_norm"], rows)


def cmd_estimate(cfg: RunConfig, log=None) -> str:
    A, b = load_rows(cfg)
    n, d = A.shape
    measure = cfg.measure_spec()
    sampler = GSampler(SamplerConfig(d=d, n=n, eps=cfg.eps, alpha=cfg.alpha), cfg.seed)
    sampler.insert(np.arange(n), A, b).freeze()
    x = query_point(cfg, d)
    est = estimate_mass(sampler, x, cfg.eps, measure)
    rows = [("estimate", est.value), ("guess", est.guess_used)]
    inst = _oracle(A, b, measure)
    if inst is not None:
        exact = inst.mass(x)
        rows += [("exact", exact), ("ratio", est.value / exact if exact > 0 else None)]
    return _table(["quantity", "value"], rows)


def _sgd_config(cfg: RunConfig, n: int, d: int) -> SGDConfig:
    return SGDConfig(
        T=cfg.T, d=d, n=n, eta=cfg.eta, measure=cfg.measure_spec(), eps=cfg.eps, alpha=cfg.alpha,
        delta=cfg.delta, use_sensitivity=cfg.sensitivity, seed=cfg.seed,
    )


def cmd_sgd(cfg: RunConfig, log=None) -> str:
    log = log or sys.stderr
    A, b = load_rows(cfg)
    n, d = A.shape
    scfg = _sgd_config(cfg, n, d)
    x0 = query_point(cfg, d)
    inst = _oracle(A, b, scfg.measure)
    if cfg.mode == "sketch":
        engine = build_engine(A, b, scfg)
        traj = engine.run(x0, inst.objective if inst else None)
    elif cfg.mode in BASELINE_MODES:
        traj = run_baseline(A, b, x0, scfg, BASELINE_MODES[cfg.mode])
    else:
        raise ContractViolation(f"unknown mode {cfg.mode!r}")
    proxies = traj.proxies()
    final = inst.objective(traj.iterates[-1]) if inst else float("nan")
    uses = max(traj.ledger.values(), default=0)
    print(f"final_F={final:.12g} average_F={inst.objective(traj.average) if inst else float('nan'):.12g} "
          f"mean_proxy={proxies.mean() if len(proxies) else 0.0:.12g} "
          f"samplers_used={len(traj.ledger)} max_uses={uses}", file=log)
    return traj.to_csv()


def cmd_bench_variance(cfg: RunConfig, log=None) -> str:
    names = (cfg.generator,) if cfg.generator in BENCH_GENERATORS else BENCH_GENERATORS
    rows = []
    for name in names:
        A, b = generate(name, cfg.n, cfg.d, cfg.seed, cfg.nu)
        n, d = A.shape
        measure = cfg.measure_spec()
        inst = ExactInstance(A, b, measure)
        x = query_point(cfg, d)
        var = exact_variances(inst, x)
        mom = exact_second_moments(inst, x)
        engine = build_engine(A, b, _sgd_config(cfg, n, d))
        sketch_var, _ = step_variance(engine, x, cfg.draws)
        rows.append((
            name, n, d, var.sigma2_uni, var.sigma2_opt, sketch_var,
            var.sigma2_uni / var.sigma2_opt if var.sigma2_opt > 0 else None,
            mom.sigma2_uni / mom.sigma2_opt if mom.sigma2_opt > 0 else None,
        ))
    return _table(["generator", "n", "d", "sigma2_uni", "sigma2_opt", "sigma2_sketch", "var_ratio", "ratio"], rows)


def cmd_hessian(cfg: RunConfig, log=None) -> str:
    log = log or sys.stderr
    A, b = load_rows(cfg)
    n, d = A.shape
    objective, grad, reg = newton_problem(A, b, cfg.order, cfg.measure_spec())
    engine = build_hessian_engine(A, b, _sgd_config(cfg, n, d), cfg.order)
    x0 = query_point(cfg, d)
    traj = hessian_run(engine, x0, grad, s=cfg.batch, objective=objective, reg_hessian=reg)
    print(f"initial_F={objective(x0):.12g} final_F={objective(traj.iterates[-1]):.12g} "
          f"samplers_used={len(traj.ledger)}", file=log)
    return traj.to_csv()


COMMANDS = {
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "sgd": cmd_sgd,
    "bench-variance": cmd_bench_variance,
    "hessian": cmd_hessian,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("--input")
    common.add_argument("--format", choices=["csv", "bin"])
    common.add_argument("--generator", choices=sorted(GENERATORS))
    common.add_argument("--n", type=int)
    common.add_argument("--d", type=int)
    common.add_argument("--nu", type=float)
    common.add_argument("--measure", choices=["l1", "l2", "huber", "ridge", "lasso", "group_lasso"])
    common.add_argument("--tau", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--groups", help='group lasso partition, e.g. "0 1;2 3"')
    common.add_argument("--T", type=int)
    common.add_argument("--eta", type=float)
    common.add_argument("--eps", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--mode", choices=["sketch", "uniform", "exact", "gd"])
    common.add_argument("--draws", type=int)
    common.add_argument("--x", help="comma-separated query point (default: zeros)")
    common.add_argument("--order", type=int, choices=[2, 3])
    common.add_argument("--batch", type=int, help="Hessians per second-order step")
    common.add_argument("--sensitivity", action=argparse.BooleanOptionalAction, default=None)
    parser = argparse.ArgumentParser(prog="gsketch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


_META = ("command", "config", "print_config")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: v for k, v in vars(args).items() if k not in _META}
        cfg = load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        text = COMMANDS[args.command](cfg)
        if cfg.out:
            with open(cfg.out, "w", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    except InputError as exc:
        print(f"gsketch: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FreshnessExhausted as exc:
        print(f"gsketch: {exc}", file=sys.stderr)
        return EXIT_FRESHNESS
    except ContractViolation as exc:
        print(f"gsketch: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (EstimationFailure, StepFailed, UndefinedDistribution) as exc:
        print(f"gsketch: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
