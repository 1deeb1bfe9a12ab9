"""Command-line entry point: ``safeinit <command> ...``.

Exit codes: 0 success, 2 certification failure, 3 parse error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import experiments, lipschitz, synthesis
from .config import ExperimentConfig, load_model, write_sections
from .errors import ConfigError, ParseError, SynthesisFailed
from .sysmodel import Dataset, extract_phi_samples

EXIT_OK, EXIT_CERT, EXIT_PARSE = 0, 2, 3


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def cmd_estimate(args):
    data = Dataset.from_csv(args.data)
    model = load_model(args.model) if args.model else None
    cfg = lipschitz.LipschitzConfig(beta=args.beta, kernel=args.kernel, bandwidth=args.bandwidth,
                                    max_pairs=args.max_pairs, support_mode=args.support,
                                    seed=experiments.stage_seed(args.seed, "pairs"))
    t0 = time.perf_counter()
    if model is None:
        model = experiments.pendulum_model()
        if data.X.shape[1] != model.n_x:
            raise ConfigError("--model is required for non-pendulum datasets")
    if args.relevance:
        model, est, mask = experiments.estimate_from_data(data, model, cfg)
    else:
        est = lipschitz.estimate_lipschitz(extract_phi_samples(model, data), cfg)
        mask = None
    os.makedirs(args.out, exist_ok=True)
    experiments.write_rows(os.path.join(args.out, "kde_curve.csv"), ["ell", "density"],
                           experiments.kde_curve_rows(est))
    summary = dict(L_hat=est.L_hat, beta=est.beta, kernel=est.kernel, bandwidth=est.bandwidth,
                   support_mode=est.support_mode, n_samples=est.n_samples, n_slopes=est.n_slopes,
                   n_degenerate=est.n_degenerate, max_slope=est.max_slope,
                   relevance_mask=None if mask is None else [bool(m) for m in mask],
                   seconds=time.perf_counter() - t0)
    write_sections(os.path.join(args.out, "estimate.txt"), {"estimate": summary})
    print(f"L_hat = {est.L_hat:.6g}")
    return EXIT_OK


def cmd_synthesize(args):
    model = load_model(args.model)
    opts = synthesis.SynthesisOptions(nu=args.nu, ubar=args.ubar, maximize_domain=args.maximize_domain)
    if args.alpha is not None:
        opts.alphas = [args.alpha]
    os.makedirs(args.out, exist_ok=True)
    try:
        cert = synthesis.synthesize(model, args.lhat, opts)
    except SynthesisFailed as exc:
        rows = sorted(exc.merits.items(), reverse=True)
        experiments.write_rows(os.path.join(args.out, "failure.csv"), ["alpha", "merit"], rows)
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    cert.save(os.path.join(args.out, "certificate.txt"))
    chk = synthesis.verify_theorem1(model, cert)
    report = dict(alpha=cert.alpha, nu=cert.nu, theorem1_lambda_max=chk.margin, certified=chk.ok,
                  P_min_eig=float(np.linalg.eigvalsh(cert.P)[0]))
    if cert.xis:
        report["input_constraint_max"] = float(np.max(synthesis.input_constraint_values(cert)))
    write_sections(os.path.join(args.out, "verification.txt"), {"verification": report})
    print(f"certified alpha = {cert.alpha:g}, margin = {chk.margin:.3e}")
    return EXIT_OK if chk.ok else EXIT_CERT


def cmd_bench(args):
    names = None if args.functions == "all" else args.functions.split(",")
    rows, summaries = lipschitz.benchmark_suite(names, tuple(args.n), tuple(args.beta), args.runs, args.seed)
    os.makedirs(args.out, exist_ok=True)
    experiments.write_rows(os.path.join(args.out, "bench_runs.csv"),
                           ["function", "n", "beta", "run", "elapsed_s", "L_hat"],
                           [tuple(asdict(r).values()) for r in rows])
    experiments.write_rows(os.path.join(args.out, "bench_summary.csv"),
                           ["function", "n", "beta", "time_mean", "time_std", "L_mean", "L_std", "L_star",
                            "overestimate_freq"],
                           [tuple(asdict(s).values()) for s in summaries])
    for s in summaries:
        print(f"{s.function} n={s.n} beta={s.beta:g}: {s.L_mean:.3f} +- {s.L_std:.3f} "
              f"(L*={s.L_star:.3f}, OE {100 * s.overestimate_freq:.0f}%)")
    return EXIT_OK


def cmd_pendulum(args):
    try:
        summary = experiments.run_pendulum(args.mode, args.seed, args.out, iterations=args.iterations)
    except SynthesisFailed as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    _report(args.out, f"pendulum_{args.mode}", summary)
    return EXIT_OK


def cmd_linear20(args):
    try:
        res = experiments.run_linear20(args.seed, args.out, max_iter=args.iterations)
    except SynthesisFailed as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    _report(args.out, "linear20", dict(L_hat=res.L_hat, L_true=res.L_true, alpha=res.certificate.alpha,
                                       spectral_radius=res.spectral_radius,
                                       pi_iterations=res.learn.iterations,
                                       max_final_norm=float(res.final_norms.max()),
                                       diverged=res.diverged, **{f"seconds_{k}": v for k, v in res.timings.items()}))
    return EXIT_OK


def cmd_run(args):
    """Runs an experiment described by a config file; flags given on the command line win."""
    cfg = ExperimentConfig.from_file(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or cfg.out_dir
    if cfg.name == "linear20":
        ns = argparse.Namespace(seed=seed, out=out, iterations=int(cfg.learning.get("max_iter", 30)))
        return cmd_linear20(ns)
    if cfg.name == "pendulum":
        ns = argparse.Namespace(seed=seed, out=out, mode=cfg.learning.get("mode", "unconstrained-pi"),
                                iterations=int(cfg.learning.get("max_iter", 20)))
        return cmd_pendulum(ns)
    raise ConfigError(f"unknown experiment {cfg.name!r}")


def _report(out, name, summary):
    os.makedirs(out, exist_ok=True)
    write_sections(os.path.join(out, f"{name}_report.txt"), {name: summary})
    for k, v in summary.items():
        print(f"{k} = {json.dumps(v) if not isinstance(v, float) else f'{v:.6g}'}")


def build_parser():
    p = argparse.ArgumentParser(prog="safeinit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="Lipschitz estimate from a transition CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="model file; defaults to the torsional pendulum")
    e.add_argument("--beta", type=float, default=0.01)
    e.add_argument("--kernel", choices=lipschitz.KERNELS, default="gaussian")
    e.add_argument("--bandwidth", type=float)
    e.add_argument("--support", choices=lipschitz.SUPPORT_MODES, default="positive")
    e.add_argument("--max-pairs", type=int, default=50_000)
    e.add_argument("--relevance", action="store_true", help="narrow C_q by relevance detection first")
    e.add_argument("--seed", type=_seed, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("synthesize", help="certified initial controller from a model and L_hat")
    s.add_argument("--model", required=True)
    s.add_argument("--lhat", type=float, required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--nu", type=float)
    s.add_argument("--ubar", type=float)
    s.add_argument("--maximize-domain", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    b = sub.add_parser("bench", help="benchmark table for the Lipschitz estimator")
    b.add_argument("--functions", default="all")
    b.add_argument("--runs", type=int, default=100)
    b.add_argument("--n", type=int, nargs="+", default=[100, 500])
    b.add_argument("--beta", type=float, nargs="+", default=[1e-2, 1e-4])
    b.add_argument("--seed", type=_seed, required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("pendulum", help="torsional pendulum scenarios")
    d.add_argument("--mode", choices=["collect", "unconstrained-pi", "constrained-pi", "vi"], required=True)
    d.add_argument("--iterations", type=int, default=20)
    d.add_argument("--seed", type=_seed, required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_pendulum)

    li = sub.add_parser("linear20", help="random 20-state, 10-input linear system")
    li.add_argument("--iterations", type=int, default=30)
    li.add_argument("--seed", type=_seed, required=True)
    li.add_argument("--out", required=True)
    li.set_defaults(func=cmd_linear20)

    r = sub.add_parser("run", help="experiment from a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=_seed)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        where = f" (row {exc.row}, column {exc.column})" if getattr(exc, "row", None) is not None else ""
        print(f"parse error: {exc}{where}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
