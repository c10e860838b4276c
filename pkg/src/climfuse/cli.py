"""Command-line interface: ``climfuse simulate | fit | summarize | validate | trace``.

Exit codes: 0 success, 1 failed check or runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .covariance import Grid
from .diagnostics import GewekeDesign, UnknownParameter, export_trace, geweke_test
from .io import (
    ConfigError,
    InputError,
    build_chain_config,
    load_config,
    read_chain,
    read_manifest,
    write_chain,
    write_dataset,
    write_field,
)
from .model import ModelVariant
from .oracles import run_oracle_suite
from .sampler import KNOWN_MUTATIONS, SamplerError, run_chain
from .simulate import cmip5_sized_design, desk_cmip5_design, desk_design, generate, load_design, paper_design
from .summarize import TooFewDraws, correlation_from_v, multi_model_mean, quantile_of_value, region_mean_ci, summarize

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

_DESIGNS = {
    "paper": paper_design,
    "cmip5": cmip5_sized_design,
    "desk": desk_design,
    "desk-cmip5": desk_cmip5_design,
}


def _fail(message: str, code: int) -> int:
    print(message, file=sys.stderr)
    return code


def cmd_simulate(args) -> int:
    if args.design in _DESIGNS:
        design = _DESIGNS[args.design](seed=args.seed)
    else:
        try:
            design = load_design(args.design, seed=args.seed)
        except FileNotFoundError:
            return _fail(f"config: design file {args.design} not found", EXIT_USAGE)
        except (ValueError, KeyError, TypeError) as exc:
            return _fail(f"config: invalid design file {args.design}: {exc}", EXIT_USAGE)
    data, truth, params = generate(design)
    try:
        manifest = write_dataset(args.out, data, truth, params, {"design": design.name, "seed": args.seed})
    except OSError as exc:
        return _fail(f"output: cannot write to {args.out}: {exc.strerror}", EXIT_USAGE)
    print(f"wrote {manifest} ({data.M} models, {int(data.run_counts_h.sum())} historical runs, {data.N} observation sets)")
    return EXIT_OK


def _fit_one(job):
    data, config, priors, out = job
    chain = run_chain(data, config, priors)
    write_chain(out, chain)
    return out, chain.acceptance, chain.wall_time


def _chain_paths(out: Path, k: int) -> list[Path]:
    if k == 1:
        return [out]
    return [out.with_name(f"{out.stem}.{i + 1}{out.suffix}") for i in range(k)]


def cmd_fit(args) -> int:
    try:
        data, _ = read_manifest(args.manifest)
        settings, priors = load_config(args.config) if args.config else ({}, None)
        variant = ModelVariant.parse(args.variant) if args.variant else settings.pop("variant", "full")
        settings.pop("variant", None)
        base = build_chain_config(settings, variant=variant, seed=args.seed)
    except InputError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except ValueError as exc:
        return _fail(f"dimension: {exc}", EXIT_USAGE)
    if args.chains < 1:
        return _fail("config: --chains must be >= 1", EXIT_USAGE)
    out = Path(args.out)
    if not out.parent.exists():
        return _fail(f"output: directory {out.parent} does not exist", EXIT_USAGE)
    jobs = []
    for i, path in enumerate(_chain_paths(out, args.chains)):
        cfg = build_chain_config(base.to_dict(), seed=base.seed + i)
        jobs.append((data, cfg, priors, path))
    started = time.perf_counter()
    try:
        if len(jobs) == 1:
            results = [_fit_one(jobs[0])]
        else:
            with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
                results = list(pool.map(_fit_one, jobs))
    except SamplerError as exc:
        return _fail(str(exc), EXIT_CHECK)
    for path, acceptance, wall in results:
        print(f"chain {path}: {wall:.1f} s")
        print(f"  {'parameter':<16} acceptance")
        for name, rate in acceptance.items():
            print(f"  {name:<16} {rate:.3f}")
    print(f"wall time {time.perf_counter() - started:.1f} s")
    return EXIT_OK


def cmd_summarize(args) -> int:
    try:
        chain = read_chain(args.chain)
    except InputError as exc:
        return _fail(str(exc), EXIT_USAGE)
    missing = [k for k in ("y_h", "y_f", "v", "beta") if k not in chain.draws]
    if missing:
        return _fail(f"chain: missing fields {', '.join(missing)}", EXIT_CHECK)
    try:
        summary = summarize(chain)
    except TooFewDraws as exc:
        return _fail(f"chain: {exc}", EXIT_CHECK)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = Grid(chain.sites, metric=chain.metric)
    write_field(out / "summary_y_h.csv", grid, None, summary.y_h.as_columns())
    write_field(out / "summary_y_f.csv", grid, None, summary.y_f.as_columns())
    b = summary.beta
    (out / "beta.txt").write_text(
        f"mean={b.mean[0]!r} sd={b.sd[0]!r} q05={b.q05[0]!r} q50={b.q50[0]!r} q95={b.q95[0]!r}\n"
    )
    if args.mmm_from:
        try:
            data, _ = read_manifest(args.mmm_from)
        except InputError as exc:
            return _fail(str(exc), EXIT_USAGE)
        if data.n != grid.n:
            return _fail(f"dimension: manifest has {data.n} sites, chain has {grid.n}", EXIT_USAGE)
        mmm_h, mmm_f = multi_model_mean(data)
        probs = quantile_of_value(chain, mmm_f, "y_f")
        write_field(out / "mmm_quantile.csv", grid, None, {"mmm": mmm_f, "probability": probs})
        write_field(out / "mmm.csv", grid, None, {"historical": mmm_h, "future": mmm_f})
    if args.region_ci:
        mean, lo, hi = region_mean_ci(chain, args.level)
        line = f"region_mean={mean!r} lower={lo!r} upper={hi!r} level={args.level!r}"
        if args.mmm_from:
            line += f" difference_vs_mmm={mean - float(mmm_f.mean())!r}"
        (out / "region_ci.txt").write_text(line + "\n")
        print(line)
    if args.v_corr:
        corr, pairs = correlation_from_v(chain, args.threshold)
        names = chain.model_names
        with open(out / "v_correlation.csv", "w") as fh:
            fh.write("model," + ",".join(names) + "\n")
            for name, row in zip(names, corr):
                fh.write(name + "," + ",".join(repr(float(x)) for x in row) + "\n")
        with open(out / "v_pairs.csv", "w") as fh:
            fh.write("model_a,model_b,correlation\n")
            for a, b_, value in pairs:
                fh.write(f"{a},{b_},{value!r}\n")
        print(f"{len(pairs)} model pairs above {args.threshold}")
    print(f"wrote summaries to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    mutations = tuple(args.mutate or ())
    unknown = sorted(set(mutations) - set(KNOWN_MUTATIONS))
    if unknown:
        return _fail(f"validate: unknown mutation {', '.join(unknown)}", EXIT_USAGE)
    if args.suite == "geweke":
        report = geweke_test(GewekeDesign(), sweeps=1, rounds=args.rounds, seed=args.seed, mutations=mutations)
        rows = report.rows()
        ok = report.ok()
        failing = report.failing()
        for row in rows:
            print(f"{'PASS' if row['pass'] else 'FAIL'} {row['statistic']} z={row['z']:.2f}")
        print(f"{report.pass_fraction:.0%} of statistics within |z| < 3")
    else:
        results = run_oracle_suite(args.seed, mh_steps=args.mh_steps)
        rows = [{"check": r.name, "kind": r.kind, "statistic": r.statistic, "limit": r.limit, "pass": r.passed}
                for r in results]
        failing = [r.name for r in results if not r.passed]
        ok = not failing
        for r in results:
            print(r.line())
    report_path = Path(args.report)
    report_path.write_text(json.dumps({"suite": args.suite, "seed": args.seed, "passed": ok, "failing": failing,
                                       "checks": rows}, indent=1, sort_keys=True) + "\n")
    if not ok:
        return _fail("validate: failing checks: " + ", ".join(failing), EXIT_CHECK)
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        chain = read_chain(args.chain)
        export_trace(chain, args.param, args.out)
    except InputError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except UnknownParameter as exc:
        return _fail(f"trace: unknown parameter {exc.args[0]}", EXIT_USAGE)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="climfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--design", default="paper", help="paper | cmip5 | desk | desk-cmip5 | path to a JSON design")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the sampler on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", choices=[v.value for v in ModelVariant])
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="posterior summaries from a chain file")
    p.add_argument("--chain", required=True)
    p.add_argument("--mmm-from")
    p.add_argument("--region-ci", action="store_true")
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--v-corr", action="store_true")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("validate", help="run a sampler-correctness suite")
    p.add_argument("--suite", choices=["geweke", "oracles"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=10_000)
    p.add_argument("--mh-steps", type=int, default=100_000)
    p.add_argument("--report", default="validate_report.json")
    p.add_argument("--mutate", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("trace", help="export one parameter's draws as CSV")
    p.add_argument("--chain", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except SamplerError as exc:
        return _fail(str(exc), EXIT_CHECK)


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
