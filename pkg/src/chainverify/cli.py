"""Command-line entry point: ``chainverify <subcommand> ...``.

Stages talk through JSONL files (generate -> verify -> select/vote), so each
expensive stage can be resumed and inspected on its own.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, simcorr
from .core import PrefixSpec, read_chains, write_chains, write_jsonl
from .errors import ChainVerifyError
from .mathcheck import ToleranceSpec, check_formula_detail, extract_marked_formulas
from .scoring import score_chain
from .verifiers import ALL_KINDS

log = logging.getLogger("chainverify")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _subsets(text: str) -> list[list[str]]:
    out = []
    for part in text.split(";"):
        kinds = [k.strip() for k in part.split(",") if k.strip()]
        for k in kinds:
            if k not in {v.value for v in ALL_KINDS}:
                raise argparse.ArgumentTypeError(f"unknown verifier {k!r}")
        out.append(kinds)
    return out


def _global_parent(sub: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if sub else {}
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="experiment config JSON file", **kw)
    g.add_argument("--cache-dir", help="response cache directory (overrides config)", **kw)
    g.add_argument("--seed", type=int, help="global seed (overrides config)", **kw)
    g.add_argument("--jobs", type=int, help="problems processed in parallel", **kw)
    g.add_argument("--verbose", "-v", action="store_true", help="debug logging to stderr", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent(sub=True)
    parser = argparse.ArgumentParser(prog="chainverify", description="Verifier-guided selection of reasoning chains.",
                                     parents=[_global_parent(sub=False)])
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[parent])

    p = add("generate", "sample reasoning chains for every problem")
    p.add_argument("--out", required=True, help="chains JSONL to write")

    p = add("verify", "score every step of every chain with the configured verifiers")
    p.add_argument("--chains", required=True)
    p.add_argument("--out", required=True, help="step scores JSONL to write")
    _prefix_args(p)

    p = add("select", "pick one chain per problem and report accuracy")
    p.add_argument("--chains", required=True)
    p.add_argument("--scores", help="step scores JSONL (needed for top_verifier)")
    p.add_argument("--mode", choices=harness.SELECTION_MODES, default="top_verifier")
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True, help="per-problem selections JSONL")
    p.add_argument("--chain-scores", help="also write chain scores JSONL here")

    p = add("vote", "ensemble a pool of k chains per problem by voting")
    p.add_argument("--chains", required=True)
    p.add_argument("--scores")
    p.add_argument("--mode", choices=harness.VOTE_MODES, default="weighted")
    p.add_argument("--pool", choices=harness.SELECTION_MODES, default="top_verifier")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True)

    p = add("prefix", "verify only a prefix of each chain, then select")
    p.add_argument("--chains", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--percent", type=float)
    g.add_argument("--count", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True, help="per-problem selections JSONL")
    p.add_argument("--scores-out", help="write prefix step scores here")

    p = add("ablate", "top_verifier accuracy for several verifier subsets")
    p.add_argument("--subsets", type=_subsets, required=True,
                   help='";"-separated subsets of comma-separated verifiers, e.g. "perplexity;perplexity,relevance"')
    p.add_argument("--chains")
    p.add_argument("--scores")
    p.add_argument("--csv", required=True)
    p.add_argument("--json")

    p = add("mathcheck", "check <<lhs=rhs>> calculations line by line")
    p.add_argument("input", nargs="?", help="file to read (default stdin)")
    p.add_argument("--abs-tol", type=float, default=0.005)
    p.add_argument("--rel-tol", type=float, default=1e-4)

    p = add("simulate", "Monte Carlo selection score versus verifier correlation")
    p.add_argument("--correlations", type=_float_list, default=list(simcorr.DEFAULT_CORRELATIONS))
    p.add_argument("--n-problems", type=int, default=2000)
    p.add_argument("--chains", type=int, default=simcorr.SimParams.chains_per_problem)
    p.add_argument("--steps", type=int, default=simcorr.SimParams.steps_per_chain)
    p.add_argument("--quality-prior", default=simcorr.SimParams.quality_prior)
    p.add_argument("--out", required=True)

    p = add("report", "full pipeline: generate, verify and evaluate every selection mode")
    p.add_argument("--modes", default=",".join(harness.SELECTION_MODES))
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", required=True, help="report CSV")
    p.add_argument("--chains-out")
    p.add_argument("--scores-out")
    return parser


def _prefix_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--percent", type=float)
    g.add_argument("--count", type=int)


def _prefix(args):
    if getattr(args, "percent", None) is not None:
        return PrefixSpec("percent", args.percent)
    if getattr(args, "count", None) is not None:
        return PrefixSpec("count", args.count)
    return None


def _config(args) -> harness.ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    cfg = harness.ExperimentConfig.from_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.cache_dir:
        overrides["cache_dir"] = args.cache_dir
    if args.jobs:
        overrides["jobs"] = args.jobs
    if getattr(args, "trials", None):
        overrides["trials"] = args.trials
    return replace(cfg, **overrides) if overrides else cfg


def _load_data(cfg, args, need_scores: bool) -> harness.ExperimentData:
    problems = harness.load_problems(cfg.dataset_path)
    by_pid: dict = {p.id: [] for p in problems}
    for c in read_chains(args.chains):
        if c.problem_id not in by_pid:
            raise UsageError(f"chain {c.chain_id} refers to unknown problem {c.problem_id}")
        by_pid[c.problem_id].append(c)
    data = harness.ExperimentData(problems, by_pid)
    data.failures = {pid: "no chains" for pid, cs in by_pid.items() if not cs}
    if getattr(args, "scores", None):
        data.scores = harness.read_scores(args.scores)
    elif need_scores:
        raise UsageError("--scores is required for this mode")
    return data


def _write_records(path, row: harness.ModeResult):
    write_jsonl(path, row.records)


def cmd_generate(args):
    cfg = _config(args)
    backend = harness.open_backend(cfg)
    data = harness.generate(cfg, harness.load_problems(cfg.dataset_path), backend, cfg.jobs)
    write_chains(args.out, [c for p in data.problems for c in data.problem_chains(p.id)])
    n = sum(len(v) for v in data.chains.values())
    print(f"generate: {n} chains for {len(data.problems)} problems, {len(data.failures)} failures")


def cmd_verify(args):
    cfg = _config(args)
    data = _load_data(cfg, args, need_scores=False)
    backend = harness.open_backend(cfg)
    harness.verify(cfg, data, backend, cfg.jobs, prefix=_prefix(args))
    harness.write_scores(args.out, data.scores)
    print(f"verify: {sum(len(v) for v in data.scores.values())} step scores, {len(data.failures)} failures")


def cmd_select(args):
    cfg = _config(args)
    data = _load_data(cfg, args, need_scores=args.mode == "top_verifier")
    cfg = replace(cfg, vote=None)
    report = harness.run_trials(cfg, data, [args.mode])
    row = report.rows[0]
    _write_records(args.out, row)
    if args.chain_scores:
        cs = [score_chain(c.chain_id, data.scores.get(c.chain_id, []), cfg.weights, cfg.verifiers)
              for p in data.problems for c in data.problem_chains(p.id)]
        harness.write_chain_scores(args.chain_scores, cs)
    print(row.summary())


def cmd_vote(args):
    cfg = _config(args)
    need = args.pool == "top_verifier" or args.mode == "weighted"
    data = _load_data(cfg, args, need_scores=need)
    if args.k < 1 or args.k > cfg.n_chains:
        raise UsageError(f"-k must be in [1, {cfg.n_chains}]")
    cfg = replace(cfg, vote=harness.VoteConfig(args.mode, args.k))
    row = harness.run_trials(cfg, data, [args.pool]).rows[0]
    _write_records(args.out, row)
    print(row.summary())


def cmd_prefix(args):
    cfg = _config(args)
    spec = _prefix(args)
    cfg = replace(cfg, prefix=spec, vote=None)
    data = _load_data(cfg, args, need_scores=False)
    backend = harness.open_backend(cfg)
    harness.verify(cfg, data, backend, cfg.jobs, prefix=spec)
    if args.scores_out:
        harness.write_scores(args.scores_out, data.scores)
    row = harness.run_trials(cfg, data, ["top_verifier"]).rows[0]
    _write_records(args.out, row)
    print(f"prefix {spec.label()}: " + row.summary())


def cmd_ablate(args):
    cfg = _config(args)
    data = None
    if args.chains:
        data = _load_data(cfg, args, need_scores=True)
    report = harness.ablate(cfg, args.subsets, data)
    report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    for row in report.rows:
        print(f"[{'+'.join(row.verifiers) or 'none'}] " + row.summary())


def cmd_mathcheck(args):
    tol = ToleranceSpec(args.abs_tol, args.rel_tol)
    stream = open(args.input, encoding="utf-8") if args.input else sys.stdin
    n = bad = 0
    with stream:
        for line in stream:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            checks = [check_formula_detail(f, tol) for f in extract_marked_formulas(line)]
            verdict = int(all(c.ok for c in checks))
            detail = "no calculations" if not checks else "; ".join(
                f"{c.formula}: {'ok' if c.ok else (c.error or f'{c.lhs_value:g} vs {c.rhs_value:g}')}" for c in checks
            )
            rec = {"input": line, "formulas": [c.to_dict() for c in checks], "verdict": verdict, "detail": detail,
                   "tolerance": tol.to_dict()}
            sys.stdout.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
            bad += 1 - verdict
    print(f"mathcheck: {n} lines, {bad} failing", file=sys.stderr)


def cmd_simulate(args):
    params = simcorr.SimParams(
        n_problems=args.n_problems,
        chains_per_problem=args.chains,
        steps_per_chain=args.steps,
        quality_prior=args.quality_prior,
        correlations=tuple(args.correlations),
        seed=args.seed if args.seed is not None else 0,
    )
    results = simcorr.simulate(params)
    simcorr.write_csv(results, args.out)
    curve = ", ".join(f"{r.rho:g}->{r.score:.3f}" for r in results)
    print(f"simulate: baseline {results[0].baseline:.3f}; {curve}")


def cmd_report(args):
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in harness.SELECTION_MODES:
            raise UsageError(f"unknown mode {m!r}")
    data = harness.prepare(cfg)
    if args.chains_out:
        write_chains(args.chains_out, [c for p in data.problems for c in data.problem_chains(p.id)])
    if args.scores_out:
        harness.write_scores(args.scores_out, data.scores)
    report = harness.run_trials(cfg, data, modes)
    report.write_json(args.out)
    report.write_csv(args.csv)
    for row in report.rows:
        print(row.summary())


COMMANDS = {
    "generate": cmd_generate,
    "verify": cmd_verify,
    "select": cmd_select,
    "vote": cmd_vote,
    "prefix": cmd_prefix,
    "ablate": cmd_ablate,
    "mathcheck": cmd_mathcheck,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"chainverify {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ChainVerifyError, OSError, ValueError) as exc:
        print(f"chainverify {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
