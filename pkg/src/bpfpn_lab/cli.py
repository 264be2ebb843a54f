"""Command-line driver.  Every subcommand writes JSON lines to stdout or ``--out``.

Exit status: 0 when every executed check passes, 1 when one fails, 2 on a
usage error (bad flag, bad config, invalid parameter).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, verify
from .bpfpn import TWO_FUSION_KINDS, ArchitectureSpec, Kind, Model, count_flops, gils_addon_flops
from .errors import ParameterError, ShapeError, SizeError
from .graph import Graph
from .synth import make_dataset, scene_configs
from .kernels import BACKEND

log = logging.getLogger("bpfpn_lab")

# wall-clock fields break bitwise reproducibility; emitted only with --timing
_TIMING_KEYS = ("seconds_per_step",)


class UsageError(Exception):
    pass


def _seeds(args) -> list[int]:
    if args.num_seeds < 1:
        raise UsageError("--num-seeds must be >= 1")
    return [args.seed + i for i in range(args.num_seeds)]


def _run_config(args) -> harness.RunConfig:
    try:
        run = harness.load_config(args.config) if args.config else harness.RunConfig()
        if getattr(args, "arch", None):
            run = replace(run, arch=args.arch)
        if getattr(args, "steps", None) is not None:
            run = replace(run, steps=args.steps)
        return run.validate()
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _arch(name: str) -> ArchitectureSpec:
    try:
        return ArchitectureSpec.parse(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands: each returns (records, passed) ---------------------------


def cmd_gradcheck(args):
    seeds = _seeds(args)
    records = []
    oracle = verify.validate_oracle()
    oracle_ok = max(oracle.values()) < 1e-9
    records.append({"name": "gradcheck:oracle", **oracle, "tolerance": 1e-9, "pass": oracle_ok})
    reports = verify.gradcheck_primitives(seeds)
    kinds = [args.arch] if args.arch else [k.value for k in Kind]
    for kind in kinds:
        spec = _arch(kind)
        for seed in seeds:
            reports.append(verify.gradcheck_end_to_end(spec, seed, size=args.size))
    records.extend(r.to_record() for r in reports)
    return records, oracle_ok and all(r.passed for r in reports)


def cmd_isolate(args):
    records, ok = [], True
    for kind in (Kind.VARIANT2, Kind.NO_ISOLATION):
        for size in args.sizes:
            for seed in _seeds(args):
                rep = verify.check_isolation(ArchitectureSpec(kind), seed, size=size)
                records.append(rep.to_record())
                ok &= rep.passed
    return records, ok


def cmd_decompose(args):
    spec = _arch(args.arch)
    if spec.kind not in TWO_FUSION_KINDS:
        raise UsageError(f"{spec.kind.value} has no two-step fusion; choose from "
                         + ", ".join(sorted(k.value for k in TWO_FUSION_KINDS)))
    reports = []
    for seed in _seeds(args):
        if spec.shares_fusion:
            reports.append(verify.check_superposition(spec, seed, size=args.size))
        reports.extend(verify.check_path_decomposition(spec, seed, size=args.size))
    return [r.to_record() for r in reports], all(r.passed for r in reports)


def cmd_train(args):
    run = replace(_run_config(args), seeds=tuple(_seeds(args)))
    try:
        histories = harness.train(run)
    except harness.DivergenceError as exc:
        return [{"name": "train", "arch": run.arch, "diverged": True, "step": exc.step, "pass": False}], False
    records = []
    for hist in histories:
        rec = harness.history_record(hist)
        rec["pass"] = True
        records.append(rec)
    return records, True


def cmd_compare(args):
    run = _run_config(args)
    seeds = _seeds(args)
    if len(seeds) < 5:
        raise UsageError("variant-compare needs at least 5 seeds")
    result = harness.variant_compare(seeds, run, jobs=args.jobs)
    checks = result["checks"]
    ok = all(v is True for v in checks.values()) and not result["diverged"]
    summary = {
        "name": "variant_compare:summary", "medians": result["medians"], "checks": checks,
        "diverged": result["diverged"], "seeds": seeds, "steps": run.steps, "pass": ok,
    }
    return result["records"] + [summary], ok


def cmd_flops(args):
    shape = (args.batch, 1, args.size, args.size)
    spec = _arch(args.arch)
    flops = count_flops(spec, shape)
    params = Model(spec, 0).count_params()
    rec = {"name": f"flops:{spec.kind.value}", "arch": spec.kind.value, "input_shape": list(shape),
           "flops": flops, "params": params, "pass": True}
    if spec.kind is Kind.VARIANT2:
        vanilla = ArchitectureSpec(Kind.VANILLA)
        delta = flops - count_flops(vanilla, shape)
        closed = gils_addon_flops(shape)
        param_delta = params - Model(vanilla, 0).count_params()
        rec.update(flops_delta=delta, flops_delta_closed_form=closed, params_delta=param_delta,
                   params_delta_expected=528, **{"pass": delta == closed and param_delta == 528})
    return [rec], rec["pass"]


def cmd_gen_data(args):
    if not args.out:
        raise UsageError("gen-data needs --out DIR")
    run = _run_config(args)
    rows = make_dataset(scene_configs(args.count, run.scene_base(), args.seed, run.max_targets), args.out)
    return [{"name": "gen_data", "path": args.out, "scenes": len(rows), "pass": True}], True


def cmd_dump(args):
    spec = _arch(args.arch)
    g = Graph()
    Model(spec, args.seed).forward(g, verify.random_batch(args.seed, args.size, 1)[0])
    sys.stdout.write(g.dump())
    return [], True


# -- plumbing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    common.add_argument("--out", help="write JSON lines here instead of stdout")
    common.add_argument("--config", help="key=value run config file")
    common.add_argument("--timing", action="store_true", help="include wall-clock fields")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bpfpn-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    kinds = [k.value for k in Kind]

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference battery")
    s.add_argument("--num-seeds", type=int, default=5)
    s.add_argument("--arch", choices=kinds, help="end-to-end check for one kind (default: all)")
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("isolate-test", parents=[common], help="backbone gradient isolation")
    s.add_argument("--num-seeds", type=int, default=5)
    s.add_argument("--sizes", type=int, nargs="+", default=[32, 64])
    s.set_defaults(func=cmd_isolate)

    s = sub.add_parser("decompose", parents=[common], help="superposition and path decomposition")
    s.add_argument("--arch", default="variant2", choices=kinds)
    s.add_argument("--num-seeds", type=int, default=1)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("train", parents=[common], help="train one architecture")
    s.add_argument("--arch", choices=kinds)
    s.add_argument("--steps", type=int)
    s.add_argument("--num-seeds", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("variant-compare", parents=[common], help="train every variant and check the ordering")
    s.add_argument("--steps", type=int)
    s.add_argument("--num-seeds", type=int, default=5)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("flops", parents=[common], help="parameter and FLOP counts")
    s.add_argument("--arch", default="variant2", choices=kinds)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--batch", type=int, default=1)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--count", type=int, default=20)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("dump", parents=[common], help="print the recorded graph of one forward pass")
    s.add_argument("--arch", default="variant2", choices=kinds)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_dump)
    return p


def _strip_timing(rec):
    return {k: v for k, v in rec.items() if k not in _TIMING_KEYS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", BACKEND)
    try:
        records, passed = args.func(args)
    except (UsageError, ParameterError, ShapeError, SizeError) as exc:
        print(f"bpfpn-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if not args.timing:
        records = [_strip_timing(r) for r in records]
    if args.command != "gen-data" and args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        sink = open(args.out, "w", encoding="utf-8")
    else:
        sink = contextlib.nullcontext(sys.stdout)
    with sink as fh:
        harness.write_jsonl(records, fh)
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
