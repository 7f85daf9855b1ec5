"""Command line interface.

Exit codes are a stable contract: 0 success, 1 validation or assertion
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .accounting import SizeBudget, count_params, fit_dim_to_budget, report_table
from .checkpoint import save_checkpoint
from .configio import parse_config_file, serialize_config
from .encoder import bind_model
from .presets import calibrated_defaults, preset
from .sharing import validate_plan
from .training import (OptimizerState, ToyTaskSpec, generate_toy_batch,
                       gradcheck_model, serialize_report, train_steps)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_source_flags(sub):
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", help="preset name, e.g. SL5 or SL5-small")
    group.add_argument("--config", help="path to a config file")


def _resolve_flags(args):
    if args.preset is not None:
        p = preset(args.preset)
        return p.config, p.plan, p.note
    config, plan = parse_config_file(args.config)
    return config, plan, f"config file {args.config}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confshare",
        description="Conformer size-reduction lab: sharing plans, low-rank "
                    "feed-forward, exact parameter accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    describe = sub.add_parser("describe", help="print the parameter report")
    describe.add_argument("target", help="preset name or config file path")
    describe.add_argument("--format", choices=("pretty", "tsv"), default="pretty")

    validate = sub.add_parser("validate", help="check a sharing plan's constraints")
    _add_source_flags(validate)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_source_flags(gradcheck)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--eps", type=float, default=1e-4)
    gradcheck.add_argument("--tol", type=float, default=1e-5)
    gradcheck.add_argument("--samples", type=int, default=8)
    gradcheck.add_argument("--frames", type=int, default=6)
    gradcheck.add_argument("--batch", type=int, default=2)

    train = sub.add_parser("train", help="run the toy training loop")
    _add_source_flags(train)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--steps", type=int, default=200)
    train.add_argument("--out", help="write the train report here")
    train.add_argument("--save-model", help="write a checkpoint here")

    budget = sub.add_parser("budget", help="fit the model dim to a size budget")
    _add_source_flags(budget)
    budget.add_argument("--budget", type=int, required=True)
    budget.add_argument("--hard-ceiling", type=int, default=6_000_000)
    budget.add_argument("--step-size", type=int, default=8)

    return parser


def _cmd_describe(args) -> int:
    if os.path.exists(args.target):
        config, plan = parse_config_file(args.target)
        note = f"config file {args.target}"
    else:
        p = preset(args.target)
        config, plan, note = p.config, p.plan, p.note
    cal = calibrated_defaults()
    report = count_params(config, plan)
    print(f"# {note}")
    print(f"# calibrated assumptions: e={cal.e}, kernel_width={cal.kernel_width}, "
          f"base dim={cal.d}, heads={cal.heads}")
    print(report_table(report, format=args.format), end="")
    return EXIT_OK


def _cmd_validate(args) -> int:
    config, plan, note = _resolve_flags(args)
    violations = validate_plan(plan)
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"plan ok: V={plan.v} ({note})")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config, plan, _ = _resolve_flags(args)
    model = bind_model(config, plan, args.seed)
    spec = ToyTaskSpec(feature_dim=config.input_dim, num_classes=config.num_classes,
                       frames=args.frames, batch=args.batch)
    batch = generate_toy_batch(spec, args.seed, 0)
    report = gradcheck_model(model, batch, eps=args.eps, tol=args.tol,
                             samples_per_tensor=args.samples)
    for entry in report.entries:
        status = "ok" if entry.max_rel_err < report.tol else "FAIL"
        print(f"{status}  {entry.key[0]}|{entry.key[1]}|{entry.key[2]}  "
              f"max_rel_err={entry.max_rel_err:.3e}  checked={entry.checked}")
    print(f"gradcheck {'passed' if report.passed else 'FAILED'}: "
          f"max_rel_err={report.max_rel_err:.3e} tol={report.tol:.0e}")
    return EXIT_OK if report.passed else EXIT_FAILURE


def _cmd_train(args) -> int:
    config, plan, _ = _resolve_flags(args)
    model = bind_model(config, plan, args.seed)
    spec = ToyTaskSpec(feature_dim=config.input_dim, num_classes=config.num_classes)
    report = train_steps(model, spec, OptimizerState(), args.steps, args.seed)
    text = serialize_report(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    print(f"initial loss {report.initial_loss:.6f}, final loss {report.final_loss:.6f}, "
          f"{report.wall_clock:.1f}s", file=sys.stderr)
    if args.save_model:
        save_checkpoint(model, args.save_model)
        print(f"wrote {args.save_model}")
    return EXIT_OK


def _cmd_budget(args) -> int:
    config, plan, _ = _resolve_flags(args)
    budget = SizeBudget(max_params=args.budget, hard_ceiling=args.hard_ceiling)
    d = fit_dim_to_budget(budget, plan, config, step=args.step_size)
    total = count_params(replace(config, d=d), plan).grand_total
    print(f"fitted dim: {d}")
    print(f"params at fitted dim: {total} (budget {budget.max_params})")
    return EXIT_OK


_COMMANDS = {
    "describe": _cmd_describe,
    "validate": _cmd_validate,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "budget": _cmd_budget,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
