"""Few-shot bearing fault diagnosis with MAML: synthetic corpora, training and evaluation.

Usage: ``metabearing <command> [options]``.

Failures print a single ``error: <Kind>: <message>`` line on stderr and
exit with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data, harness
from . import model as mdl
from .tensor_core import Tensor
from .tensor_core.gradcheck import check_gradients, run_primitive_suite

GRADCHECK_TOLERANCE = 1e-4
# A 1e-4 step moves some of the ~10^6 early-layer activations across a ReLU
# or max-pool switch point; 1e-6 stays on one linear piece and is still far
# above 64-bit rounding.
MODEL_FD_STEP = 1e-6


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def model_gradcheck(seed: int, coords_per_entry: int = 3, num_ways: int = 3) -> float:
    """Central differences against backward for the full model on a 2-sample batch (64-bit)."""
    rng = np.random.default_rng(seed)
    spec = mdl.ModelSpec(num_ways=num_ways)
    theta = mdl.init_params(spec, seed, dtype=np.float64)
    names = list(theta.names)
    # Nonzero BN shifts and non-unit scales exercise every term of the BN rule.
    arrays = []
    for n in names:
        a = theta[n].data.copy()
        if n.startswith("bn") and n.endswith(".bias"):
            a = rng.normal(0, 0.1, size=a.shape)
        elif n.startswith("bn"):
            a = rng.uniform(0.8, 1.2, size=a.shape)
        arrays.append(a)
    x = rng.standard_normal((2, 1, spec.input_side, spec.input_side))
    y = rng.integers(0, num_ways, size=2)

    def fn(ts):
        return mdl.loss(mdl.forward(theta.with_tensors(ts), Tensor(x)), y)

    return check_gradients(fn, arrays, h=MODEL_FD_STEP, max_coords=coords_per_entry, rng=rng)


def run_gradcheck(seeds: int = 7, model_seeds: int = 2, second_order: bool = True):
    started = time.monotonic()
    results = run_primitive_suite(range(seeds), second_order=second_order)
    first = [r.error for r in results if r.order == 1]
    second = [r.error for r in results if r.order == 2]
    model_errors = [model_gradcheck(s) for s in range(model_seeds)]
    return {
        "cases": len(first) + len(model_errors),
        "max_rel_error": max(first + model_errors),
        "primitive_max": max(first),
        "model_max": max(model_errors) if model_errors else 0.0,
        "second_order_cases": len(second),
        "second_order_max": max(second) if second else 0.0,
        "seconds": time.monotonic() - started,
    }


# ------------------------------------------------------------------ commands

def _load_plan(args) -> harness.ExperimentPlan:
    plan = harness.ExperimentPlan.load(args.plan)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if args.out is not None:
        over["output_dir"] = args.out
    return plan.with_overrides(over) if over else plan


def cmd_synth(args):
    if args.out is None:
        raise CliError("synth needs --out")
    if args.layout == "a2r":
        classes = data.a2r_layout()
    else:
        if args.classes < 1:
            raise CliError("--classes must be >= 1")
        classes = data.cwru_layout(args.classes)
    path = data.write_corpus(args.out, classes, segments_per_record=args.segments_per_record,
                             seed=args.seed or 0, preprocess=args.preprocess, name=f"synthetic-{args.layout}")
    print(f"wrote {len(classes)} classes to {path}")


def cmd_train(args):
    plan = _load_plan(args)
    out = Path(plan.output_dir or ".")
    pools = harness._pools_for(plan, None)
    started = time.monotonic()
    stop = harness._deadline(plan, started)
    _, res = harness.train_trial(plan, pools, 0, stop, out_dir=out)
    # Stable names for the single-trial command.
    (out / "checkpoint.mflt").write_bytes((out / "checkpoint_trial0.mflt").read_bytes())
    (out / "curve.ndjson").write_text((out / "curve_trial0.ndjson").read_text())
    last = res.curve[-1] if res.curve else {}
    print(f"trained {plan.config.iterations} iterations; last query accuracy {last.get('query_acc')}; "
          f"checkpoint {out / 'checkpoint.mflt'}")


def cmd_eval(args):
    if not args.checkpoint:
        raise CliError("eval needs --checkpoint")
    plan = _load_plan(args)
    table = harness.evaluate_checkpoint(plan, args.checkpoint)
    print(table.to_text(), end="")


def cmd_ablate(args):
    plan = _load_plan(args)
    if args.grid == "optimizer-lr":
        grid = harness.optimizer_lr_grid()
    elif args.grid == "train-size":
        grid = harness.train_size_grid()
    else:
        grid = json.loads(Path(args.grid).read_text())
    table = harness.run_ablation(grid, plan)
    print(table.to_text(), end="")


def cmd_a2r(args):
    plan = _load_plan(args)
    table = harness.run_artificial_to_real(plan.meta_train_classes, plan.meta_test_classes, plan)
    print(table.to_text(), end="")


def cmd_run(args):
    plan = _load_plan(args)
    table = harness.run_plan(plan)
    print(table.to_text(), end="")


def cmd_gradcheck(args):
    report = run_gradcheck(seeds=args.seeds, model_seeds=args.model_seeds)
    print(f"gradcheck cases={report['cases']} max_rel_error={report['max_rel_error']:.3e} "
          f"(primitives {report['primitive_max']:.3e}, model {report['model_max']:.3e}); "
          f"second-order cases={report['second_order_cases']} max={report['second_order_max']:.3e}; "
          f"{report['seconds']:.1f}s")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if report["max_rel_error"] >= GRADCHECK_TOLERANCE:
        raise CliError(f"max relative error {report['max_rel_error']:.3e} >= {GRADCHECK_TOLERANCE:g}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--threads", type=int, default=None, help="threads for per-task work")
    common.add_argument("--out", default=None, help="output directory (or file for gradcheck)")

    parser = _Parser(prog="metabearing", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--layout", choices=("cwru", "a2r"), default="cwru")
    p.add_argument("--segments-per-record", type=int, default=20)
    p.add_argument("--preprocess", choices=("none", "fft"), default="none")
    p.set_defaults(func=cmd_synth)

    for name, func, text in (("train", cmd_train, "meta-train one trial, write checkpoint and curve"),
                             ("run", cmd_run, "meta-train and meta-test every trial of a plan"),
                             ("eval", cmd_eval, "meta-test a checkpoint"),
                             ("ablate", cmd_ablate, "run a plan over a grid of overrides"),
                             ("a2r", cmd_a2r, "artificial-to-real protocol")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--plan", required=True)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name == "ablate":
            p.add_argument("--grid", default="optimizer-lr",
                           help="'optimizer-lr', 'train-size' or a JSON file with a list of override objects")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference oracle suite")
    p.add_argument("--seeds", type=int, default=7, help="random instances per primitive")
    p.add_argument("--model-seeds", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise CliError("--threads must be >= 1")
        args.func(args)
        return 0
    except CliError as exc:
        kind, msg = "UsageError", str(exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        kind, msg = type(exc).__name__, str(exc)
    msg = " ".join(msg.split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
