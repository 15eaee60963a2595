"""Command-line entry point: ``rmc <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __doc__ as package_doc
from .attack import DEFAULT_BUDGETS, EVAL_STEPS, TRAIN_STEPS, make_specs
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import generate_dataset, load_dataset, read_json, save_dataset
from .errors import FormatError, UsageError
from .evalkit import evaluate, path_sweep
from .gradcheck import gradcheck
from .model import ArchSpec, init_params
from .numcore import RngStream, parse_norm
from .pipeline import PipelineConfig, PipelineError, run_rmc_optimization
from .train import TrainConfig, adversarial_train, rmc_train, srmc_endpoints

log = logging.getLogger("rmcdefense")

GRADCHECK_TOL = 1e-4


def parse_norms(text: str, allow_empty: bool = False) -> list[str]:
    tokens = [t for t in text.split(",") if t.strip()] if text.strip().lower() != "none" else []
    if not tokens and not allow_empty:
        raise UsageError("at least one norm is required (linf, l2, l1)")
    norms = [parse_norm(t) for t in tokens]
    if len(set(norms)) != len(norms):
        raise UsageError(f"duplicate norms in {text!r}")
    return norms


def _budgets(args) -> dict:
    return {"linf": args.delta_linf, "l2": args.delta_l2, "l1": args.delta_l1}


def _specs(args, norms, steps):
    return make_specs(norms, _budgets(args), steps)


def _meta(args, **extra) -> dict:
    return {"seed": getattr(args, "seed", None), "command": args.argv, **extra}


def _load_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "model":
        raise UsageError(f"{path}: expected a model checkpoint, got {ckpt.kind}")
    return ckpt.model


def _load_curve(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "curve":
        raise UsageError(f"{path}: expected a curve checkpoint, got {ckpt.kind}")
    return ckpt.curve


def _log_history(what, history):
    for rec in history:
        log.info("%s epoch=%d train_loss=%.6f wall_seconds=%.3f", what, *rec)


def cmd_gen_data(args):
    train, test = generate_dataset(args.kind, args.n, args.d, args.classes, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.json")
    save_dataset(test, out / "test.json")
    print(f"wrote {out / 'train.json'} ({train.n} rows) and {out / 'test.json'} ({test.n} rows)")


def cmd_train_at(args):
    data = load_dataset(args.data)
    norms = parse_norms(args.norms, allow_empty=True)
    if args.init:
        init = _load_model(args.init)
    else:
        arch = ArchSpec.parse(args.arch) if args.arch else ArchSpec.mlp([data.d, 32, 32, data.classes])
        init = init_params(arch, RngStream.derived(args.seed, 1))
    cfg = TrainConfig(args.lr, args.epochs, args.batch, args.seed)
    history = []
    params = adversarial_train(init, data, cfg, _specs(args, norms, args.steps), history=history)
    _log_history("train-at", history)
    save_checkpoint(Checkpoint.of(params, **_meta(args, norms=norms, epochs_trained=args.epochs)), args.out)


def cmd_rmc(args):
    data = load_dataset(args.data)
    norms = parse_norms(args.norms, allow_empty=True)
    a, b = _load_model(args.a), _load_model(args.b)
    cfg = TrainConfig(args.lr, args.epochs, args.batch, args.seed)
    history = []
    curve = rmc_train(a, b, data, cfg, _specs(args, norms, args.steps), history=history)
    _log_history("rmc", history)
    save_checkpoint(Checkpoint.of(curve, **_meta(args, norms=norms, epochs_trained=args.epochs)), args.out)


def cmd_srmc(args):
    data = load_dataset(args.data)
    (spec,) = _specs(args, parse_norms(args.norm), args.steps)
    base = _load_model(args.base)
    cfg = TrainConfig(args.lr, args.epochs, args.batch, args.seed)
    history = []
    start, end = srmc_endpoints(base, data, cfg, spec, history=history)
    _log_history("srmc", history)
    out = Path(args.out_pair)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint.of(start, **_meta(args, role="start")), out / "start.json")
    save_checkpoint(Checkpoint.of(end, **_meta(args, role="end", norms=[spec.p], epochs_trained=args.epochs)),
                    out / "end.json")


def cmd_sweep(args):
    data = load_dataset(args.data)
    curve = _load_curve(args.curve)
    table = path_sweep(curve, data, _specs(args, parse_norms(args.norms), args.steps), args.grid)
    if args.out:
        table.write_csv(args.out)
    else:
        sys.stdout.write(table.to_csv())


def cmd_eval(args):
    data = load_dataset(args.data)
    params = _load_model(args.model)
    row = evaluate(params, data, _specs(args, parse_norms(args.norms), args.steps))
    report = {k: v for k, v in vars(row).items() if k != "t" and v is not None}
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pipeline(args):
    doc = read_json(args.config, "pipeline config")
    data_cfg = doc.pop("data", {})
    if not isinstance(data_cfg, dict):
        raise FormatError(f"{args.config}: field 'data' must be an object")
    if "train" in data_cfg:
        train = load_dataset(data_cfg["train"])
        test = load_dataset(data_cfg["test"]) if "test" in data_cfg else train
    else:
        try:
            train, test = generate_dataset(**data_cfg)
        except TypeError as exc:
            raise UsageError(f"{args.config}: bad 'data' block: {exc}") from None
    cfg = PipelineConfig.from_dict(doc)
    started = time.perf_counter()
    params, lineage = run_rmc_optimization(cfg, train, test, args.workdir, args.jobs)
    final = lineage.stages[-1]
    log.info("pipeline finished in %.1fs", time.perf_counter() - started)
    print(f"final model: {Path(args.workdir) / final.artifact_path / 'checkpoint.json'} "
          f"t={final.chosen_t[0]!r} dlr={final.metrics['best_dlr']!r}")


def cmd_gradcheck(args):
    arch = ArchSpec.parse(args.arch)
    errs = gradcheck(arch, args.seed, args.batch)
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (params {errs['param']:.3e}, inputs {errs['input']:.3e})")
    return 0 if worst <= GRADCHECK_TOL else 1


def _add_budget_flags(p, steps):
    p.add_argument("--delta-linf", type=float, default=DEFAULT_BUDGETS["linf"])
    p.add_argument("--delta-l2", type=float, default=DEFAULT_BUDGETS["l2"])
    p.add_argument("--delta-l1", type=float, default=DEFAULT_BUDGETS["l1"])
    p.add_argument("--steps", type=int, default=steps, help="attack iterations (step size 2*delta/steps)")


def _add_sgd_flags(p, lr, epochs):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmc", description=package_doc)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/test dataset pair")
    p.add_argument("--kind", default="gaussian_blobs", choices=["gaussian_blobs", "two_rings"])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for train.json and test.json")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-at", help="(adversarially) train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", help="layer widths, e.g. 8-32-32-3")
    p.add_argument("--norms", default="linf", help="comma list of linf,l2,l1 or 'none'")
    p.add_argument("--init", help="start from this model checkpoint")
    p.add_argument("--out", required=True)
    _add_sgd_flags(p, 0.1, 30)
    _add_budget_flags(p, TRAIN_STEPS)
    p.set_defaults(func=cmd_train_at)

    p = sub.add_parser("rmc", help="train a robust Bezier connection between two models")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norms", default="linf,l2", help="comma list, or 'none' for plain mode connectivity")
    p.add_argument("--out", required=True)
    _add_sgd_flags(p, 0.01, 20)
    _add_budget_flags(p, TRAIN_STEPS)
    p.set_defaults(func=cmd_rmc)

    p = sub.add_parser("srmc", help="fine-tune a base model under a new norm to get a curve endpoint pair")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--out-pair", required=True, help="directory for start.json and end.json")
    _add_sgd_flags(p, 0.1, 5)
    _add_budget_flags(p, TRAIN_STEPS)
    p.set_defaults(func=cmd_srmc)

    p = sub.add_parser("sweep", help="evaluate a curve on an even t grid (CSV)")
    p.add_argument("--curve", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norms", default="linf,l2")
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    _add_budget_flags(p, EVAL_STEPS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="standard, per-norm, DLR, union and MSD accuracy of one model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norms", default="linf,l2,l1")
    p.add_argument("--out", help="JSON path (stdout when omitted)")
    _add_budget_flags(p, EVAL_STEPS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run the staged RMC-based optimization")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    p.add_argument("--arch", default="8-32-32-3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (UsageError, FormatError) as exc:
        print(f"rmc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"rmc {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"rmc {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
