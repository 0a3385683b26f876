"""Command-line front door.

Verbs: train, eval, export, analyze, gradcheck. Standard output carries only
data (metrics, CSVs, counts); diagnostics go to standard error. Exit codes:
0 success, 2 configuration error, 3 training divergence, 4 export refused
because decay has not finished.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import QuantizedGraphError, Tensor, grad_check, softmax_xent
from .bitops import capability_report
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunSetup, build_run, load_config, resolve_datasets
from .netspec import build_network, prune_network
from .trainer import DivergenceError, evaluate, train
from . import report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_EXPORT_REFUSED = 4

log = logging.getLogger("expnet.cli")


def _setup_from_args(args) -> RunSetup:
    return build_run(load_config(args.config, args.set))


def _setup_from_checkpoint(ckpt: Checkpoint, overrides: list[str]) -> RunSetup:
    from .config import apply_overrides, merge_config, parse_config_text

    values = parse_config_text(ckpt.config_text, "<checkpoint>")
    return build_run(apply_overrides(merge_config(values), overrides))


def _load_model(ckpt: Checkpoint, setup: RunSetup):
    net = build_network(setup.spec, setup.train.seed)
    model = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    net.load_tensor_table(model)
    return net


def _checkpoint_factors(ckpt: Checkpoint, setup: RunSetup) -> dict[str, float]:
    from .trainer import _factors_at

    clock = (
        ckpt.state.get("iterations", 0)
        if setup.train.decay.unit == "iteration"
        else ckpt.state.get("epoch", 0)
    )
    return _factors_at(setup, clock)


def cmd_train(args) -> int:
    setup = _setup_from_args(args)
    out_dir = Path(args.outdir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective-config.txt").write_text(setup.config_text())

    resume_from = load_checkpoint(args.resume) if args.resume else None
    train_ds, val_ds = resolve_datasets(setup.train.dataset, setup.spec)
    try:
        result = train(setup, train_ds, val_ds, resume_from=resume_from)
    except DivergenceError as exc:
        log.error("%s", exc)
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out_dir / "last-good.ckpt")
            log.error("last healthy state written to %s", out_dir / "last-good.ckpt")
        return EXIT_DIVERGED

    (out_dir / "metrics.csv").write_text(result.csv_text)
    save_checkpoint(result.final, out_dir / "final.ckpt")
    if result.pruned is not None:
        save_checkpoint(result.pruned, out_dir / "pruned.ckpt")
        log.info(
            "decay completed: pruned checkpoint keeps %d of %d parameters",
            result.prune_report["params_after"], result.prune_report["params_before"],
        )
    figures = report.render_figures(result.rows, setup.spec.expanded_ids(), out_dir)
    log.info("wrote %s and %d figures to %s", "metrics.csv", len(figures), out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    setup = _setup_from_checkpoint(ckpt, args.set)
    net = _load_model(ckpt, setup)
    train_ds, test_ds = resolve_datasets(setup.train.dataset, setup.spec)
    dataset = train_ds if args.split == "train" else test_ds
    factors = _checkpoint_factors(ckpt, setup)
    result = evaluate(net, dataset, factors)
    top5 = "n/a" if result.top5 is None else repr(result.top5)
    print(f"split={args.split} n={result.n} loss={result.loss!r} "
          f"top1={result.top1!r} top5={top5}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    setup = _setup_from_checkpoint(ckpt, [])
    net = _load_model(ckpt, setup)
    factors = _checkpoint_factors(ckpt, setup)
    live = {lid: f for lid, f in factors.items() if f != 0.0}
    if live:
        desc = ", ".join(f"{lid}: f={f:.6g}" for lid, f in sorted(live.items()))
        log.error("refusing to export: decay has not finished (%s)", desc)
        return EXIT_EXPORT_REFUSED

    pruned = prune_network(net, factors)
    from .trainer import _pruned_config_text

    out = Checkpoint(
        config_text=_pruned_config_text(setup),
        tensors=dict(pruned.tensor_table()),
        state={"epoch": ckpt.state.get("epoch", 0), "iterations": 0,
               "pruned_done": True, "optimizer": {"kind": "none"},
               "rng": None, "metrics": []},
    )
    save_checkpoint(out, args.out)
    before, after = net.param_count(), pruned.param_count()
    print(f"params_before={before} params_after={after} removed={before - after}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    setup = _setup_from_args(args)
    csv_text = capability_report(setup.spec.capability_shapes()).as_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
        log.info("capability table written to %s", args.out)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    setup = _setup_from_args(args)
    net = build_network(setup.spec, setup.train.seed)
    rng = np.random.default_rng(setup.train.seed)
    c, h, w = setup.spec.input_shape
    x = Tensor(rng.random((2, c, h, w)))
    labels = rng.integers(0, setup.spec.num_classes, size=2)
    factors = {lid: 0.5 for lid in setup.spec.expanded_ids()}

    def loss_fn():
        return softmax_xent(net.forward(x, factors, mode="infer"), labels)

    try:
        result = grad_check(loss_fn, net.params())
    except QuantizedGraphError as exc:
        log.error("gradient check impossible: %s", exc)
        log.error("set quant.bypass = true to check the underlying smooth graph")
        return EXIT_CONFIG
    print(f"max_rel_err={result.max_rel_err!r} tolerance={result.tolerance!r} "
          f"passed={result.passed}")
    return EXIT_OK if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expnet",
        description="Train, prune, and analyze low-precision nets with "
                    "decaying full-precision helper branches.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level diagnostics on stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="run config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable, last wins)")

    p = sub.add_parser("train", help="run the training loop")
    add_config_args(p)
    p.add_argument("--outdir", required=True, help="directory for run artifacts")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override config keys stored in the checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="prune FP branches out of a finished checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="where to write the pruned checkpoint")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("analyze", help="per-layer 1-bit capability table")
    add_config_args(p)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole graph")
    add_config_args(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
