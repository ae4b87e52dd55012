"""Command-line driver: ``maam {train,eval,ablate,compare,gradcheck,bench,inspect}``.

Settings resolve as command-line flag, then ``--config`` JSON file, then
built-in default. The data directory falls back to ``$MAAM_DATA_DIR``.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .errors import ConfigurationError, MAAMError
from .model import ABLATION_VARIANTS, BASELINE_VARIANTS, VARIANTS, ModelSpec, build_model, load_checkpoint
from .tensor import make_rng
from .training import TABLE_COLUMNS, MetricsReport, TrainConfig, eval_batches, evaluate, run_variants, train, write_table_csv

log = logging.getLogger("maam")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "data_dir": None,
    "synthetic": False,
    "synthetic_size": 512,
    "variant": "maam",
    "variants": None,
    "epochs": 1,
    "batch": 64,
    "lr": 0.01,
    "momentum": 0.9,
    "wd": 5e-4,
    "seed": 0,
    "subset": None,
    "test_subset": None,
    "workers": 0,
    "augment": True,
    "max_steps": None,
    "out": None,
    "checkpoint": None,
    "seeds": 5,
    "eps": 1e-3,
    "repetitions": 7,
    "shapes": None,
    "plots": True,
}

# keys a config file may not set
_CLI_ONLY = {"config", "command", "verbose", "quiet"}


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 64x256x16x16, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape must have four positive dims, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="JSON file with default values for any flag")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    dataset = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    dataset.add_argument("--data-dir", type=Path, help=f"CIFAR-10 binary directory (default ${D.DATA_DIR_ENV})")
    dataset.add_argument("--synthetic", action="store_true", help="use the generated 10-class texture set")
    dataset.add_argument("--synthetic-size", type=_positive_int, help="synthetic train images (test gets a quarter)")
    dataset.add_argument("--test-subset", type=_positive_int, help="evaluate on the first N test images")
    dataset.add_argument("--batch", type=_positive_int)
    dataset.add_argument("--workers", type=int, help="prefetch threads (never changes batch content)")

    training = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--momentum", type=float)
    training.add_argument("--wd", type=float, help="L2 weight decay")
    training.add_argument("--subset", type=_positive_int, help="train on N images after a seeded shuffle")
    training.add_argument("--max-steps", type=_positive_int)
    training.add_argument("--no-augment", dest="augment", action="store_false")
    training.add_argument("--no-plots", dest="plots", action="store_false")

    parser = argparse.ArgumentParser(prog="maam", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help, parents):
        return sub.add_parser(name, help=help, parents=[common, *parents], argument_default=argparse.SUPPRESS)

    p = add("train", "train one model and write logs and checkpoints", [dataset, training])
    p.add_argument("--variant", choices=VARIANTS)

    p = add("eval", "evaluate a checkpoint on the test split", [dataset])
    p.add_argument("--checkpoint", type=Path)

    add("ablate", "train maam and its three ablation variants", [dataset, training])

    p = add("compare", "train maam against the cnn, mlp and rnn baselines", [dataset, training])
    p.add_argument("--variants", nargs="+", choices=VARIANTS)

    p = add("gradcheck", "finite-difference check of every backward rule", [])
    p.add_argument("--seeds", type=_positive_int)
    p.add_argument("--eps", type=float)

    p = add("bench", "benchmark the fused weighted branch sum", [])
    p.add_argument("--repetitions", type=int)
    p.add_argument("--shape", dest="shapes", type=_shape, action="append", help="NxCxHxW; repeatable")
    p.add_argument("--no-plots", dest="plots", action="store_false")

    p = add("inspect", "print fusion weights and parameter count", [])
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--variant", choices=VARIANTS)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over :data:`DEFAULTS`."""
    given = vars(args)
    settings = dict(DEFAULTS)
    if "config" in given:
        path = given["config"]
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown key(s) in {path}: {', '.join(unknown)}")
        settings.update(loaded)
    settings.update({k: v for k, v in given.items() if k not in _CLI_ONLY})
    settings["command"] = given["command"]
    for key in ("data_dir", "out", "checkpoint"):
        if settings[key] is not None:
            settings[key] = Path(settings[key])
    return settings


def train_config(s: dict, variant: Optional[str] = None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(s["epochs"]),
            batch=int(s["batch"]),
            lr=float(s["lr"]),
            momentum=float(s["momentum"]),
            weight_decay=float(s["wd"]),
            seed=int(s["seed"]),
            variant=variant or s["variant"],
            subset=s["subset"],
            test_subset=s["test_subset"],
            augment=bool(s["augment"]),
            workers=int(s["workers"]),
            max_steps=s["max_steps"],
        )
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _require_data(s: dict) -> None:
    if not s["synthetic"] and D.resolve_data_dir(s["data_dir"]) is None:
        raise UsageError(f"no data: pass --data-dir, set ${D.DATA_DIR_ENV}, or use --synthetic")


def _load(s: dict) -> tuple[D.Dataset, D.Dataset]:
    return D.load_splits(s["data_dir"], s["synthetic"], int(s["synthetic_size"]), int(s["seed"]))


def _out_dir(s: dict, default: str) -> Path:
    return s["out"] if s["out"] is not None else Path("runs") / default


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _metrics_csv(name: str, m: MetricsReport) -> str:
    return ",".join(TABLE_COLUMNS) + "\n" + ",".join([name, *(f"{v:.4f}" for v in m.row())]) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(s: dict) -> int:
    config = train_config(s)
    _require_data(s)
    out = _out_dir(s, config.variant)
    train_ds, test_ds = _load(s)
    model, runlog = train(config, train_ds, test_ds, out)
    (out / "config.json").write_text(json.dumps(_jsonable(s), indent=2, sort_keys=True) + "\n")
    if s["plots"] and len(runlog):
        from . import plots

        plots.loss_curves({config.variant: runlog.step_losses}, out / "loss.png", smooth=max(1, len(runlog) // 50))
        weights = [w for w in runlog.fusion_weights if w is not None]
        if weights:
            plots.fusion_weight_trace(weights, out / "fusion_weights.png")
    final = runlog.final_metrics
    if final is not None:
        text = _metrics_csv(model.spec.variant, final)
        (out / "metrics.csv").write_text(text)
        _emit(final.summary())
    _emit(f"wrote {out}")
    return EXIT_OK


def cmd_eval(s: dict) -> int:
    if s["checkpoint"] is None:
        raise UsageError("eval needs --checkpoint")
    if not s["checkpoint"].exists():
        raise UsageError(f"checkpoint {s['checkpoint']} does not exist")
    _require_data(s)
    model = load_checkpoint(s["checkpoint"])
    if s["synthetic"]:
        test_ds = _load(s)[1]
    else:
        test_ds = D.load_cifar10(D.resolve_data_dir(s["data_dir"]), "test")
    if s["test_subset"] is not None:
        test_ds = test_ds.take(slice(0, int(s["test_subset"])))
    metrics = evaluate(model, eval_batches(test_ds, int(s["batch"])))
    text = _metrics_csv(model.spec.variant, metrics)
    if s["out"] is not None:
        s["out"].mkdir(parents=True, exist_ok=True)
        (s["out"] / "metrics.csv").write_text(text)
    _emit(metrics.summary())
    _emit(text)
    return EXIT_OK


def _suite(s: dict, variants: Sequence[str], name: str) -> int:
    base = train_config(s, variant=variants[0])
    _require_data(s)
    out = _out_dir(s, name)
    train_ds, test_ds = _load(s)
    results = run_variants(base, variants, train_ds, test_ds, out)
    table = write_table_csv(results, out / f"{name}.csv")
    with open(out / "params.csv", "w") as fh:
        fh.write("Model,Parameters\n" + "".join(f"{r.name},{r.param_count}\n" for r in results))
    if s["plots"]:
        from . import plots

        curves = {r.name: r.runlog.step_losses for r in results}
        steps = max(len(c) for c in curves.values())
        plots.loss_curves(curves, out / "loss_curves.png", smooth=max(1, steps // 50))
        plots.metric_bars([r.name for r in results], [r.metrics.row() for r in results], out / f"{name}.png", title=name.capitalize())
    _emit(table)
    checksums = {tuple(r.runlog.batch_checksums) for r in results}
    if len(checksums) != 1:
        log.error("variants consumed different batch sequences")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_ablate(s: dict) -> int:
    return _suite(s, ABLATION_VARIANTS, "ablation")


def cmd_compare(s: dict) -> int:
    variants = tuple(s["variants"] or BASELINE_VARIANTS)
    return _suite(s, variants, "comparison")


def cmd_gradcheck(s: dict) -> int:
    from .gradcheck import TOLERANCE, format_report, run_gradcheck

    results = run_gradcheck(seeds=int(s["seeds"]), eps=float(s["eps"]), tolerance=TOLERANCE)
    _emit(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _emit(f"FAILED: {', '.join(failed)}")
        return EXIT_FAILURE
    _emit(f"all {len(results)} checks within {TOLERANCE:g}")
    return EXIT_OK


def cmd_bench(s: dict) -> int:
    from .fused import PRODUCTION_SHAPE, bench_fusion

    if int(s["repetitions"]) < 5:
        raise UsageError("--repetitions must be at least 5")
    shapes = [tuple(x) for x in s["shapes"]] if s["shapes"] else [(8, 64, 16, 16), PRODUCTION_SHAPE]
    if PRODUCTION_SHAPE not in shapes:
        shapes.append(PRODUCTION_SHAPE)
    report = bench_fusion(shapes, int(s["repetitions"]), int(s["seed"]))
    out = _out_dir(s, "bench")
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "bench.csv")
    if s["plots"]:
        from . import plots

        labels = ["x".join(map(str, r.shape)) for r in report.rows]
        plots.bench_bars(labels, [r.naive_ns for r in report.rows], [r.fused_ns for r in report.rows], out / "bench.png")
    _emit(report.table())
    bad = [r for r in report.rows if r.max_deviation > 1e-6 * r.max_abs_output or r.fused_buffers >= r.naive_buffers]
    if bad:
        _emit("FAILED: fused path disagrees with the naive path or allocates intermediates")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_inspect(s: dict) -> int:
    if s["checkpoint"] is not None:
        model = load_checkpoint(s["checkpoint"])
        source = str(s["checkpoint"])
    else:
        model = build_model(ModelSpec(variant=s["variant"]), make_rng(int(s["seed"]), 0))
        source = f"fresh {s['variant']} (seed {s['seed']})"
    lines = [f"model       {source}", f"variant     {model.spec.variant}", f"parameters  {model.param_count()}"]
    try:
        weights = model.fusion_weights()
    except ConfigurationError:
        lines.append("fusion      none (variant has no learned fusion weights)")
    else:
        for i, (w, k) in enumerate(zip(weights, model.spec.kernel_sizes)):
            lines.append(f"w{i + 1} ({k}x{k})    {w:.6f}")
    _emit("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def _jsonable(s: dict) -> dict:
    out = {}
    for k, v in s.items():
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        settings = resolve(args)
        return COMMANDS[settings["command"]](settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"maam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MAAMError as exc:
        print(f"maam {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
