"""``kdgat`` command line: synth, graphs, train-teacher, distill, eval, detect, quickstart.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 model error.
Relative paths resolve against ``--data-dir``, else ``$KDGAT_DATA_DIR``,
else the working directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .can_ingest import TraceSource, read_trace, trace_format, write_canonical
from .config import RunConfig, bundled_config, load_config, parse_assignment
from .errors import ArchMismatch, ConfigError, DataError, EmptyTrace, GraphFileError, KdGatError, ModelError
from .evaluate import detect_stream, evaluate_model, write_detections
from .graph_builder import build_windows, read_graphs, write_graphs, write_graphs_text
from .model import GatModel, load_checkpoint, save_checkpoint
from .synth_can import bundled_scenario, load_scenario
from .train import distill_student, train_teacher, write_history_csv

log = logging.getLogger("kdgat")

DATA_DIR_ENV = "KDGAT_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

# Flag name -> config key. Every other field is reachable through --set.
TRAIN_FLAGS = {
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "epochs": "train.epochs",
    "warmup_epochs": "train.warmup_epochs",
    "alpha": "train.alpha",
    "tau": "train.tau",
    "gamma_focal": "train.gamma_focal",
    "use_focal": "train.use_focal",
    "val_fraction": "train.val_fraction",
}


class _Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        base = args.data_dir or os.environ.get(DATA_DIR_ENV) or "."
        self.data_dir = Path(base)
        self.config = _effective_config(args)
        self.hash = self.config.config_hash()

    def path(self, p: str | os.PathLike) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.data_dir / p

    def out_path(self, p: str | os.PathLike) -> Path:
        out = self.path(p)
        out.parent.mkdir(parents=True, exist_ok=True)
        return out

    def stamp(self) -> str:
        return f"config_hash={self.hash} config={self.config.to_json()}"

    def meta(self) -> dict:
        return {"config_hash": self.hash, "run_config": self.config.to_dict()}


def _effective_config(args: argparse.Namespace) -> RunConfig:
    """flags > config file > defaults."""
    cfg = load_config(args.config)
    overrides: dict[str, object] = {"seed": args.seed}
    for flag, key in TRAIN_FLAGS.items():
        overrides[key] = getattr(args, flag, None)
    for flag in ("window", "stride"):
        overrides[f"train.{flag}"] = getattr(args, flag, None)
    overrides["threshold"] = getattr(args, "threshold", None)
    for text in args.set or []:
        key, value = parse_assignment(text)
        overrides[key] = value
    return cfg.with_overrides(overrides)


# -- helpers -------------------------------------------------------------------------

def _scenario_path(ctx: _Context, name: str) -> Path:
    p = ctx.path(name)
    if p.exists() or name.endswith(".toml"):
        return p
    return bundled_scenario(name)


def _load_trace(ctx: _Context, path: str, fmt: str, strict: bool = False, unlabeled: bool = False):
    result = read_trace(TraceSource(trace_format(fmt), ctx.path(path), has_labels=not unlabeled), strict)
    for d in result.diagnostics[:5]:
        print(f"{path}:{d.line_no}: skipped: {d.message}", file=sys.stderr)
    if result.skipped > 5:
        print(f"{path}: {result.skipped - 5} more malformed lines skipped", file=sys.stderr)
    return result.messages


def _load_graphs(ctx: _Context, path: str):
    ds = read_graphs(ctx.path(path))
    if not ds.graphs:
        raise GraphFileError(f"{path}: graph file holds no windows")
    return ds


def _check_windowing(ds, model: GatModel, path: str) -> None:
    cfg = model.meta.get("config") or {}
    want = (cfg.get("window"), cfg.get("stride"))
    if None not in want and want != (ds.window, ds.stride):
        raise ArchMismatch(f"{path}: graphs use window/stride {ds.window}/{ds.stride}, "
                           f"checkpoint was trained on {want[0]}/{want[1]}")


def _expected_arch(ctx: _Context, role: str | None):
    return {"teacher": ctx.config.teacher, "student": ctx.config.student}.get(role or "")


def _load_model(ctx: _Context, path: str, role: str | None = None) -> GatModel:
    try:
        return load_checkpoint(ctx.path(path), _expected_arch(ctx, role))
    except FileNotFoundError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _history_path(args, checkpoint: Path) -> Path:
    return Path(args.history) if args.history else checkpoint.with_suffix(".history.csv")


# -- commands ------------------------------------------------------------------------

def cmd_synth(ctx: _Context) -> int:
    a = ctx.args
    scenario = load_scenario(_scenario_path(ctx, a.scenario))
    seed = scenario.seed if a.seed is None else a.seed
    messages = scenario.generate(seed)
    out = ctx.out_path(a.out)
    attacks = sum(m.is_attack for m in messages)
    write_canonical(messages, out, header=f"scenario={Path(a.scenario).stem} seed={seed} "
                                          f"messages={len(messages)} attack={attacks}")
    print(f"wrote {len(messages)} messages ({attacks} attack) to {out}")
    return EXIT_OK


def cmd_graphs(ctx: _Context) -> int:
    a, tc = ctx.args, ctx.config.train
    messages = _load_trace(ctx, a.trace, a.format, a.strict, a.unlabeled)
    graphs = build_windows(messages, tc.window, tc.stride)
    if not graphs:
        raise EmptyTrace(f"{a.trace}: {len(messages)} messages, fewer than one window of {tc.window}")
    out = ctx.out_path(a.out)
    write_graphs(out, graphs, tc.window, tc.stride,
                 meta={**ctx.meta(), "source": Path(a.trace).name, "messages": len(messages)})
    if a.text:
        write_graphs_text(ctx.out_path(a.text), graphs, tc.window, tc.stride)
    attack = sum(g.label for g in graphs)
    print(f"wrote {len(graphs)} window graphs ({attack} attack) to {out}")
    return EXIT_OK


def _save(ctx: _Context, model: GatModel, history, out: Path, history_out: Path) -> None:
    save_checkpoint(model, {**model.meta, **ctx.meta()}, out)
    write_history_csv(history_out, history, comment=ctx.stamp())
    best = history.records[history.best_epoch - 1] if history.best_epoch else None
    msg = f"wrote {out} ({model.parameter_count()} parameters)"
    if best:
        msg += f"; best epoch {best.epoch} val_acc {best.val_acc:.4f}"
    print(msg)


def _check_graph_config(ctx: _Context, ds, path: str) -> None:
    tc = ctx.config.train
    if (ds.window, ds.stride) != (tc.window, tc.stride):
        raise ArchMismatch(f"{path}: graphs use window/stride {ds.window}/{ds.stride}, "
                           f"config says {tc.window}/{tc.stride}")


def cmd_train_teacher(ctx: _Context) -> int:
    a = ctx.args
    ds = _load_graphs(ctx, a.graphs)
    _check_graph_config(ctx, ds, a.graphs)
    model, history = train_teacher(ds.graphs, ctx.config.train_config, ctx.config.teacher)
    out = ctx.out_path(a.out)
    _save(ctx, model, history, out, ctx.out_path(_history_path(a, out)))
    return EXIT_OK


def cmd_distill(ctx: _Context) -> int:
    a = ctx.args
    ds = _load_graphs(ctx, a.graphs)
    _check_graph_config(ctx, ds, a.graphs)
    teacher = _load_model(ctx, a.teacher, "teacher")
    _check_windowing(ds, teacher, a.graphs)
    model, history = distill_student(teacher, ds.graphs, ctx.config.train_config, ctx.config.student)
    model.meta["teacher_config_hash"] = teacher.meta.get("config_hash")
    out = ctx.out_path(a.out)
    _save(ctx, model, history, out, ctx.out_path(_history_path(a, out)))
    return EXIT_OK


def cmd_eval(ctx: _Context) -> int:
    a = ctx.args
    model = _load_model(ctx, a.checkpoint, a.expect_arch)
    ds = _load_graphs(ctx, a.graphs)
    _check_windowing(ds, model, a.graphs)
    report = evaluate_model(model, ds.graphs, ctx.config.threshold, meta={
        **ctx.meta(), "checkpoint_role": model.meta.get("role"),
        "checkpoint_config_hash": model.meta.get("config_hash"),
        "graphs_config_hash": ds.meta.get("config_hash"),
    })
    if a.report:
        ctx.out_path(a.report).write_text(report.to_json(), encoding="utf-8")
    if a.table:
        ctx.out_path(a.table).write_text(report.table(), encoding="utf-8")
    print(report.table(), end="")
    return EXIT_OK


def cmd_detect(ctx: _Context) -> int:
    a = ctx.args
    model = _load_model(ctx, a.checkpoint, a.expect_arch)
    cfg = model.meta.get("config") or {}
    window = a.window if a.window is not None else cfg.get("window", ctx.config.train.window)
    stride = a.stride if a.stride is not None else cfg.get("stride", ctx.config.train.stride)
    if window != cfg.get("window", window):
        raise ArchMismatch(f"window {window} differs from the checkpoint's training window {cfg['window']}")
    messages = _load_trace(ctx, a.trace, a.format, a.strict, unlabeled=False)
    detections = detect_stream(model, messages, window, stride, ctx.config.threshold)
    if not detections:
        raise EmptyTrace(f"{a.trace}: {len(messages)} messages, fewer than one window of {window}")
    out = ctx.out_path(a.out)
    write_detections(out, detections, comment=ctx.stamp())
    flagged = sum(d.verdict for d in detections)
    print(f"wrote {len(detections)} window verdicts ({flagged} flagged) to {out}")
    return EXIT_OK


def cmd_quickstart(ctx: _Context) -> int:
    """Whole desk-scale pipeline into one directory."""
    a = ctx.args
    out = ctx.path(a.outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(ctx.config.to_toml(), encoding="utf-8")
    steps = [
        ["synth", a.train_scenario, "train.csv"],
        ["synth", a.test_scenario, "test.csv"],
        ["graphs", "train.csv", "train.graphs"],
        ["graphs", "test.csv", "test.graphs"],
        ["train-teacher", "train.graphs", "teacher.ckpt"],
        ["distill", "train.graphs", "teacher.ckpt", "student.ckpt"],
        ["eval", "teacher.ckpt", "test.graphs", "--report", "teacher_report.json",
         "--table", "teacher_report.txt", "--expect-arch", "teacher"],
        ["eval", "student.ckpt", "test.graphs", "--report", "student_report.json",
         "--table", "student_report.txt", "--expect-arch", "student"],
        ["detect", "student.ckpt", "test.csv", "detections.csv"],
    ]
    for step in steps:
        print(f"== kdgat {' '.join(step)}")
        code = main([*step, "--data-dir", str(out), "--config", str(out / "config.toml")])
        if code != EXIT_OK:
            return code
    teacher = json.loads((out / "teacher_report.json").read_text())["metrics"]["accuracy"]
    student = json.loads((out / "student_report.json").read_text())["metrics"]["accuracy"]
    print(f"test accuracy: teacher {teacher:.4f}, student {student:.4f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="TOML run config (flags override it)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. train.clip_norm=1.0 or student.heads=2")
    g.add_argument("--seed", type=int, help="seed for every random stream")
    g.add_argument("--data-dir", help=f"base for relative paths (default ${DATA_DIR_ENV} or cwd)")
    g.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--warmup-epochs", type=int, help="hard-label epochs before distillation starts")
    g.add_argument("--alpha", type=float, help="weight of the hard-label term")
    g.add_argument("--tau", type=float, help="distillation temperature")
    g.add_argument("--gamma-focal", type=float)
    g.add_argument("--use-focal", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--val-fraction", type=float)
    g.add_argument("--history", help="history CSV (default: <checkpoint>.history.csv)")


def _window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, help="messages per window graph")
    p.add_argument("--stride", type=int, help="messages between window starts")


def _trace_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", default="canonical", choices=["canonical", "candump", "benchmark"])
    p.add_argument("--strict", action="store_true", help="fail on out-of-order timestamps")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="kdgat", description="GAT intrusion detection on CAN window graphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic trace")
    p.add_argument("scenario", help="scenario TOML, or a bundled name (desk_train, desk_test)")
    p.add_argument("out", help="canonical CSV to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graphs", parents=[common], help="build window graphs from a trace")
    p.add_argument("trace")
    p.add_argument("out", help="binary graph dataset to write")
    _window_flags(p)
    _trace_flags(p)
    p.add_argument("--unlabeled", action="store_true", help="mark every message Unknown")
    p.add_argument("--text", metavar="PATH", help="also write a readable text dump")
    p.set_defaults(func=cmd_graphs)

    p = sub.add_parser("train-teacher", parents=[common], help="supervised teacher training")
    p.add_argument("graphs")
    p.add_argument("out", help="checkpoint to write")
    _train_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    p.add_argument("graphs")
    p.add_argument("teacher", help="teacher checkpoint")
    p.add_argument("out", help="student checkpoint to write")
    _train_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a graph dataset")
    p.add_argument("checkpoint")
    p.add_argument("graphs")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--table", help="text table path")
    p.add_argument("--threshold", type=float, help="attack probability cutoff (default 0.5)")
    p.add_argument("--expect-arch", choices=["teacher", "student"],
                   help="fail unless the checkpoint has the configured architecture for this role")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="score every window of a trace")
    p.add_argument("checkpoint")
    p.add_argument("trace")
    p.add_argument("out", help="detection CSV to write")
    _window_flags(p)
    _trace_flags(p)
    p.add_argument("--threshold", type=float, help="attack probability cutoff (default 0.5)")
    p.add_argument("--expect-arch", choices=["teacher", "student"])
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("quickstart", parents=[common], help="desk-scale pipeline end to end")
    p.add_argument("outdir")
    p.add_argument("--train-scenario", default="desk_train")
    p.add_argument("--test-scenario", default="desk_test")
    p.set_defaults(func=cmd_quickstart)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "quickstart" and args.config is None:
        args.config = str(bundled_config("quickstart"))
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(_Context(args))
    except ConfigError as exc:
        print(f"kdgat: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"kdgat: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"kdgat: model error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except KdGatError as exc:
        print(f"kdgat: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
