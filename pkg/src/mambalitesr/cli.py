"""Command line entry point: ``mlsr <subcommand> ...``.

Exit status is 0 on success, 2 on a usage or configuration error and 1 when a
stage fails at run time. Every run writes ``resolved_config.json`` into its
output directory before doing any work.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint, read_config
from .data import PairedDataset, find_images, load_png, save_png
from .errors import ConfigurationError, MambaLiteError, UsageError
from .experiments import sweep_alpha, sweep_rank
from .infer import TileGrid, super_resolve
from .metrics import MetricReport
from .model import PRESETS, ModelConfig, analytic_param_total, build_model, count_params, embed_reduction_ratio, \
    estimate_flops
from .reporting import fmt, write_csv
from .train import TrainConfig, distill_student, train_teacher

ENV_OUT = "MLSR_OUT"
SNAPSHOT = "resolved_config.json"
DEFAULT_OUT_ROOT = Path("runs")


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc

    @property
    def usage(self) -> bool:
        return isinstance(self.exc, (UsageError, ConfigurationError))


@contextlib.contextmanager
def stage(name: str):
    """Tag any failure inside the block with the stage that raised it."""
    try:
        yield
    except StageError:
        raise
    except (MambaLiteError, OSError, ValueError, KeyError, TypeError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration -----------------------------------------------------------

def parse_value(text: str):
    """JSON literal when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str], sections: Sequence[str]) -> dict[str, dict]:
    """``section.key=value`` pairs; an unprefixed key goes to the first section."""
    out: dict[str, dict] = {s: {} for s in sections}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not key=value")
        section, dot, name = key.partition(".")
        if not dot:
            section, name = sections[0], key
        if section not in out:
            raise UsageError(f"override {item!r}: prefix must be one of {', '.join(sections)}")
        out[section][name] = parse_value(raw)
    return out


def load_model_config(ref: str, overrides: Optional[dict] = None) -> ModelConfig:
    """A preset name or a path to a JSON model config, plus overrides."""
    if ref in PRESETS:
        data = PRESETS[ref].to_dict()
    else:
        path = Path(ref)
        if not path.exists():
            raise UsageError(f"config {ref!r} is neither a preset ({', '.join(PRESETS)}) nor an existing file")
        data = json.loads(path.read_text())
        if "model" in data and isinstance(data["model"], dict):
            data = data["model"]
    data.update(overrides or {})
    return ModelConfig.from_dict(data)


def load_train_config(path: Optional[str], overrides: Optional[dict] = None, seed: Optional[int] = None,
                      iters: Optional[int] = None) -> TrainConfig:
    data: dict = {}
    if path:
        data = json.loads(Path(path).read_text())
        if "train" in data and isinstance(data["train"], dict):
            data = data["train"]
    if iters is not None:
        data["total_iterations"] = iters
    data.update(overrides or {})
    if seed is not None:
        data["seed"] = seed
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def output_dir(args) -> Path:
    """``--out`` beats ``$MLSR_OUT`` beats ``runs/<subcommand>``."""
    if args.out:
        return Path(args.out)
    env = os.environ.get(ENV_OUT)
    if env:
        return Path(env)
    return DEFAULT_OUT_ROOT / args.command


def write_snapshot(out: Path, args, resolved: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    snap = {
        "version": __version__,
        "subcommand": args.command,
        "argv": list(args.argv),
        "overrides": list(args.set),
        "seed": args.seed,
        "out": str(out),
    }
    snap.update(resolved)
    path = out / SNAPSHOT
    path.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    return path


def _dataset(hr_dir: str, lr_dir: Optional[str], scale: int) -> PairedDataset:
    return PairedDataset.from_directory(hr_dir, lr_dir, scale)


def _inputs(args) -> dict:
    keys = ("data", "lr_dir", "val", "val_lr", "teacher", "checkpoint", "input", "resume")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


# -- subcommands ---------------------------------------------------------------

def _load_training(args, sections=("train", "model")):
    with stage("config"):
        ov = parse_overrides(args.set, sections)
        model_cfg = load_model_config(args.config, ov.get("model"))
        train_cfg = load_train_config(args.train_config, ov["train"], args.seed, getattr(args, "iters", None))
    return ov, model_cfg, train_cfg


def _load_data(args, scale: int):
    with stage("data"):
        data = _dataset(args.data, args.lr_dir, scale)
        val = _dataset(args.val, args.val_lr, scale) if args.val else None
    return data, val


def cmd_train_teacher(args, out: Path) -> int:
    _, model_cfg, train_cfg = _load_training(args)
    write_snapshot(out, args, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "inputs": _inputs(args)})
    data, val = _load_data(args, model_cfg.scale)
    with stage("train"):
        res = train_teacher(model_cfg, train_cfg, data, out_dir=out, val=val, resume=args.resume)
    print(f"teacher final loss {fmt(res.final_loss)}; checkpoint {res.checkpoint}")
    print(f"metrics {out / 'metrics.csv'}")
    return 0


def cmd_distill(args, out: Path) -> int:
    _, model_cfg, train_cfg = _load_training(args)
    with stage("teacher"):
        teacher_cfg = read_config(args.teacher)
    write_snapshot(out, args, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                               "teacher": teacher_cfg.to_dict(), "inputs": _inputs(args)})
    data, val = _load_data(args, model_cfg.scale)
    with stage("distill"):
        res = distill_student(args.teacher, model_cfg, train_cfg, data, out_dir=out, val=val, resume=args.resume)
    print(f"student final loss {fmt(res.final_loss)}; checkpoint {res.checkpoint}")
    print(f"metrics {out / 'metrics.csv'}")
    return 0


def _parse_dataset(spec: str) -> tuple[str, str, Optional[str]]:
    name, sep, paths = spec.partition("=")
    if not sep or not name or not paths:
        raise UsageError(f"dataset {spec!r} must be NAME=HR_DIR[,LR_DIR]")
    hr, _, lr = paths.partition(",")
    return name, hr, lr or None


def cmd_eval(args, out: Path) -> int:
    with stage("config"):
        datasets = [_parse_dataset(s) for s in args.dataset]
        names = [d[0] for d in datasets]
        if len(set(names)) != len(names):
            raise UsageError(f"dataset names repeat: {names}")
        cfg = read_config(args.checkpoint)
        grid = TileGrid(args.tile, args.overlap)
        crop = cfg.scale if args.crop is None else args.crop
    write_snapshot(out, args, {"model": cfg.to_dict(), "crop": crop, "tile": args.tile, "overlap": args.overlap,
                               "datasets": {n: [h, lr] for n, h, lr in datasets}, "inputs": _inputs(args)})
    with stage("checkpoint"):
        model = load_checkpoint(args.checkpoint)
    for name, hr_dir, lr_dir in datasets:
        with stage(f"eval {name}"):
            data = _dataset(hr_dir, lr_dir, cfg.scale)
            report = MetricReport(name, crop)
            for pair in data.pairs:
                report.add(pair.name, super_resolve(model, pair.lr, grid), pair.hr)
            report.write(out)
        print(f"{name}: PSNR {fmt(report.mean_psnr)} dB, SSIM {fmt(report.mean_ssim)} over {len(report.scores)} images")
    return 0


def cmd_infer(args, out: Path) -> int:
    with stage("config"):
        cfg = read_config(args.checkpoint)
        grid = TileGrid(args.tile, args.overlap)
        paths = find_images(args.input)
        if not paths:
            raise UsageError(f"no PNG images at {args.input}")
    write_snapshot(out, args, {"model": cfg.to_dict(), "tile": args.tile, "overlap": args.overlap,
                               "inputs": _inputs(args)})
    with stage("checkpoint"):
        model = load_checkpoint(args.checkpoint)
    for path in paths:
        with stage(f"infer {path.name}"):
            sr = super_resolve(model, load_png(path), grid)
            target = out / f"{path.stem}_x{cfg.scale}.png"
            save_png(sr, target)
        print(target)
    return 0


def cmd_count(args, out: Path) -> int:
    with stage("config"):
        ov = parse_overrides(args.set, ("model",))
        cfg = load_model_config(args.config, ov["model"])
        ratio = None
        if args.d_small is not None or args.d_base is not None:
            if args.d_small is None or args.d_base is None:
                raise UsageError("--d-small and --d-base go together")
            ratio = embed_reduction_ratio(args.d_small, args.d_base)
    write_snapshot(out, args, {"model": cfg.to_dict(), "inputs": _inputs(args)})
    with stage("count"):
        report = count_params(build_model(cfg, args.seed or 0))
        analytic = analytic_param_total(cfg)
        write_csv(out / "count.csv", ("layer", "kind", "params", "analytic"),
                  [(r.name, r.kind, r.params, r.analytic if r.analytic is not None else "") for r in report.rows])
        summary = {"total": report.total, "analytic_total": analytic, "by_kind": report.by_kind()}
        if ratio is not None:
            summary["embed_ratio"] = {"d_small": args.d_small, "d_base": args.d_base,
                                      "fraction": str(ratio), "value": float(ratio)}
        (out / "count.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"total {report.total}")
    for kind, n in sorted(report.by_kind().items()):
        print(f"  {kind:<10} {n}")
    if ratio is not None:
        print(f"embed ratio d_small^2/d_base^2 = {ratio} ({fmt(float(ratio))})")
    return 0


def _parse_size(text: str) -> tuple[int, int]:
    h, sep, w = text.lower().partition("x")
    try:
        size = (int(h), int(w)) if sep else (int(h), int(h))
    except ValueError:
        raise UsageError(f"size {text!r} must look like 64 or 48x64") from None
    if min(size) < 1:
        raise UsageError(f"size {text!r} must be positive")
    return size


def cmd_flops(args, out: Path) -> int:
    with stage("config"):
        ov = parse_overrides(args.set, ("model",))
        cfg = load_model_config(args.config, ov["model"])
        size = _parse_size(args.input_size)
    write_snapshot(out, args, {"model": cfg.to_dict(), "input_size": list(size), "inputs": _inputs(args)})
    with stage("flops"):
        report = estimate_flops(build_model(cfg, args.seed or 0), size)
        write_csv(out / "flops.csv", ("layer", "kind", "positions", "flops"),
                  [(r.name, r.kind, r.positions, r.flops) for r in report.rows])
        summary = {"total": report.total, "input_size": list(size), "by_kind": report.by_kind()}
        (out / "flops.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"total {report.total} FLOPs for a {size[0]}x{size[1]} input")
    for kind, n in sorted(report.by_kind().items()):
        print(f"  {kind:<10} {n}")
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma separated integers, got {text!r}") from None


def cmd_sweep_alpha(args, out: Path) -> int:
    ov, model_cfg, train_cfg = _load_training(args, ("train", "model", "teacher"))
    with stage("config"):
        alphas = _float_list(args.alphas)
        teacher_cfg = read_config(args.teacher) if args.teacher else load_model_config(args.teacher_config,
                                                                                         ov["teacher"])
    write_snapshot(out, args, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                               "teacher": teacher_cfg.to_dict(), "alphas": alphas, "inputs": _inputs(args)})
    data, val = _load_data(args, model_cfg.scale)
    teacher = args.teacher
    if teacher is None:
        with stage("teacher"):
            teacher = train_teacher(teacher_cfg, train_cfg, data, out_dir=out / "teacher", val=val).model
    with stage("sweep-alpha"):
        points = sweep_alpha(teacher, model_cfg, train_cfg, data, alphas, out_dir=out, val=val, jobs=args.jobs)
    for p in points:
        print(f"alpha {fmt(p.alpha)}  PSNR {fmt(p.psnr)} dB")
    print(f"table {out / 'sweep_alpha.csv'}; chart {out / 'sweep_alpha.svg'}")
    return 0


def cmd_sweep_rank(args, out: Path) -> int:
    _, model_cfg, train_cfg = _load_training(args)
    with stage("config"):
        ranks = _int_list(args.ranks)
        size = _parse_size(args.input_size)
    write_snapshot(out, args, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "ranks": ranks,
                               "input_size": list(size), "inputs": _inputs(args)})
    data, val = _load_data(args, model_cfg.scale)
    with stage("sweep-rank"):
        points = sweep_rank(model_cfg, train_cfg, data, ranks, out_dir=out, val=val, jobs=args.jobs,
                            flop_input=size)
    for p in points:
        print(f"rank {p.rank}  params {p.params}  FLOPs {p.flops}  low-rank FLOPs {p.lowrank_flops}  "
              f"PSNR {fmt(p.final_psnr)} dB")
    print(f"table {out / 'sweep_rank.csv'}; chart {out / 'sweep_rank.svg'}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlsr", description="Low-rank Mamba super-resolution: training, distillation, "
                                              "evaluation and cost accounting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_default: Optional[str] = None):
        if config_default is not None:
            p.add_argument("--config", default=config_default,
                           help=f"model preset ({', '.join(PRESETS)}) or JSON file (default: {config_default})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. model.d_model=16 or train.batch_size=4")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides train.seed)")
        p.add_argument("--out", default=None, help=f"output directory (default: ${ENV_OUT} or runs/<command>)")

    def training(p):
        p.add_argument("--train-config", default=None, help="JSON file with training settings")
        p.add_argument("--data", required=True, help="directory of HR training PNGs")
        p.add_argument("--lr-dir", default=None, help="directory of matching LR PNGs (default: bicubic)")
        p.add_argument("--val", default=None, help="directory of HR validation PNGs (default: training set)")
        p.add_argument("--val-lr", default=None, help="directory of matching LR validation PNGs")

    def tiling(p):
        p.add_argument("--tile", type=int, default=64, help="LR tile size")
        p.add_argument("--overlap", type=int, default=0, help="LR tile overlap")

    p = sub.add_parser("train-teacher", help="train a model on L1 against HR")
    common(p, "teacher")
    training(p)
    p.add_argument("--iters", type=int, default=None, help="total iterations")
    p.add_argument("--resume", default=None, help="trainer checkpoint to continue from")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    common(p, "student")
    training(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--iters", type=int, default=None, help="total iterations")
    p.add_argument("--resume", default=None, help="trainer checkpoint to continue from")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="PSNR/SSIM on the Y channel for one or more datasets")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", action="append", required=True, metavar="NAME=HR_DIR[,LR_DIR]")
    p.add_argument("--crop", type=int, default=None, help="border crop in pixels (default: scale)")
    tiling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve PNG images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    tiling(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("count", help="per-layer parameter table")
    common(p, "student")
    p.add_argument("--d-small", type=int, default=None, help="reduced embedding width for the ratio")
    p.add_argument("--d-base", type=int, default=None, help="baseline embedding width for the ratio")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("flops", help="per-layer FLOP table")
    common(p, "student")
    p.add_argument("--input-size", default="64", help="LR input size, H or HxW")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep-alpha", help="distill one student per alpha")
    common(p, "student")
    training(p)
    p.add_argument("--alphas", default="0.2,0.4,0.6,0.8")
    p.add_argument("--iters", type=int, default=None, help="iterations per point (and for the teacher)")
    p.add_argument("--teacher", default=None, help="teacher checkpoint (default: train one first)")
    p.add_argument("--teacher-config", default="teacher", help="teacher preset or JSON when training one")
    p.add_argument("--jobs", type=int, default=1, help="sweep points run concurrently")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-rank", help="train one teacher per projection rank")
    common(p, "teacher")
    training(p)
    p.add_argument("--ranks", default="2,30")
    p.add_argument("--iters", type=int, default=None, help="iterations per point")
    p.add_argument("--input-size", default="64", help="LR input size used for FLOPs")
    p.add_argument("--jobs", type=int, default=1, help="sweep points run concurrently")
    p.set_defaults(func=cmd_sweep_rank)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        with stage("arguments"):
            args = build_parser().parse_args(argv)
            for name in ("tile", "jobs", "iters"):
                value = getattr(args, name, None)
                if value is not None and value < 1:
                    raise UsageError(f"--{name} must be positive, got {value}")
        args.argv = argv
        out = output_dir(args)
        return args.func(args, out)
    except StageError as err:
        print(f"mlsr {argv[0] if argv else ''}: error in stage '{err.stage}': {err.exc}", file=sys.stderr)
        return 2 if err.usage else 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
