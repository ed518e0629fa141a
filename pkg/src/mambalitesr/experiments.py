"""Alpha and rank sweeps with CSV tables and SVG charts."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .data import PairedDataset
from .errors import UsageError
from .model import ModelConfig, SrModel, build_model, count_params, estimate_flops
from .reporting import line_chart_svg, write_csv, write_svg
from .train import TrainConfig, ValidationSet, _validation, distill_student, train_teacher, validate

ALPHA_HEADER = ("alpha", "psnr")
RANK_HEADER = ("rank", "params", "flops", "lowrank_flops", "final_psnr", "final_loss")
FLOP_INPUT = (64, 64)


@dataclass
class AlphaPoint:
    alpha: float
    psnr: float
    final_loss: float


@dataclass
class RankPoint:
    rank: int
    params: int
    flops: int
    lowrank_flops: int
    final_psnr: float
    final_loss: float


def _point_dir(out_dir: Optional[Path], name: str) -> Optional[Path]:
    return Path(out_dir) / name if out_dir is not None else None


def _alpha_point(args) -> AlphaPoint:
    alpha, teacher, student_cfg, train_cfg, data, val, out_dir = args
    cfg = train_cfg.replace(alpha=alpha)
    res = distill_student(teacher, student_cfg, cfg, data, out_dir=out_dir, val=val)
    return AlphaPoint(alpha, validate(res.model, val, cfg.patch_size), res.final_loss)


def _rank_point(args) -> RankPoint:
    rank, teacher_cfg, train_cfg, data, val, out_dir, flop_input = args
    cfg = teacher_cfg.replace(rank=rank)
    res = train_teacher(cfg, train_cfg, data, out_dir=out_dir, val=val)
    flops = estimate_flops(res.model, flop_input)
    return RankPoint(rank, count_params(res.model).total, flops.total, flops.by_kind().get("low_rank", 0),
                     validate(res.model, val, train_cfg.patch_size), res.final_loss)


def _run(fn, jobs: int, items: list):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _check_values(values: Sequence, name: str) -> None:
    if not values:
        raise UsageError(f"{name} list is empty")
    if len(set(values)) != len(values):
        raise UsageError(f"{name} list has duplicates: {list(values)}")


def sweep_alpha(teacher: Union[SrModel, str, Path], student_cfg: ModelConfig, train_cfg: TrainConfig,
                data: PairedDataset, alphas: Sequence[float], out_dir=None,
                val: Optional[Union[ValidationSet, PairedDataset]] = None, jobs: int = 1) -> list[AlphaPoint]:
    """Distill one student per alpha from the same frozen teacher.

    Every point starts from the same seed, so points differ only by alpha.
    """
    _check_values(alphas, "alpha")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise UsageError(f"alpha {a} outside [0, 1]")
    val = _validation(data, val, train_cfg)
    items = [(float(a), teacher, student_cfg, train_cfg, data, val, _point_dir(out_dir, f"alpha_{a:g}"))
             for a in alphas]
    points = _run(_alpha_point, jobs, items)
    if out_dir is not None:
        write_alpha_report(points, out_dir)
    return points


def write_alpha_report(points: Sequence[AlphaPoint], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = write_csv(out_dir / "sweep_alpha.csv", ALPHA_HEADER, [(p.alpha, p.psnr) for p in points])
    svg = line_chart_svg({"student": [(p.alpha, p.psnr) for p in points]},
                         "Student PSNR against distillation weight", "alpha", "PSNR (dB)")
    return csv_path, write_svg(out_dir / "sweep_alpha.svg", svg)


def sweep_rank(teacher_cfg: ModelConfig, train_cfg: TrainConfig, data: PairedDataset, ranks: Sequence[int],
               out_dir=None, val: Optional[Union[ValidationSet, PairedDataset]] = None, jobs: int = 1,
               flop_input: Sequence[int] = FLOP_INPUT) -> list[RankPoint]:
    """Train one teacher per projection rank; FLOPs are counted on a ``flop_input`` LR image."""
    _check_values(ranks, "rank")
    for r in ranks:
        # fail before any training starts
        teacher_cfg.replace(rank=int(r))
    val = _validation(data, val, train_cfg)
    items = [(int(r), teacher_cfg, train_cfg, data, val, _point_dir(out_dir, f"rank_{r}"), tuple(flop_input))
             for r in ranks]
    points = _run(_rank_point, jobs, items)
    if out_dir is not None:
        write_rank_report(points, out_dir)
    return points


def write_rank_report(points: Sequence[RankPoint], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    rows = [(p.rank, p.params, p.flops, p.lowrank_flops, p.final_psnr, p.final_loss) for p in points]
    csv_path = write_csv(out_dir / "sweep_rank.csv", RANK_HEADER, rows)
    base = points[0].flops or 1
    svg = line_chart_svg({"relative FLOPs": [(p.rank, p.flops / base) for p in points],
                          "relative params": [(p.rank, p.params / (points[0].params or 1)) for p in points]},
                         "Cost against projection rank", "rank", f"relative to rank {points[0].rank}")
    return csv_path, write_svg(out_dir / "sweep_rank.svg", svg)


def rank_costs(teacher_cfg: ModelConfig, rank: int, flop_input: Sequence[int] = FLOP_INPUT) -> tuple[int, int, int]:
    """(params, flops, low-rank flops) without training."""
    model = build_model(teacher_cfg.replace(rank=rank))
    flops = estimate_flops(model, flop_input)
    return count_params(model).total, flops.total, flops.by_kind().get("low_rank", 0)
