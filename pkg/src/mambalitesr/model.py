"""Super-resolution network assembly plus parameter and FLOP accounting."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigurationError, UsageError
from .nn import Conv2d, LayerNorm, Module
from .ssm import MambaMixer, MixerConfig
from .tensor import Tensor, resolve_dtype


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_rmmb: int
    blocks_per_rmmb: int
    rank: int
    scale: int = 4
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 3
    dt_rank: Optional[int] = None
    low_rank: bool = True
    finishing_conv: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_rmmb", "blocks_per_rmmb", "scale", "d_state", "expand", "conv_kernel"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigurationError(f"scale must be 2, 3 or 4, got {self.scale}")
        self.mixer_config()  # validates rank and mixer settings

    @property
    def n_layers(self) -> int:
        return self.n_rmmb * self.blocks_per_rmmb

    def mixer_config(self) -> MixerConfig:
        return MixerConfig(d_model=self.d_model, rank=self.rank, expand=self.expand, d_state=self.d_state,
                           conv_kernel=self.conv_kernel, dt_rank=self.dt_rank, low_rank=self.low_rank)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


TEACHER = ModelConfig(d_model=60, n_rmmb=8, blocks_per_rmmb=2, rank=2)
STUDENT = ModelConfig(d_model=32, n_rmmb=4, blocks_per_rmmb=2, rank=2)
PRESETS = {"teacher": TEACHER, "student": STUDENT}


def to_tokens(feat: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C) in raster order."""
    n, c, h, w = feat.shape
    return ops.transpose(ops.reshape(feat, (n, c, h * w)), (0, 2, 1))


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    n, length, c = tokens.shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (n, c, h, w))


class VisionMambaBlock(Module):
    """Pre-norm residual block around one mixer."""

    def __init__(self, mcfg: MixerConfig, rng, dtype):
        self.norm = LayerNorm(mcfg.d_model, dtype=dtype)
        self.mixer = MambaMixer(mcfg, rng, dtype=dtype)

    def forward(self, tokens: Tensor) -> Tensor:
        return tokens + self.mixer(self.norm(tokens))


class ResidualMixedMambaBlock(Module):
    """A run of Vision Mamba blocks followed by a conv, wrapped in a skip."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        mcfg = cfg.mixer_config()
        self.blocks = [VisionMambaBlock(mcfg, rng, dtype) for _ in range(cfg.blocks_per_rmmb)]
        self.conv = Conv2d(cfg.d_model, cfg.d_model, 3, rng, dtype=dtype)

    def forward(self, feat: Tensor) -> Tensor:
        h, w = feat.shape[-2:]
        tokens = to_tokens(feat)
        for block in self.blocks:
            tokens = block(tokens)
        return feat + self.conv(from_tokens(tokens, h, w))


class SrModel(Module):
    """Shallow conv -> RMMB stack -> fusion conv -> global residual -> pixel-shuffle head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = cfg
        d = cfg.d_model
        self.conv_first = Conv2d(3, d, 3, rng, dtype=dtype)
        self.body = [ResidualMixedMambaBlock(cfg, rng, dtype) for _ in range(cfg.n_rmmb)]
        self.conv_after_body = Conv2d(d, d, 3, rng, dtype=dtype)
        self.upsample = Conv2d(d, 3 * cfg.scale ** 2, 3, rng, dtype=dtype)
        self.conv_last = Conv2d(3, 3, 3, rng, dtype=dtype) if cfg.finishing_conv else None

    @property
    def dtype(self) -> np.dtype:
        return self.conv_first.weight.dtype

    def _children(self):
        for key, value in super()._children():
            if key != "config":
                yield key, value

    def mixers(self) -> list[MambaMixer]:
        return [block.mixer for rmmb in self.body for block in rmmb.blocks]

    def features(self, x: Tensor) -> Tensor:
        shallow = self.conv_first(x)
        deep = shallow
        for rmmb in self.body:
            deep = rmmb(deep)
        return shallow + self.conv_after_body(deep)

    def head(self, feat: Tensor) -> Tensor:
        out = ops.pixel_shuffle(self.upsample(feat), self.config.scale)
        if self.conv_last is not None:
            out = self.conv_last(out)
        return out

    def forward(self, lr: Tensor) -> Tensor:
        if not isinstance(lr, Tensor):
            lr = Tensor(np.asarray(lr, dtype=self.dtype))
        if lr.ndim not in (3, 4) or lr.shape[-3] != 3:
            raise UsageError(f"model input must be (3, h, w) or (N, 3, h, w), got {lr.shape}")
        if min(lr.shape[-2:]) < 1:
            raise UsageError(f"empty input {lr.shape}")
        unbatched = lr.ndim == 3
        x = ops.reshape(lr, (1,) + lr.shape) if unbatched else lr
        out = self.head(self.features(x))
        return ops.reshape(out, out.shape[1:]) if unbatched else out


def build_model(cfg: ModelConfig, rng_seed: int = 0, dtype="f32") -> SrModel:
    """Instantiate ``cfg`` with weights drawn deterministically from ``rng_seed``."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigurationError(f"expected ModelConfig, got {type(cfg).__name__}")
    return SrModel(cfg, np.random.default_rng(rng_seed), dtype=resolve_dtype(dtype))


# -- accounting ----------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    kind: str
    params: int
    analytic: Optional[int] = None
    flops: int = 0
    positions: int = 0


@dataclass
class CountReport:
    total: int
    rows: list[LayerRow] = field(default_factory=list)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for row in self.rows:
            out[row.kind] = out.get(row.kind, 0) + row.params
        return out


def _own_param_count(module: Module) -> int:
    return sum(v.size for k, v in module._children() if isinstance(v, Tensor))


def count_params(model: SrModel) -> CountReport:
    """Enumerate the registry; each leaf row also carries its closed-form count."""
    total = sum(p.size for _, p in model.named_parameters())
    rows = []
    for name, module in model.named_modules():
        own = _own_param_count(module)
        if own == 0:
            continue
        rows.append(LayerRow(name=name, kind=module.kind, params=own, analytic=module.param_formula()))
    return CountReport(total=total, rows=rows)


def analytic_param_total(cfg: ModelConfig) -> int:
    """Closed-form total parameter count, independent of any built model."""
    d, di, ds = cfg.d_model, cfg.expand * cfg.d_model, cfg.d_state
    dr = cfg.dt_rank if cfg.dt_rank is not None else math.ceil(d / 16)
    conv = lambda cin, cout: cin * cout * 9 + cout  # noqa: E731
    dense = lambda a, b, bias=True: a * b + (b if bias else 0)  # noqa: E731
    if cfg.low_rank:
        stream = cfg.rank * (d + di) + di
        out = cfg.rank * (di + d) + d
    else:
        stream = dense(d, di)
        out = dense(di, d)
    mixer = (dense(d, di) + stream + (di * cfg.conv_kernel + di) + dense(di, dr + 2 * ds, False)
             + dense(dr, di) + di * ds + di + out)
    block = 2 * d + mixer
    rmmb = cfg.blocks_per_rmmb * block + conv(d, d)
    total = conv(3, d) + cfg.n_rmmb * rmmb + conv(d, d) + conv(d, 3 * cfg.scale ** 2)
    if cfg.finishing_conv:
        total += conv(3, 3)
    return total


def embed_reduction_ratio(d_small: int, d_base: int) -> Fraction:
    """Parameter-count factor ``d_small^2 / d_base^2`` of shrinking the embedding."""
    for name, value in (("d_small", d_small), ("d_base", d_base)):
        if not isinstance(value, int) or value <= 0:
            raise UsageError(f"{name} must be a positive integer, got {value!r}")
    if d_small > d_base:
        raise UsageError(f"d_small ({d_small}) must not exceed d_base ({d_base})")
    return Fraction(d_small * d_small, d_base * d_base)


@dataclass
class FlopReport:
    total: int
    rows: list[LayerRow] = field(default_factory=list)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for row in self.rows:
            out[row.kind] = out.get(row.kind, 0) + row.flops
        return out


def estimate_flops(model: SrModel, input_shape: Sequence[int]) -> FlopReport:
    """Count 2 FLOPs per multiply-accumulate for one forward pass on an LR input.

    ``input_shape`` is (h, w) or (3, h, w). Norms, activations, and additions
    are not counted; the scan costs a fixed 6 FLOPs per token, channel and state.
    """
    h, w = int(input_shape[-2]), int(input_shape[-1])
    lr_positions = h * w
    hr_positions = lr_positions * model.config.scale ** 2
    rows = []
    for name, module in model.named_modules():
        if module.param_formula() is None or module.kind == "norm":
            continue
        positions = hr_positions if name == "conv_last" else lr_positions
        rows.append(LayerRow(name=name, kind=module.kind, params=_own_param_count(module),
                             flops=module.flops(positions), positions=positions))
    return FlopReport(total=sum(r.flops for r in rows), rows=rows)
