"""Selective state-space mixer with low-rank projections.

The continuous system ``x'(t) = A x(t) + B u(t)``, ``y(t) = C x(t)`` is used
with a diagonal, strictly negative ``A``. Each token gets its own timestep
``delta``; zero-order hold turns the system into the per-channel recurrence

    x_t = exp(delta_t * a) * x_{t-1} + ((exp(delta_t * a) - 1) / a) * B_t * u_t
    y_t = <C_t, x_t> + D * u_t

which :func:`selective_scan` evaluates sequentially with ``x_0 = 0``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _scan, ops
from .errors import ConfigurationError, DimensionError, NumericalError
from .nn import DepthwiseConv1d, Linear, Module, uniform
from .tensor import Tensor, make_result, parameter

TAYLOR_CUTOFF = _scan.TAYLOR_CUTOFF


@dataclass(frozen=True)
class MixerConfig:
    d_model: int
    rank: int
    expand: int = 2
    d_state: int = 16
    conv_kernel: int = 3
    dt_rank: Optional[int] = None
    low_rank: bool = True

    def __post_init__(self):
        if self.d_model < 1 or self.expand < 1 or self.d_state < 1:
            raise ConfigurationError(f"mixer dims must be positive: {self}")
        if self.low_rank and not 1 <= self.rank <= self.d_model:
            raise ConfigurationError(f"rank must satisfy 1 <= rank <= d_model={self.d_model}, got {self.rank}")
        if self.conv_kernel < 1:
            raise ConfigurationError(f"conv_kernel must be >= 1, got {self.conv_kernel}")
        if self.dt_rank is not None and self.dt_rank < 1:
            raise ConfigurationError(f"dt_rank must be >= 1, got {self.dt_rank}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def delta_rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        return asdict(self)


class LowRankLinear(Module):
    """Factorized map ``y = x @ (U @ V^T) + bias``.

    ``U`` is (m, r) and ``V`` is (n, r). The product is evaluated as two thin
    matmuls; the dense (m, n) matrix is never formed.
    """

    kind = "low_rank"

    def __init__(self, m: int, n: int, rank: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, dtype=np.float32):
        if not 1 <= rank <= min(m, n):
            raise ConfigurationError(f"rank {rank} outside [1, min(m, n)={min(m, n)}] for a {m}x{n} map")
        self.m, self.n, self.rank = m, n, rank
        rng = rng if rng is not None else np.random.default_rng(0)
        # uniform factors whose product matches the variance of a dense +-sqrt(1/m) init
        bound = (3.0 / (rank * m)) ** 0.25
        self.U = parameter(uniform(rng, bound, (m, rank), dtype))
        self.V = parameter(uniform(rng, bound, (n, rank), dtype))
        self.bias = parameter(uniform(rng, math.sqrt(1.0 / m), (n,), dtype)) if bias else None

    @classmethod
    def from_factors(cls, U, V, bias=None) -> "LowRankLinear":
        U = np.asarray(U)
        V = np.asarray(V)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
            raise DimensionError(f"factor shapes {U.shape} and {V.shape} are not (m, r) and (n, r)")
        layer = cls.__new__(cls)
        layer.m, layer.n, layer.rank = U.shape[0], V.shape[0], U.shape[1]
        if layer.rank > min(layer.m, layer.n):
            raise ConfigurationError(f"rank {layer.rank} exceeds min(m, n) = {min(layer.m, layer.n)}")
        layer.U = parameter(U)
        layer.V = parameter(V)
        layer.bias = parameter(bias) if bias is not None else None
        return layer

    @classmethod
    def from_dense(cls, W, rank: int, bias=None) -> "LowRankLinear":
        """Best rank-``rank`` approximation of ``W`` (m, n) by truncated SVD.

        The singular values are split evenly, ``U = P sqrt(S)`` and ``V = Q sqrt(S)``.
        """
        W = np.asarray(W)
        if W.ndim != 2:
            raise DimensionError(f"expected a 2-d weight, got shape {W.shape}")
        if not 1 <= rank <= min(W.shape):
            raise ConfigurationError(f"rank {rank} outside [1, min(m, n)={min(W.shape)}] for a {W.shape} map")
        P, s, Qt = np.linalg.svd(W.astype(np.float64), full_matrices=False)
        root = np.sqrt(s[:rank])
        U = (P[:, :rank] * root).astype(W.dtype)
        V = (Qt[:rank].T * root).astype(W.dtype)
        return cls.from_factors(U, V, bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.m:
            raise DimensionError(f"low-rank input trailing dim {x.shape[-1]} != {self.m}")
        y = (x @ self.U) @ ops.transpose(self.V)
        return y + self.bias if self.bias is not None else y

    def dense_weight(self) -> np.ndarray:
        return self.U.data @ self.V.data.T

    def param_formula(self) -> int:
        return low_rank_params(self.m, self.n, self.rank, self.bias is not None)

    def flops(self, positions: int) -> int:
        return 2 * self.rank * (self.m + self.n) * positions


def low_rank_linear(x: Tensor, layer: LowRankLinear) -> Tensor:
    return layer(x)


def low_rank_params(m: int, n: int, rank: int, bias: bool = True) -> int:
    return rank * (m + n) + (n if bias else 0)


# -- discretization --------------------------------------------------------

@dataclass
class DiscreteSsm:
    """Per-token decay ``A_bar`` and input gain ``B_bar``, shape (..., L, D, S)."""

    A_bar: np.ndarray
    B_bar: np.ndarray


@dataclass
class SsmParams:
    """Inputs of one selective scan.

    ``A`` (D, S) holds the strictly negative diagonal of the state matrix;
    ``delta`` (..., L, D) is positive; ``B`` and ``C`` are (..., L, S); ``D`` is (D,).
    """

    A: Tensor
    B: Tensor
    C: Tensor
    delta: Tensor
    D: Optional[Tensor] = None


def discretize(delta, A, B) -> DiscreteSsm:
    """Zero-order hold of a diagonal system.

    ``A_bar = exp(delta * a)`` and ``B_bar = ((exp(delta * a) - 1) / a) * B``,
    falling back to ``delta * B`` when ``|delta * a| < 1e-6``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.any(delta <= 0):
        raise NumericalError("discretize needs strictly positive timesteps")
    z = delta[..., :, None] * A
    small = np.abs(z) < TAYLOR_CUTOFF
    safe_a = np.where(small, 1.0, A)
    gain = np.where(small, np.broadcast_to(delta[..., None], z.shape), np.expm1(z) / safe_a)
    return DiscreteSsm(A_bar=np.exp(z), B_bar=gain * B[..., None, :])


def _scan_op(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    y, states = _scan.run_forward(u.data, delta.data, A.data, B.data, C.data)
    y = y.astype(u.dtype, copy=False)

    def backward(g):
        grads = _scan.run_backward(g, u.data, delta.data, A.data, B.data, C.data, states)
        return tuple(gr.astype(p.dtype, copy=False) for gr, p in zip(grads, (u, delta, A, B, C)))

    return make_result(y, (u, delta, A, B, C), backward)


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Run the discretized recurrence over the token axis.

    ``u`` is (L, D) or (N, L, D). Differentiable in ``u`` and every field of
    ``params``. A zero-length sequence returns an empty output.
    """
    unbatched = u.ndim == 2
    if u.ndim not in (2, 3):
        raise DimensionError(f"selective_scan input must be (L, D) or (N, L, D), got {u.shape}")

    def batch(t: Tensor) -> Tensor:
        return ops.reshape(t, (1,) + t.shape) if unbatched else t

    ub, db, Bb, Cb = batch(u), batch(params.delta), batch(params.B), batch(params.C)
    d_inner, d_state = params.A.shape
    if ub.shape[-1] != d_inner or db.shape != ub.shape:
        raise DimensionError(f"scan shapes disagree: u {u.shape}, delta {params.delta.shape}, A {params.A.shape}")
    if Bb.shape != ub.shape[:2] + (d_state,) or Cb.shape != Bb.shape:
        raise DimensionError(f"scan B/C shapes {params.B.shape}, {params.C.shape} do not match state size {d_state}")
    y = _scan_op(ub, db, params.A, Bb, Cb)
    if params.D is not None:
        y = y + ub * params.D
    return ops.reshape(y, y.shape[1:]) if unbatched else y


# -- mixer -----------------------------------------------------------------

class MambaMixer(Module):
    """Gated selective-SSM token mixer mapping (..., L, d_model) to the same shape.

    in_gate / in_stream -> causal depthwise conv + SiLU on the stream ->
    data-dependent delta, B, C -> selective scan -> SiLU(gate) multiply ->
    out_proj. ``in_stream`` and ``out_proj`` are low-rank when ``cfg.low_rank``.
    """

    kind = "mixer"

    def __init__(self, cfg: MixerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d, di, ds, dr = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.delta_rank
        self.in_gate = Linear(d, di, rng, dtype=dtype)
        if cfg.low_rank:
            self.in_stream = LowRankLinear(d, di, cfg.rank, rng, dtype=dtype)
        else:
            self.in_stream = Linear(d, di, rng, dtype=dtype)
        self.conv = DepthwiseConv1d(di, cfg.conv_kernel, rng, dtype=dtype)
        self.x_proj = Linear(di, dr + 2 * ds, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(dr, di, rng, dtype=dtype)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
        self.dt_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))  # inverse softplus
        self.A_log = parameter(np.log(np.tile(np.arange(1, ds + 1, dtype=np.float64), (di, 1))).astype(dtype))
        self.D = parameter(np.ones(di, dtype=dtype))
        if cfg.low_rank:
            self.out_proj = LowRankLinear(di, d, cfg.rank, rng, dtype=dtype)
        else:
            self.out_proj = Linear(di, d, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[-1] != cfg.d_model:
            raise DimensionError(f"mixer expects trailing dim {cfg.d_model}, got {x.shape}")
        gate = self.in_gate(x)
        u = ops.silu(self.conv(self.in_stream(x)))
        proj = self.x_proj(u)
        dr, ds = cfg.delta_rank, cfg.d_state
        delta = ops.softplus(self.dt_proj(proj[..., :dr]))
        params = SsmParams(
            A=-ops.exp(self.A_log),
            B=proj[..., dr:dr + ds],
            C=proj[..., dr + ds:],
            delta=delta,
            D=self.D,
        )
        y = selective_scan(u, params)
        return self.out_proj(y * ops.silu(gate))

    def param_formula(self) -> int:
        # only the parameters owned directly by the mixer (A_log, D)
        return self.cfg.d_inner * self.cfg.d_state + self.cfg.d_inner

    def flops(self, positions: int) -> int:
        return scan_flops(positions, self.cfg.d_inner, self.cfg.d_state)


SCAN_FLOPS_PER_STATE = 6


def scan_flops(tokens: int, d_inner: int, d_state: int) -> int:
    """Discretize, update, and read out: 6 FLOPs per token, channel, and state."""
    return SCAN_FLOPS_PER_STATE * tokens * d_inner * d_state
