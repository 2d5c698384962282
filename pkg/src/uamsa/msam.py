"""Dual-scale attention block (pooled non-local attention at two resolutions).

Each branch projects the input with three 1x1 convolutions (query/key with
``C // r`` channels, value with ``C``), average-pools them to a coarse grid
of ``N`` positions, forms ``A = softmax(Q^T K / sqrt(C_red))`` normalized over
its first axis so that every output position is a convex combination of value
vectors, computes ``V A`` and bilinearly upsamples back.  The block runs one
branch on ``x`` and one on a 2x average-pooled copy, then fuses the two with
a 1x1 convolution over their channel concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import GeometryError, ParameterError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class MsamConfig:
    channels: int
    reduction: int = 2
    pool_divisor: int = 4
    share_branch_weights: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1 or self.pool_divisor < 1:
            raise ParameterError("channels, reduction and pool_divisor must be positive")
        if self.channels % self.reduction:
            raise ParameterError(f"reduction {self.reduction} does not divide channels {self.channels}")

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction

    def pooled_size(self, h: int, w: int) -> tuple[int, int]:
        return max(1, h // self.pool_divisor), max(1, w // self.pool_divisor)


@dataclass
class BranchParams:
    wq: Tensor
    bq: Optional[Tensor]
    wk: Tensor
    bk: Optional[Tensor]
    wv: Tensor
    bv: Optional[Tensor]


@dataclass
class MsamParams:
    orig: BranchParams
    down: BranchParams
    wf: Tensor
    bf: Optional[Tensor]


def param_shapes(cfg: MsamConfig) -> dict[str, tuple]:
    """Parameter names (relative to the block prefix) and their shapes."""
    c, cr = cfg.channels, cfg.reduced
    shapes = {}
    branches = ("orig",) if cfg.share_branch_weights else ("orig", "down")
    for br in branches:
        shapes[f"{br}.q.weight"] = (cr, c, 1, 1)
        shapes[f"{br}.q.bias"] = (cr,)
        shapes[f"{br}.k.weight"] = (cr, c, 1, 1)
        shapes[f"{br}.k.bias"] = (cr,)
        shapes[f"{br}.v.weight"] = (c, c, 1, 1)
        shapes[f"{br}.v.bias"] = (c,)
    shapes["fuse.weight"] = (c, 2 * c, 1, 1)
    shapes["fuse.bias"] = (c,)
    return shapes


def params_from_flat(flat: dict, prefix: str, cfg: MsamConfig) -> MsamParams:
    def branch(name):
        g = lambda key: flat[f"{prefix}{name}.{key}"]
        return BranchParams(g("q.weight"), g("q.bias"), g("k.weight"), g("k.bias"), g("v.weight"), g("v.bias"))

    orig = branch("orig")
    down = orig if cfg.share_branch_weights else branch("down")
    return MsamParams(orig, down, flat[f"{prefix}fuse.weight"], flat[f"{prefix}fuse.bias"])


def init_params(cfg: MsamConfig, gen: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / int(np.prod(shape[1:])))
            arr = gen.uniform(-bound, bound, size=shape)
        out[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return out


def attention_branch(x: Tensor, params: BranchParams, cfg: MsamConfig, inspect: Optional[dict] = None) -> Tensor:
    """Single-scale pooled attention; output has the shape of ``x``.

    If ``inspect`` is a dict it receives the attention map ``A`` (B*N*N), the
    flattened pooled values ``V`` (B*C*N) and the pre-upsample output ``Z``
    (B*C*N) as numpy arrays.
    """
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ShapeError(f"attention_branch expects B*{cfg.channels}*H*W input, got {x.shape}")
    B, C, H, W = x.shape
    hp, wp = cfg.pooled_size(H, W)
    n = hp * wp
    q = T.adaptive_avg_pool2d(T.conv2d(x, params.wq, params.bq), hp, wp)
    k = T.adaptive_avg_pool2d(T.conv2d(x, params.wk, params.bk), hp, wp)
    v = T.adaptive_avg_pool2d(T.conv2d(x, params.wv, params.bv), hp, wp)
    q = T.reshape(q, (B, cfg.reduced, n))
    k = T.reshape(k, (B, cfg.reduced, n))
    v = T.reshape(v, (B, C, n))
    logits = T.mul(T.batched_matmul(T.transpose(q), k), 1.0 / math.sqrt(cfg.reduced))
    attn = T.softmax(logits, axis=1)
    z = T.batched_matmul(v, attn)
    if inspect is not None:
        inspect["A"] = attn.data
        inspect["V"] = v.data
        inspect["Z"] = z.data
    z = T.reshape(z, (B, C, hp, wp))
    return T.upsample(z, H, W, mode="bilinear")


def msam_forward(x: Tensor, params: MsamParams, cfg: MsamConfig, inspect: Optional[dict] = None) -> Tensor:
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ShapeError(f"msam expects B*{cfg.channels}*H*W input, got {x.shape}")
    H, W = x.shape[2:]
    if H < 2 or W < 2:
        raise GeometryError(f"msam needs spatial size >= 2 in both axes, got {H}x{W}")
    sub_orig = {} if inspect is not None else None
    sub_down = {} if inspect is not None else None
    z_orig = attention_branch(x, params.orig, cfg, sub_orig)
    x_down = T.adaptive_avg_pool2d(x, -(-H // 2), -(-W // 2))
    z_down = T.upsample(attention_branch(x_down, params.down, cfg, sub_down), H, W, mode="bilinear")
    if inspect is not None:
        inspect["orig"] = dict(sub_orig, out=z_orig.data)
        inspect["down"] = dict(sub_down, out=z_down.data)
    return T.conv2d(T.concat([z_orig, z_down], axis=1), params.wf, params.bf)
