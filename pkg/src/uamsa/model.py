"""U-Net assembly: the attention variant and the plain baseline.

Parameter names (see docs/checkpoint-schema.md)::

    enc{l}.conv{1,2}.{weight,bias}          l = 0 .. depth-1
    enc{l}.msam.{orig,down}.{q,k,v}.{weight,bias}   (uamsa only)
    enc{l}.msam.fuse.{weight,bias}                  (uamsa only)
    bottleneck.conv{1,2}.{weight,bias}
    dec{l}.up.{weight,bias}
    dec{l}.conv{1,2}.{weight,bias}
    head.{weight,bias}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import msam as M
from . import tensor as T
from .errors import GeometryError, ParameterError
from .rng import Rng, as_generator
from .tensor import Tensor

VARIANTS = ("uamsa", "plain_unet")
MODES = ("train", "mc", "deterministic")


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    dropout_p: float = 0.2
    variant: str = "uamsa"
    msam_reduction: int = 2
    msam_pool_divisor: int = 4
    msam_share_weights: bool = False
    msam_residual: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("depth, base_channels and channel counts must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.variant == "uamsa":
            for c in self.channels[:-1]:
                self.msam_config(c)

    @property
    def channels(self) -> list[int]:
        """Encoder widths followed by the bottleneck width."""
        return [self.base_channels * 2**l for l in range(self.depth + 1)]

    def msam_config(self, channels: int) -> Optional[M.MsamConfig]:
        if self.variant != "uamsa":
            return None
        return M.MsamConfig(channels, self.msam_reduction, self.msam_pool_divisor, self.msam_share_weights)

    def check_input(self, h: int, w: int) -> None:
        f = 2**self.depth
        if h % f or w % f or h < f or w < f:
            raise GeometryError(f"input {h}x{w} is not divisible by 2**depth = {f}")

    def canonical_text(self) -> str:
        fields = (
            "in_channels", "out_channels", "depth", "base_channels", "dropout_p",
            "variant", "msam_reduction", "msam_pool_divisor", "msam_share_weights", "msam_residual",
        )
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in fields)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            kw[key.strip()] = val.strip()
        types = {f: type(getattr(cls(), f)) for f in cls.__dataclass_fields__}
        out = {}
        for key, val in kw.items():
            if key not in types:
                raise ParameterError(f"unknown ModelSpec field {key!r}")
            typ = types[key]
            out[key] = (val == "true") if typ is bool else typ(val)
        return cls(**out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    mode: str = "deterministic"

    def set_mode(self, mode: str) -> "Model":
        if mode not in MODES:
            raise ParameterError(f"unknown mode {mode!r}")
        self.mode = mode
        return self

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()}, self.mode)

    def copy(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.params.items()}, self.mode)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _conv_shapes(prefix: str, cin: int, cout: int, k: int) -> dict:
    return {f"{prefix}.weight": (cout, cin, k, k), f"{prefix}.bias": (cout,)}


def param_schema(spec: ModelSpec) -> dict[str, tuple]:
    """Ordered parameter names and shapes, a pure function of ``spec``."""
    ch = spec.channels
    shapes: dict[str, tuple] = {}
    cin = spec.in_channels
    for l in range(spec.depth):
        shapes.update(_conv_shapes(f"enc{l}.conv1", cin, ch[l], 3))
        shapes.update(_conv_shapes(f"enc{l}.conv2", ch[l], ch[l], 3))
        cfg = spec.msam_config(ch[l])
        if cfg is not None:
            shapes.update({f"enc{l}.msam.{k}": v for k, v in M.param_shapes(cfg).items()})
        cin = ch[l]
    shapes.update(_conv_shapes("bottleneck.conv1", ch[-2], ch[-1], 3))
    shapes.update(_conv_shapes("bottleneck.conv2", ch[-1], ch[-1], 3))
    for l in reversed(range(spec.depth)):
        shapes.update(_conv_shapes(f"dec{l}.up", ch[l + 1], ch[l], 3))
        shapes.update(_conv_shapes(f"dec{l}.conv1", 2 * ch[l], ch[l], 3))
        shapes.update(_conv_shapes(f"dec{l}.conv2", ch[l], ch[l], 3))
    shapes.update(_conv_shapes("head", ch[0], spec.out_channels, 1))
    return shapes


def build(spec: ModelSpec, rng: Rng, dtype=np.float32) -> Model:
    """Fan-in uniform init (bound sqrt(6/fan_in)), zero biases.

    With residual MSAM the fusion weights start at zero, so every attention
    block is the identity at step 0 (the usual non-local block init).
    """
    gen = as_generator(rng)
    params = {}
    for name, shape in param_schema(spec).items():
        if name.endswith(".bias") or (spec.msam_residual and name.endswith("msam.fuse.weight")):
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / int(np.prod(shape[1:])))
            arr = gen.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return Model(spec, params)


def conv_block(x: Tensor, params: dict, prefix: str, dropout_p: float, active_dropout: bool, rng=None) -> Tensor:
    """(3x3 conv, pad 1 -> ReLU -> dropout) twice."""
    for i in (1, 2):
        x = T.conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], padding=1)
        x = T.relu(x)
        x = T.dropout(x, dropout_p, active_dropout, rng)
    return x


def forward(model: Model, x: Tensor, rng=None, inspect: Optional[dict] = None) -> Tensor:
    """Logits of shape B*out_channels*H*W.  Dropout is live in train/mc mode."""
    spec, p = model.spec, model.params
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ParameterError(f"expected B*{spec.in_channels}*H*W input, got {x.shape}")
    spec.check_input(*x.shape[2:])
    active = model.mode in ("train", "mc") and spec.dropout_p > 0
    gen = as_generator(rng) if active else None
    ch = spec.channels
    skips = []
    h = x
    for l in range(spec.depth):
        h = conv_block(h, p, f"enc{l}", spec.dropout_p, active, gen)
        cfg = spec.msam_config(ch[l])
        if cfg is not None:
            sub = {} if inspect is not None else None
            att = M.msam_forward(h, M.params_from_flat(p, f"enc{l}.msam.", cfg), cfg, sub)
            h = T.add(h, att) if spec.msam_residual else att
            if inspect is not None:
                inspect[f"enc{l}.msam"] = sub
        skips.append(h)
        h = T.adaptive_avg_pool2d(h, h.shape[2] // 2, h.shape[3] // 2)
    h = conv_block(h, p, "bottleneck", spec.dropout_p, active, gen)
    for l in reversed(range(spec.depth)):
        skip = skips[l]
        h = T.upsample(h, skip.shape[2], skip.shape[3], mode="nearest")
        h = T.conv2d(h, p[f"dec{l}.up.weight"], p[f"dec{l}.up.bias"], padding=1)
        h = T.concat([skip, h], axis=1)
        h = conv_block(h, p, f"dec{l}", spec.dropout_p, active, gen)
    return T.conv2d(h, p["head.weight"], p["head.bias"])


# ------------------------------------------------------------------ FLOPs


def _conv_flops(cin, cout, k, h, w):
    return 2 * cout * cin * k * k * h * w


def _attention_flops(c, cr, h, w, pool_divisor):
    hp, wp = max(1, h // pool_divisor), max(1, w // pool_divisor)
    n = hp * wp
    f = 2 * _conv_flops(c, cr, 1, h, w) + _conv_flops(c, c, 1, h, w)
    f += (2 * cr + c) * n  # pooling Q, K, V
    f += 2 * n * n * cr + n * n  # logits + scaling
    f += n * n  # softmax
    f += 2 * n * n * c  # V A
    f += c * h * w  # bilinear upsample
    return f


def count_params_flops(spec: ModelSpec, h: int, w: int) -> dict:
    """Analytic parameter count and per-image FLOPs (see docs/flops.md)."""
    spec.check_input(h, w)
    params = sum(int(np.prod(s)) for s in param_schema(spec).values())
    ch = spec.channels
    flops = 0
    cin = spec.in_channels

    def block(ci, co, hh, ww):
        # two convs, each followed by ReLU and dropout
        return _conv_flops(ci, co, 3, hh, ww) + _conv_flops(co, co, 3, hh, ww) + 4 * co * hh * ww

    hh, ww = h, w
    sizes = []
    for l in range(spec.depth):
        flops += block(cin, ch[l], hh, ww)
        cfg = spec.msam_config(ch[l])
        if cfg is not None:
            hd, wd = -(-hh // 2), -(-ww // 2)
            flops += _attention_flops(ch[l], cfg.reduced, hh, ww, cfg.pool_divisor)
            flops += ch[l] * hd * wd  # 2x pooling for the coarse branch
            flops += _attention_flops(ch[l], cfg.reduced, hd, wd, cfg.pool_divisor)
            flops += ch[l] * hh * ww  # upsample coarse branch
            flops += _conv_flops(2 * ch[l], ch[l], 1, hh, ww)  # fusion
            if spec.msam_residual:
                flops += ch[l] * hh * ww  # residual add
        sizes.append((hh, ww))
        hh, ww = hh // 2, ww // 2
        flops += ch[l] * hh * ww  # 2x2 average pooling
        cin = ch[l]
    flops += block(ch[-2], ch[-1], hh, ww)
    for l in reversed(range(spec.depth)):
        hh, ww = sizes[l]
        flops += ch[l + 1] * hh * ww  # nearest upsample
        flops += _conv_flops(ch[l + 1], ch[l], 3, hh, ww)
        flops += block(2 * ch[l], ch[l], hh, ww)
    flops += _conv_flops(ch[0], spec.out_channels, 1, h, w)
    return {"params": params, "flops": flops}


def conv_only_flops(spec: ModelSpec, h: int, w: int) -> int:
    """Sum of convolution terms alone (used for the resolution scaling check)."""
    spec.check_input(h, w)
    ch = spec.channels
    total, cin, hh, ww = 0, spec.in_channels, h, w
    sizes = []
    for l in range(spec.depth):
        total += _conv_flops(cin, ch[l], 3, hh, ww) + _conv_flops(ch[l], ch[l], 3, hh, ww)
        sizes.append((hh, ww))
        hh, ww, cin = hh // 2, ww // 2, ch[l]
    total += _conv_flops(ch[-2], ch[-1], 3, hh, ww) + _conv_flops(ch[-1], ch[-1], 3, hh, ww)
    for l in reversed(range(spec.depth)):
        hh, ww = sizes[l]
        total += _conv_flops(ch[l + 1], ch[l], 3, hh, ww)
        total += _conv_flops(2 * ch[l], ch[l], 3, hh, ww) + _conv_flops(ch[l], ch[l], 3, hh, ww)
    return total + _conv_flops(ch[0], spec.out_channels, 1, h, w)
