"""MC-dropout prediction and the variance-penalized BCE objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .model import Model, forward
from .rng import Rng
from .tensor import Tensor

LAMBDA_PRESETS = {"T1C": 0.12, "T2FLAIR": 0.191, "T2W": 0.191}


@dataclass
class McPrediction:
    mean: np.ndarray
    variance: np.ndarray
    passes: int
    samples: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LossConfig:
    lambda_u: float = 0.12
    t_passes: int = 20
    eps: float = 1e-7
    bce_on: str = "mean"  # or "per_pass"

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ParameterError(f"lambda_u must be >= 0, got {self.lambda_u}")
        if self.t_passes < 1:
            raise ParameterError(f"t_passes must be >= 1, got {self.t_passes}")
        if self.bce_on not in ("mean", "per_pass"):
            raise ParameterError(f"bce_on must be 'mean' or 'per_pass', got {self.bce_on!r}")

    @classmethod
    def for_modality(cls, modality: str, **kw) -> "LossConfig":
        return cls(lambda_u=LAMBDA_PRESETS[modality], **kw)


def mc_moments(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and population variance over the leading (pass) axis."""
    s = np.asarray(samples, dtype=np.float64)
    # shifted by the first pass, so identical passes give exactly s[0] and 0
    d = s - s[0]
    dm = d.mean(axis=0)
    var = ((d - dm) ** 2).mean(axis=0)
    return s[0] + dm, var


def mc_predict(
    model: Model,
    x: Tensor,
    T_passes: int,
    rng: Rng,
    keep_samples: bool = False,
    sampler: Optional[Callable[[Tensor, int], np.ndarray]] = None,
) -> McPrediction:
    """Average ``T_passes`` sigmoid outputs with live dropout.

    Pass ``t`` draws its masks from ``rng.child(t)``.  ``sampler(x, t)`` may
    replace the network to inject known per-pass probabilities.
    """
    if T_passes < 1:
        raise ParameterError(f"need at least one pass, got {T_passes}")
    if sampler is None:
        prev = model.mode
        model.set_mode("mc")
        try:
            samples = [T.sigmoid(forward(model, x, rng.child(t))).data for t in range(T_passes)]
        finally:
            model.set_mode(prev)
    else:
        samples = [np.asarray(sampler(x, t)) for t in range(T_passes)]
    stack = np.stack(samples)
    mu, var = mc_moments(stack)
    dtype = stack.dtype if stack.dtype.kind == "f" else np.float32
    return McPrediction(
        mu.astype(dtype), var.astype(dtype), T_passes, stack if keep_samples else None
    )


def bce(prob: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to ``[eps, 1-eps]``."""
    _check_target(prob, target)
    p = T.clamp(prob, eps, 1.0 - eps)
    t = target.data.astype(prob.dtype)
    pos = T.mul(T.log(p), t)
    neg = T.mul(T.log(T.sub(1.0, p)), 1 - t)
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Fused form ``max(z, 0) - z*t + log(1 + exp(-|z|))``."""
    _check_target(logits, target)
    z = logits.data
    t = target.data.astype(z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(per.mean(dtype=np.float64), dtype=z.dtype)
    n = z.size

    def _bw(g):
        s = np.where(z >= 0, 1 / (1 + np.exp(-z)), np.exp(z) / (1 + np.exp(z)))
        return (g * (s - t) / n,)

    return T._make(value, (logits,), _bw)


def _check_target(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if T._DEBUG and not np.all((target.data == 0) | (target.data == 1)):
        raise ParameterError("target must be binary")


@dataclass
class LossParts:
    total: Tensor
    bce_part: Tensor
    var_part: Tensor


def smoothing_loss(sample_probs: Tensor, target: Tensor, cfg: LossConfig) -> LossParts:
    """BCE on the MC mean plus ``lambda_u`` times the mean per-pixel variance.

    ``sample_probs`` is the stack of per-pass probabilities (T*B*1*H*W); the
    mean and variance are built on the tape so gradients reach every pass.
    """
    if sample_probs.ndim < 1 or sample_probs.shape[0] == 0:
        raise ShapeError("empty sample stack")
    if sample_probs.shape[0] != cfg.t_passes:
        raise ShapeError(f"stack has {sample_probs.shape[0]} passes, config expects {cfg.t_passes}")
    if sample_probs.shape[1:] != target.shape:
        raise ShapeError(f"sample shape {sample_probs.shape[1:]} != target shape {target.shape}")
    # moments taken relative to the (constant) first pass: same values and
    # gradients as the plain form, but exact when all passes agree
    shift = Tensor(sample_probs.data[:1], dtype=sample_probs.dtype)
    d = T.sub(sample_probs, shift)
    d_mean = T.mean(d, axis=0, keepdims=True)
    u = T.mean(T.square(T.sub(d, d_mean)), axis=0)
    p_mean = T.add(d_mean, shift)
    var_part = T.mean(u)
    if cfg.bce_on == "mean":
        bce_part = bce(T.reshape(p_mean, target.shape), target, cfg.eps)
    else:
        tt = Tensor(np.broadcast_to(target.data, sample_probs.shape), dtype=target.dtype)
        bce_part = bce(sample_probs, tt, cfg.eps)
    total = T.add(bce_part, T.mul(var_part, cfg.lambda_u))
    return LossParts(total, bce_part, var_part)
