"""Adam, cosine learning-rate schedule, dataset split and the training loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import SampleRecord, save_checkpoint
from .errors import NumericalError, ParameterError
from .loss import LossConfig, bce, smoothing_loss
from .metrics import binarize, dice, miou
from .model import Model, forward
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("epoch", "lr", "loss_total", "loss_bce", "loss_var", "val_dice", "val_miou", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    t_passes: int = 20
    lambda_u: float = 0.12
    seed: int = 0
    variant: str = "uamsa"
    image_size: int = 240
    desk_profile: bool = False
    loss: Optional[str] = None  # "smoothing" | "bce"; default follows variant
    bce_on: str = "mean"
    grad_clip: float = 0.0
    weight_decay: float = 0.0
    strict: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.t_passes < 1:
            raise ParameterError("epochs, batch_size and t_passes must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ParameterError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.loss not in (None, "smoothing", "bce"):
            raise ParameterError(f"unknown loss {self.loss!r}")

    @property
    def loss_kind(self) -> str:
        if self.loss is not None:
            return self.loss
        return "smoothing" if self.variant == "uamsa" else "bce"

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(epochs=30, batch_size=8, t_passes=5, image_size=64, desk_profile=True)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(epochs=100, batch_size=32, t_passes=20, image_size=240)
        base.update(kw)
        return cls(**base)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` (name -> Tensor) in place."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ParameterError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def split_dataset(samples: Sequence[SampleRecord], ratios=(8, 1, 1), seed: int = 0) -> dict:
    """Deterministic split keyed on sample ids.

    Samples are ordered by a hash of ``(seed, id)``, so the result does not
    depend on input order.  Counts are floor(0.8n), floor(0.1n), remainder
    (for the default 8:1:1).
    """
    if not samples:
        raise ParameterError("cannot split an empty dataset")
    n = len(samples)
    total = sum(ratios)
    n_train = (n * ratios[0]) // total
    n_val = (n * ratios[1]) // total

    def key(s):
        return hashlib.blake2b(f"{seed}:{s.id}".encode(), digest_size=8).digest()

    order = sorted(samples, key=key)
    return {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }


def _stack(records):
    x = np.stack([r.image for r in records]).astype(np.float32)
    y = np.stack([r.mask for r in records]).astype(np.float32)
    return x, y


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rng: Rng):
    """Loss parts for one batch under the active tape.

    For the smoothing loss the ``T`` passes run as one forward over the batch
    repeated ``T`` times; every element draws its own dropout masks, so this
    equals ``T`` independent passes.
    """
    target = Tensor(y, dtype=x.dtype)
    if cfg.loss_kind == "smoothing":
        tp = cfg.t_passes
        xs = Tensor(np.concatenate([x] * tp, axis=0), dtype=x.dtype)
        probs = T.sigmoid(forward(model, xs, rng))
        probs = T.reshape(probs, (tp,) + y.shape)
        lcfg = LossConfig(lambda_u=cfg.lambda_u, t_passes=tp, bce_on=cfg.bce_on)
        parts = smoothing_loss(probs, target, lcfg)
        return parts.total, parts.bce_part, parts.var_part
    probs = T.sigmoid(forward(model, Tensor(x, dtype=x.dtype), rng))
    loss = bce(probs, target)
    return loss, loss, None


def predict_deterministic(model: Model, records, batch_size: int = 16) -> np.ndarray:
    prev = model.mode
    model.set_mode("deterministic")
    try:
        outs = []
        for i in range(0, len(records), batch_size):
            x, _ = _stack(records[i : i + batch_size])
            outs.append(T.sigmoid(forward(model, Tensor(x))).data)
    finally:
        model.set_mode(prev)
    return np.concatenate(outs)


def validate(model: Model, records) -> tuple[float, float]:
    """Mean thresholded Dice and mIoU of the dropout-free prediction."""
    if not records:
        return float("nan"), float("nan")
    probs = predict_deterministic(model, records)
    d, m = [], []
    for p, r in zip(probs, records):
        pred = binarize(p)
        d.append(dice(pred, r.mask))
        m.append(miou(pred, r.mask)["miou"])
    return float(np.mean(d)), float(np.mean(m))


@dataclass
class FitResult:
    model: Model
    final_model: Model
    history: list
    best_epoch: int
    best_val_dice: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def fit(
    model: Model,
    datasets: dict,
    cfg: TrainConfig,
    out_dir=None,
    progress=None,
) -> FitResult:
    """Train ``model`` in place; keep the best-validation-Dice parameters.

    With ``out_dir`` set, appends rows to ``ledger.csv`` and writes
    ``best.ckpt`` whenever validation Dice improves.  In strict mode the
    ``seconds`` column is left empty so the ledger is reproducible byte for
    byte; wall times then go to ``timing.csv``.
    """
    train = list(datasets["train"])
    val = list(datasets.get("val", []))
    if not train:
        raise ParameterError("empty training set")
    if train[0].image.shape[0] != model.spec.in_channels:
        raise ParameterError("sample channels do not match the model")
    model.spec.check_input(*train[0].image.shape[1:])
    out = Path(out_dir) if out_dir is not None else None
    ledger = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ledger = open(out / "ledger.csv", "w", newline="")
        csv.writer(ledger, lineterminator="\n").writerow(LEDGER_COLUMNS)
        if cfg.strict:
            timing = open(out / "timing.csv", "w", newline="")
            csv.writer(timing, lineterminator="\n").writerow(("epoch", "seconds"))
    root = Rng(cfg.seed, 0x7EA1)
    state = AdamState()
    history = []
    best = (-1.0, 0, None)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, cfg)
            ep_rng = root.child(epoch)
            order = ep_rng.child(0).generator().permutation(len(train))
            model.set_mode("train")
            sums = np.zeros(3)
            nb = 0
            for b, start in enumerate(range(0, len(train), cfg.batch_size)):
                batch = [train[i] for i in order[start : start + cfg.batch_size]]
                x, y = _stack(batch)
                model.zero_grad()
                with T.Tape() as tape:
                    total, bpart, vpart = batch_loss(model, x, y, cfg, ep_rng.child(b + 1))
                if not np.isfinite(total.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                T.backward(tape, total)
                grads = {k: p.grad for k, p in model.params.items()}
                _regularize(grads, model, cfg)
                adam_step(model.params, grads, state, lr)
                sums += (total.item(), bpart.item(), 0.0 if vpart is None else vpart.item())
                nb += 1
                if progress is not None:
                    progress(epoch, b, total.item())
            means = sums / nb
            vd, vm = validate(model, val)
            seconds = time.perf_counter() - t0
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss_total": float(means[0]),
                "loss_bce": float(means[1]),
                "loss_var": float(means[2]),
                "val_dice": vd,
                "val_miou": vm,
                "seconds": seconds,
            }
            history.append(row)
            log.info("epoch %d lr %.3g loss %.5f val_dice %.4f (%.1fs)", epoch + 1, lr, means[0], vd, seconds)
            if vd > best[0] or (best[2] is None):
                best = (vd, epoch + 1, {k: p.data.copy() for k, p in model.params.items()})
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model)
            if ledger is not None:
                vals = [row[c] for c in LEDGER_COLUMNS]
                if cfg.strict:
                    vals[-1] = None
                    csv.writer(timing, lineterminator="\n").writerow((epoch + 1, repr(seconds)))
                csv.writer(ledger, lineterminator="\n").writerow([_fmt(v) for v in vals])
                ledger.flush()
    finally:
        if ledger is not None:
            ledger.close()
        if timing is not None:
            timing.close()
    final = model.copy()
    best_model = Model(model.spec, {k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in best[2].items()})
    return FitResult(best_model, final, history, best[1], best[0])


def _regularize(grads: dict, model: Model, cfg: TrainConfig) -> None:
    if cfg.weight_decay:
        for k, g in grads.items():
            if g is not None:
                grads[k] = g + cfg.weight_decay * model.params[k].data
    if cfg.grad_clip:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for k, g in grads.items():
                if g is not None:
                    grads[k] = g * scale
