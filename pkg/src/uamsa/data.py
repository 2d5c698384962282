"""Synthetic dataset, slice import and the on-disk formats.

Formats
-------
PGM: binary P5, maxval 255; writing rounds ``v*255`` half-up.
Float map: ``b"UAMF"``, u16 version (1), u32 H, u32 W, then H*W float32, all
little-endian, row-major.
Checkpoint: ``b"UAMS"``, u16 version (1), u32 byte length + UTF-8 canonical
ModelSpec text, u32 tensor count, then per tensor: u16 name length + UTF-8
name, u8 rank, u32 per dim, float32 payload.  Little-endian throughout.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError, SchemaError
from .metrics import MetricRecord
from .model import Model, ModelSpec, param_schema
from .rng import Rng
from .tensor import Tensor, interp_matrix

log = logging.getLogger(__name__)

MODALITIES = ("T1C", "T2FLAIR", "T2W", "SYNTH")
FLOATMAP_MAGIC = b"UAMF"
CHECKPOINT_MAGIC = b"UAMS"
FORMAT_VERSION = 1


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # 1*H*W float32 in [0, 1]
    mask: np.ndarray  # 1*H*W float32 in {0, 1}
    modality: str = "SYNTH"

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ParameterError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if self.modality not in MODALITIES:
            raise ParameterError(f"{self.id}: unknown modality {self.modality!r}")


# Background / foreground intensities for the pseudo-modalities.
CONTRAST = {
    "SYNTH": (0.25, 0.8),
    "T1C": (0.3, 0.85),
    "T2FLAIR": (0.2, 0.75),
    "T2W": (0.35, 0.9),
}


@dataclass(frozen=True)
class SynthConfig:
    count: int = 250
    size: int = 64
    blob_min: int = 1
    blob_max: int = 3
    radius_min: float = 0.08
    radius_max: float = 0.2
    fuzz: float = 1.5
    noise: float = 0.08
    texture: float = 0.05
    modality: str = "SYNTH"
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.size < 1:
            raise ParameterError("count must be >= 0 and size >= 1")
        if not 1 <= self.blob_min <= self.blob_max:
            raise ParameterError("need 1 <= blob_min <= blob_max")
        if not 0 < self.radius_min <= self.radius_max:
            raise ParameterError("need 0 < radius_min <= radius_max")
        if self.fuzz < 0 or self.noise < 0 or self.texture < 0:
            raise ParameterError("fuzz, noise and texture must be >= 0")
        if self.modality not in CONTRAST:
            raise ParameterError(f"unknown modality {self.modality!r}")


def soft_field(cfg: SynthConfig, gen: np.random.Generator) -> np.ndarray:
    """Union (pointwise max) of random ellipses with a logistic edge of width ``fuzz`` px."""
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    field = np.zeros((n, n))
    for _ in range(int(gen.integers(cfg.blob_min, cfg.blob_max + 1))):
        ra, rb = gen.uniform(cfg.radius_min, cfg.radius_max, size=2) * n
        cy, cx = gen.uniform(0.2 * n, 0.8 * n, size=2)
        theta = gen.uniform(0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        # signed distance proxy in pixels: positive inside
        r = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
        dist = (1.0 - r) * math.sqrt(ra * rb)
        if cfg.fuzz == 0:
            blob = (dist >= 0).astype(np.float64)
        else:
            blob = 0.5 * (1.0 + np.tanh(dist / (2.0 * cfg.fuzz)))
        field = np.maximum(field, blob)
    return field


def _texture(n: int, amplitude: float, gen: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / n
    tex = np.zeros((n, n))
    for _ in range(3):
        fy, fx = gen.uniform(0.5, 3.0, size=2)
        phase = gen.uniform(0, 2 * math.pi)
        tex += np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    return amplitude * tex / 3.0


def generate_synthetic(cfg: SynthConfig) -> list[SampleRecord]:
    """Deterministic fuzzy-blob dataset; sample ``i`` uses stream ``i`` of ``cfg.seed``."""
    bg, fg = CONTRAST[cfg.modality]
    out = []
    for i in range(cfg.count):
        gen = Rng(cfg.seed, i).generator()
        field = soft_field(cfg, gen)
        mask = (field >= 0.5).astype(np.float32)
        image = bg + (fg - bg) * field + _texture(cfg.size, cfg.texture, gen)
        if cfg.noise > 0:
            image = image + gen.normal(0.0, cfg.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        out.append(SampleRecord(f"synth_{i:05d}", image[None], mask[None], cfg.modality))
    return out


# --------------------------------------------------------------------- PGM


def write_pgm(path, image) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ParameterError(f"PGM needs a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ParameterError("PGM values must lie in [0, 1]")
    h, w = arr.shape
    data = np.floor(arr * 255 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into an H*W float32 array scaled by 1/maxval."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})", 0)
    pos = 2
    vals = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(f"{path}: malformed PGM header", pos)
        vals.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = vals
    if not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval", pos)
    pos += 1
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM geometry {w}x{h} maxval {maxval}", pos)
    depth = 1 if maxval < 256 else 2
    need = w * h * depth
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated payload, need {need} bytes, have {len(raw) - pos}", len(raw))
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return (data.astype(np.float64) / maxval).astype(np.float32)


# --------------------------------------------------------------- float map


def write_floatmap(path, arr) -> None:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 2:
        raise ParameterError(f"float map must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError("float map values must be finite")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(FLOATMAP_MAGIC + struct.pack("<HII", FORMAT_VERSION, h, w))
        f.write(a.astype("<f4").tobytes())


def read_floatmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise FormatError(f"{path}: header truncated", len(raw))
    if raw[:4] != FLOATMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", 0)
    version, h, w = struct.unpack_from("<HII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if len(raw) != 14 + 4 * h * w:
        raise FormatError(f"{path}: payload is {len(raw) - 14} bytes, expected {4 * h * w}", 14)
    return np.frombuffer(raw, dtype="<f4", offset=14).reshape(h, w).astype(np.float32)


# -------------------------------------------------------------- checkpoint


def checkpoint_bytes(model: Model) -> bytes:
    spec_text = model.spec.canonical_text().encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(spec_text)) + spec_text)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        if not np.all(np.isfinite(t.data)):
            raise ParameterError(f"parameter {name} is not finite")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.data.astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: Model) -> None:
    data = checkpoint_bytes(model)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def checkpoint_size(spec: ModelSpec) -> int:
    """Byte length of a checkpoint for ``spec`` (format arithmetic only)."""
    size = 4 + 2 + 4 + len(spec.canonical_text().encode("utf-8")) + 4
    for name, shape in param_schema(spec).items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))
    return size


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> Model:
    """Load a checkpoint; if ``spec`` is given the stored names must match its schema."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint, wanted {n} bytes", pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic", 0)
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    (spec_len,) = struct.unpack("<I", take(4))
    try:
        stored_spec = ModelSpec.from_text(take(spec_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable spec block ({exc})", 10) from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: non-finite values in {name}", pos)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes", pos)
    target = spec if spec is not None else stored_spec
    schema = param_schema(target)
    missing = set(schema) - set(params)
    unexpected = set(params) - set(schema)
    if missing or unexpected:
        raise SchemaError(missing, unexpected)
    for name, shape in schema.items():
        if params[name].shape != tuple(shape):
            raise FormatError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return Model(target, {name: params[name] for name in schema})


# -------------------------------------------------------------- import


def resize(arr: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Separable resize of an H*W array (bilinear, align-corners false, or nearest)."""
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.astype(np.float32)
    mh = interp_matrix(h, out_h, mode)
    mw = interp_matrix(w, out_w, mode)
    return (mh @ arr.astype(np.float64) @ mw.T).astype(np.float32)


@dataclass
class ImportReport:
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (filename, reason)


def import_slices(directory, size: Optional[int] = None, modality: str = "SYNTH") -> ImportReport:
    """Pair ``<id>_img.pgm`` with ``<id>_mask.pgm``; optionally resize to ``size``."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    imgs, masks = {}, {}
    for p in sorted(d.iterdir()):
        if p.name.endswith("_img.pgm"):
            imgs[p.name[: -len("_img.pgm")]] = p
        elif p.name.endswith("_mask.pgm"):
            masks[p.name[: -len("_mask.pgm")]] = p
    report = ImportReport()
    for sid in sorted(set(imgs) ^ set(masks)):
        f = imgs.get(sid) or masks.get(sid)
        report.skipped.append((f.name, "unpaired"))
        log.warning("skipping unpaired file %s", f.name)
    for sid in sorted(set(imgs) & set(masks)):
        try:
            img = read_pgm(imgs[sid])
            msk = read_pgm(masks[sid])
        except FormatError as exc:
            report.skipped.append((imgs[sid].name, str(exc)))
            log.warning("skipping %s: %s", sid, exc)
            continue
        if img.shape != msk.shape:
            report.skipped.append((imgs[sid].name, f"size mismatch {img.shape} vs {msk.shape}"))
            log.warning("skipping %s: image %s vs mask %s", sid, img.shape, msk.shape)
            continue
        msk = (msk >= 0.5).astype(np.float32)
        if size is not None:
            img = np.clip(resize(img, size, size, "bilinear"), 0, 1)
            msk = resize(msk, size, size, "nearest")
        report.records.append(SampleRecord(sid, img[None], msk[None], modality))
    if not report.records:
        raise FormatError(f"{d}: no usable image/mask pairs")
    return report


def write_dataset(directory, records) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for r in records:
        write_pgm(d / f"{r.id}_img.pgm", r.image[0])
        write_pgm(d / f"{r.id}_mask.pgm", r.mask[0])


# -------------------------------------------------------------------- CSV

METRIC_COLUMNS = ("sample_id", "dice", "iou_fg", "iou_bg", "miou", "mean_uncertainty")


def write_metrics_csv(path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.sample_id] + [repr(float(getattr(r, c))) for c in METRIC_COLUMNS[1:]])


def read_metrics_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [MetricRecord(r["sample_id"], *(float(r[c]) for c in METRIC_COLUMNS[1:])) for r in rows]
