import struct

import numpy as np
import pytest

from uamsa import data as D
from uamsa.errors import FormatError, ParameterError, SchemaError
from uamsa.metrics import MetricRecord
from uamsa.model import ModelSpec, build
from uamsa.rng import Rng


# -------------------------------------------------------------------- PGM


def test_pgm_binary_mask_round_trip(tmp_path, rng):
    for i in range(100):
        h, w = rng.integers(1, 20, size=2)
        m = (rng.random((h, w)) > 0.5).astype(np.float32)
        D.write_pgm(tmp_path / "m.pgm", m)
        assert np.array_equal(D.read_pgm(tmp_path / "m.pgm"), m)


def test_pgm_rounding_and_header(tmp_path):
    D.write_pgm(tmp_path / "a.pgm", np.array([[0.0, 0.5, 1.0]]))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw == b"P5\n3 1\n255\n" + bytes([0, 128, 255])


def test_pgm_reader_accepts_comments_and_16_bit(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert D.read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]
    (tmp_path / "d.pgm").write_bytes(b"P5 1 1 65535\n" + struct.pack(">H", 65535))
    assert D.read_pgm(tmp_path / "d.pgm").tolist() == [[1.0]]


def test_pgm_rejects_bad_files(tmp_path):
    (tmp_path / "ascii.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        D.read_pgm(tmp_path / "ascii.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(FormatError, match="truncated"):
        D.read_pgm(tmp_path / "short.pgm")
    with pytest.raises(ParameterError):
        D.write_pgm(tmp_path / "x.pgm", np.array([[1.5]]))


# -------------------------------------------------------------- float map


def test_floatmap_round_trip(tmp_path, rng):
    for _ in range(100):
        h, w = rng.integers(1, 16, size=2)
        a = (rng.standard_normal((h, w)) * 10.0 ** rng.integers(-6, 6)).astype(np.float32)
        D.write_floatmap(tmp_path / "f.uamf", a)
        b = D.read_floatmap(tmp_path / "f.uamf")
        assert b.dtype == np.float32 and b.tobytes() == a.tobytes()


def test_floatmap_layout(tmp_path):
    D.write_floatmap(tmp_path / "f.uamf", np.array([[1.0, 2.0]]))
    raw = (tmp_path / "f.uamf").read_bytes()
    assert raw[:14] == b"UAMF" + struct.pack("<HII", 1, 1, 2)
    assert len(raw) == 14 + 8


def test_floatmap_rejects_bad_files(tmp_path):
    D.write_floatmap(tmp_path / "f.uamf", np.zeros((3, 3)))
    raw = (tmp_path / "f.uamf").read_bytes()
    for name, blob in (("trunc", raw[:-1]), ("head", raw[:10]), ("magic", b"XXXX" + raw[4:])):
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError):
            D.read_floatmap(tmp_path / name)
    with pytest.raises(ParameterError):
        D.write_floatmap(tmp_path / "n.uamf", np.array([[np.inf]]))


# -------------------------------------------------------------- checkpoint


TINY = ModelSpec(depth=1, base_channels=2)


def test_checkpoint_round_trip(tmp_path):
    for seed in range(100):
        spec = ModelSpec(depth=1 + seed % 2, base_channels=2, variant=("uamsa", "plain_unet")[seed % 3 == 0])
        model = build(spec, Rng(seed))
        gen = np.random.default_rng(seed)
        for t in model.params.values():
            t.data = gen.standard_normal(t.shape).astype(np.float32)
        D.save_checkpoint(tmp_path / "a.ckpt", model)
        back = D.load_checkpoint(tmp_path / "a.ckpt")
        assert back.spec == spec and list(back.params) == list(model.params)
        assert all(back.params[k].data.tobytes() == model.params[k].data.tobytes() for k in model.params)
        D.save_checkpoint(tmp_path / "b.ckpt", back)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_size_formula(tmp_path):
    for spec in (TINY, ModelSpec(), ModelSpec(variant="plain_unet")):
        D.save_checkpoint(tmp_path / "c.ckpt", build(spec, Rng(0)))
        assert (tmp_path / "c.ckpt").stat().st_size == D.checkpoint_size(spec)


def test_checkpoint_schema_mismatch(tmp_path):
    D.save_checkpoint(tmp_path / "c.ckpt", build(TINY, Rng(0)))
    with pytest.raises(SchemaError) as exc:
        D.load_checkpoint(tmp_path / "c.ckpt", spec=ModelSpec(depth=1, base_channels=2, variant="plain_unet"))
    assert exc.value.unexpected and not exc.value.missing


def test_checkpoint_rejects_corruption(tmp_path):
    D.save_checkpoint(tmp_path / "c.ckpt", build(TINY, Rng(0)))
    raw = (tmp_path / "c.ckpt").read_bytes()
    for name, blob in (("trunc", raw[:-2]), ("extra", raw + b"\0"), ("magic", b"NOPE" + raw[4:])):
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError):
            D.load_checkpoint(tmp_path / name)


# -------------------------------------------------------------- import


def test_import_pairs_skips_and_resizes(tmp_path):
    recs = D.generate_synthetic(D.SynthConfig(count=3, size=32, seed=1))
    D.write_dataset(tmp_path, recs)
    D.write_pgm(tmp_path / "lonely_img.pgm", np.zeros((32, 32)))
    D.write_pgm(tmp_path / "odd_img.pgm", np.zeros((32, 32)))
    D.write_pgm(tmp_path / "odd_mask.pgm", np.zeros((16, 16)))
    report = D.import_slices(tmp_path, size=64)
    assert [r.id for r in report.records] == [r.id for r in recs]
    assert sorted(f for f, _ in report.skipped) == ["lonely_img.pgm", "odd_img.pgm"]
    for r in report.records:
        assert r.image.shape == (1, 64, 64)
        assert set(np.unique(r.mask)) <= {0.0, 1.0}
        assert 0 <= r.image.min() and r.image.max() <= 1


def test_import_empty_dir_fails(tmp_path):
    with pytest.raises(FormatError):
        D.import_slices(tmp_path)


def test_resize_identity_and_nearest():
    a = np.arange(16, dtype=np.float32).reshape(4, 4)
    assert np.array_equal(D.resize(a, 4, 4, "bilinear"), a)
    up = D.resize(a, 8, 8, "nearest")
    assert np.array_equal(up[::2, ::2], a)
    np.testing.assert_allclose(D.resize(np.full((5, 7), 0.3), 9, 3, "bilinear"), 0.3, atol=1e-6)


# ------------------------------------------------------------- synthetic


def test_synthetic_is_deterministic_and_binary():
    cfg = D.SynthConfig(count=5, size=32, seed=7)
    a, b = D.generate_synthetic(cfg), D.generate_synthetic(cfg)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))
    assert all(set(np.unique(r.mask)) <= {0.0, 1.0} and r.mask.any() for r in a)
    # sample i does not depend on how many samples were requested
    fewer = D.generate_synthetic(D.SynthConfig(count=2, size=32, seed=7))
    assert fewer[1].image.tobytes() == a[1].image.tobytes()
    other = D.generate_synthetic(D.SynthConfig(count=1, size=32, seed=8))
    assert other[0].image.tobytes() != a[0].image.tobytes()


def test_clean_image_aligns_with_mask():
    """Without noise, texture or edge blur the image is the two-level mask."""
    cfg = D.SynthConfig(count=4, size=32, seed=3, fuzz=0.0, noise=0.0, texture=0.0)
    bg, fg = D.CONTRAST["SYNTH"]
    for r in D.generate_synthetic(cfg):
        expected = np.where(r.mask > 0.5, fg, bg).astype(np.float32)
        assert np.array_equal(r.image, expected)


def test_synth_config_validation():
    with pytest.raises(ParameterError):
        D.SynthConfig(blob_min=3, blob_max=1)
    with pytest.raises(ParameterError):
        D.SynthConfig(modality="CT")
    with pytest.raises(ParameterError):
        D.SampleRecord("x", np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


# -------------------------------------------------------------------- CSV


def test_metrics_csv_round_trip(tmp_path, rng):
    rows = [MetricRecord(f"s{i}", *rng.random(5)) for i in range(7)]
    D.write_metrics_csv(tmp_path / "m.csv", rows)
    assert D.read_metrics_csv(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(D.METRIC_COLUMNS)
