import numpy as np
import pytest
from scipy.stats import chisquare

from splatperc.errors import (
    TruncatedPayloadError,
    UnreadableFileError,
    UnsupportedFormatError,
)
from splatperc.image_io import (
    CropSpec,
    ImageBuffer,
    load_image,
    psnr,
    sample_crop,
    save_image,
)


def test_load_p6_single_pixel(tmp_path):
    path = tmp_path / "one.ppm"
    path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    img = load_image(path)
    assert img.data.shape == (1, 1, 3)
    assert np.array_equal(img.data[0, 0], [1.0, 0.0, 0.0])


def test_load_p5_zeros(tmp_path):
    path = tmp_path / "z.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    img = load_image(path)
    assert img.data.shape == (2, 2, 1)
    assert np.all(img.data == 0.0)


def test_pnm_comment_header(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n255\n" + bytes([10, 20]))
    img = load_image(path)
    assert img.data.shape == (1, 2, 1)


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_roundtrip_lossless_8bit(tmp_path, suffix):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, (13, 17, 3), dtype=np.uint8)
    img = ImageBuffer(raw.astype(np.float64) / 255.0)
    p1 = tmp_path / f"a{suffix}"
    p2 = tmp_path / f"b{suffix}"
    save_image(img, p1)
    save_image(load_image(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_gray_png(tmp_path):
    rng = np.random.default_rng(1)
    raw = rng.integers(0, 256, (9, 7, 1), dtype=np.uint8)
    img = ImageBuffer(raw.astype(np.float64) / 255.0)
    path = tmp_path / "g.png"
    save_image(img, path)
    back = load_image(path)
    assert np.array_equal(back.data, raw / 255.0)


def test_quantization_half_up(tmp_path):
    img = ImageBuffer(np.array([[[0.5, 1.0, 0.0]]]))
    path = tmp_path / "q.ppm"
    save_image(img, path)
    assert path.read_bytes()[-3:] == bytes([128, 255, 0])


def test_save_load_quantization_bound(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.uniform(0, 1, (8, 8, 3))
    path = tmp_path / "r.png"
    save_image(ImageBuffer(data), path)
    back = load_image(path)
    assert np.abs(back.data - data).max() <= 1.0 / 510.0 + 1e-12


def test_sixteen_bit_pnm(tmp_path):
    path = tmp_path / "w.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n" + (32768).to_bytes(2, "big"))
    img = load_image(path)
    assert abs(img.data[0, 0, 0] - 32768 / 65535) < 1e-12


def test_load_errors(tmp_path):
    with pytest.raises(UnreadableFileError):
        load_image(tmp_path / "missing.png")
    bad = tmp_path / "bad.dat"
    bad.write_bytes(b"GIF89a....")
    with pytest.raises(UnsupportedFormatError):
        load_image(bad)
    trunc = tmp_path / "t.ppm"
    trunc.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(TruncatedPayloadError):
        load_image(trunc)
    tp = tmp_path / "t.png"
    full = tmp_path / "f.png"
    save_image(ImageBuffer(np.zeros((4, 4, 3))), full)
    tp.write_bytes(full.read_bytes()[:40])
    with pytest.raises(TruncatedPayloadError):
        load_image(tp)


def test_interlaced_png_rejected(tmp_path):
    import struct
    import zlib

    ihdr = struct.pack(">IIBBBBB", 2, 2, 8, 2, 0, 0, 1)

    def chunk(tag, body):
        return (struct.pack(">I", len(body)) + tag + body
                + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF))

    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(bytes(20))) + chunk(b"IEND", b""))
    p = tmp_path / "i.png"
    p.write_bytes(blob)
    with pytest.raises(UnsupportedFormatError):
        load_image(p)


def test_crop_unique_placement():
    img = ImageBuffer(np.zeros((10, 10, 3)))
    spec = sample_crop(img, seed=1, side=10)
    assert (spec.origin_x, spec.origin_y) == (0, 0)


def test_crop_deterministic():
    img = ImageBuffer(np.zeros((40, 50, 3)))
    a = sample_crop(img, seed=7, side=16)
    b = sample_crop(img, seed=7, side=16)
    assert a == b


def test_crop_side_too_large():
    img = ImageBuffer(np.zeros((10, 10, 3)))
    with pytest.raises(ValueError):
        sample_crop(img, seed=0, side=11)


def test_crop_origin_uniformity():
    img = ImageBuffer(np.zeros((100, 100, 3)))
    xs = np.zeros(51, dtype=int)
    ys = np.zeros(51, dtype=int)
    for seed in range(10_000):
        spec = sample_crop(img, seed=seed, side=50)
        xs[spec.origin_x] += 1
        ys[spec.origin_y] += 1
    assert chisquare(xs).pvalue > 0.01
    assert chisquare(ys).pvalue > 0.01


def test_crop_never_out_of_bounds():
    rng = np.random.default_rng(3)
    for _ in range(200):
        h, w = int(rng.integers(4, 60)), int(rng.integers(4, 60))
        side = int(rng.integers(1, min(h, w) + 1))
        img = ImageBuffer(rng.uniform(0, 1, (h, w, 3)))
        spec = sample_crop(img, seed=int(rng.integers(1 << 31)), side=side)
        tile = spec.apply(img)
        assert tile.data.shape == (side, side, 3)


def test_crop_flip_applies():
    data = np.arange(12, dtype=float).reshape(2, 2, 3) / 12.0
    img = ImageBuffer(data)
    spec = CropSpec(0, 0, 2, flip_horizontal=True)
    out = spec.apply(img)
    assert np.array_equal(out.data, data[:, ::-1])


def test_psnr_identical_is_inf():
    a = ImageBuffer(np.random.default_rng(0).uniform(0, 1, (5, 5, 3)))
    assert psnr(a, a) == np.inf


def test_psnr_constant_offset():
    a = ImageBuffer(np.full((4, 4, 3), 0.4))
    b = ImageBuffer(np.full((4, 4, 3), 0.5))
    assert abs(psnr(a, b) - 20.0) < 1e-12


def test_psnr_matches_accumulation_oracle():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (6, 7, 3))
    b = rng.uniform(0, 1, (6, 7, 3))
    acc = 0.0
    for i in range(6):
        for j in range(7):
            for c in range(3):
                acc += (a[i, j, c] - b[i, j, c]) ** 2
    expected = 10.0 * np.log10(1.0 / (acc / a.size))
    assert abs(psnr(ImageBuffer(a), ImageBuffer(b)) - expected) < 1e-9


def test_psnr_symmetric():
    rng = np.random.default_rng(5)
    a = ImageBuffer(rng.uniform(0, 1, (5, 5, 3)))
    b = ImageBuffer(rng.uniform(0, 1, (5, 5, 3)))
    assert psnr(a, b) == psnr(b, a)
