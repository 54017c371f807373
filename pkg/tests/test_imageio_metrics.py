import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kao import checkpoint
from kao.errors import DataError, DomainError
from kao.imageio import (decode_bytes, dequantize, encode_image, grid_image, quantize, read_image, read_mask,
                         write_image, write_mask)
from kao.metrics import masked_mse, psnr, ssim

from oracles import quantize_byte, ssim_windows


def test_endpoint_payloads():
    data, _ = encode_image(np.full((1, 3, 4), -1.0))
    assert data == b"P5\n4 3\n255\n" + bytes(12)
    data, _ = encode_image(np.full((3, 2, 2), 1.0))
    assert data.startswith(b"P6\n2 2\n255\n") and data[-12:] == b"\xff" * 12


def test_quantizer_oracle(np_rng):
    g = np_rng.uniform(-1.2, 1.2, (1, 16, 16))
    q, clamped = quantize(g)
    assert clamped == int(np.sum(np.abs(g) > 1))
    expected = np.array([quantize_byte(v) for v in g.reshape(-1)], np.uint8).reshape(q.shape)
    assert q.tobytes() == expected.tobytes()
    # 0.0 maps to 127.5 exactly, which rounds up
    assert quantize(np.array([0.0]))[0][0] == 128


def test_file_roundtrip(tmp_path, np_rng):
    for c in (1, 3):
        g = np_rng.uniform(-1, 1, (c, 5, 7)).astype(np.float32)
        write_image(g, tmp_path / "a")
        back = read_image(tmp_path / "a")
        assert back.shape == (c, 5, 7)
        assert quantize(back)[0].tobytes() == quantize(g)[0].tobytes()
        write_image(back, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (1, 3, 5)))
def test_byte_roundtrip_property(q):
    assert quantize(dequantize(q))[0].tobytes() == q.tobytes()


def test_clamped_count_reported(tmp_path):
    assert write_image(np.array([[[2.0, -3.0, 0.0]]]), tmp_path / "c.pgm") == 2


def test_decode_errors():
    with pytest.raises(DataError):
        decode_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataError):
        decode_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(DataError):
        decode_bytes(b"P5\n1 1\n65535\n\x00\x00")
    assert decode_bytes(b"P5\n# made by hand\n1 1\n255\n\x07")[0, 0, 0] == 7


def test_mask_io(tmp_path):
    m = np.zeros((1, 4, 4))
    m[0, 1:3] = 1
    write_mask(m, tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)
    write_image(np.zeros((1, 2, 2)), tmp_path / "g.pgm")
    with pytest.raises(DataError):
        read_mask(tmp_path / "g.pgm")
    with pytest.raises(DomainError):
        write_mask(np.full((1, 2, 2), 0.5), tmp_path / "x.pgm")


def test_grid_image_layout():
    a = np.zeros((1, 4, 4))
    out = grid_image([[a, a, a], [a, a, a]])
    assert out.shape == (1, 10, 16)
    assert np.all(out[:, 4:6] == 1.0) and np.all(out[:, :, 4:6] == 1.0)
    with pytest.raises(DomainError):
        grid_image([[a, np.zeros((1, 3, 3))]])


def test_psnr_cases(np_rng):
    a = np_rng.uniform(-1, 1, (1, 8, 8))
    assert psnr(a, a) == math.inf
    b = a + 0.2  # MSE 0.04
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    c = np_rng.uniform(-1, 1, (1, 8, 8))
    err = sum((x - y) ** 2 for x, y in zip(a.ravel(), c.ravel())) / a.size
    assert psnr(a, c) == pytest.approx(10 * math.log10(4 / err), rel=1e-9)
    assert psnr(a, c) == psnr(c, a)
    with pytest.raises(DomainError):
        psnr(a, a[:, :4])


def test_masked_mse_cases(np_rng):
    a = np_rng.uniform(-1, 1, (1, 6, 6))
    m = (np_rng.random((1, 6, 6)) > 0.5).astype(float)
    assert masked_mse(a, a, m) == 0
    b = a.copy()
    b[0, 2, 3] += 0.5
    single = np.zeros((1, 6, 6))
    single[0, 2, 3] = 1
    assert masked_mse(a, b, single) == 0.25
    c = np_rng.uniform(-1, 1, (1, 6, 6))
    total, n = 0.0, 0
    for idx in np.ndindex(a.shape):
        if m[idx] == 1:
            total += (a[idx] - c[idx]) ** 2
            n += 1
    assert masked_mse(a, c, m) == pytest.approx(total / n, rel=1e-12)
    assert masked_mse(a, c, m) == masked_mse(c, a, m)
    with pytest.raises(DomainError):
        masked_mse(a, c, np.zeros((1, 6, 6)))


def test_ssim_cases(np_rng):
    a = np_rng.uniform(-1, 1, (1, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    # period-7 sinusoid: every 7-wide window has zero mean
    z = np.sin(2 * np.pi * np.arange(16) / 7)[None, None, :] * np.ones((1, 16, 1))
    assert ssim(z, -z) < 0
    b = np_rng.uniform(-1, 1, (1, 16, 16))
    assert ssim(a, b) == pytest.approx(ssim_windows(a, b, 7), rel=1e-6)
    assert ssim(a, b, window=3) == pytest.approx(ssim_windows(a, b, 3), rel=1e-6)
    with pytest.raises(DomainError):
        ssim(a, b[:, :8])
    with pytest.raises(DomainError):
        ssim(a[:, :4, :4], b[:, :4, :4])


def test_checkpoint_format_layout():
    rec = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.array([1.5], np.float32)}
    data = checkpoint.encode(rec)
    assert data[:8] == b"KAOCKPT\x00" and data[8] == 1
    assert struct.unpack_from("<I", data, 9)[0] == 2
    assert struct.unpack_from("<I", data, 13)[0] == 1 and data[17:18] == b"w"
    assert struct.unpack_from("<3I", data, 18) == (2, 2, 3)
    back = checkpoint.decode(data)
    assert list(back) == ["w", "s"] and np.array_equal(back["w"], rec["w"])
    assert checkpoint.encode(back) == data


def test_checkpoint_errors(tmp_path):
    data = checkpoint.encode({"a": np.zeros(3, np.float32)})
    with pytest.raises(DataError):
        checkpoint.decode(b"NOTACKPT" + data[8:])
    with pytest.raises(DataError):
        checkpoint.decode(data[:-2])
    with pytest.raises(DataError):
        checkpoint.decode(data + b"\x00")
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "missing.ckpt")
    checkpoint.save(tmp_path / "ok.ckpt", {"a": np.ones(2, np.float32)})
    assert [p.name for p in tmp_path.iterdir()] == ["ok.ckpt"]
