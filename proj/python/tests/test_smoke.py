import numpy as np
import pytest

import dithc


def test_matmul_matches_naive_bitwise():
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        a = rng.standard_normal((13, 21)).astype(dtype)
        b = rng.standard_normal((21, 9)).astype(dtype)
        c = dithc.matmul(a, b)
        assert c.dtype == dtype
        assert np.array_equal(c, dithc.gemm_naive(a, b))
        np.testing.assert_allclose(c, a.astype(np.float64) @ b, rtol=1e-4, atol=1e-4)


def test_allreduce_inproc_sums():
    rng = np.random.default_rng(1)
    bufs = [rng.standard_normal(1000) for _ in range(4)]
    out = dithc.allreduce_inproc(bufs)
    assert len(out) == 4
    np.testing.assert_allclose(out[0], sum(bufs), rtol=1e-12)
    for o in out[1:]:
        assert np.array_equal(o, out[0])


def test_frame_header_round_trip():
    raw = dithc.encode_frame_header(2, 7, 64, 0)
    assert len(raw) == 32
    assert raw[:4] == bytes([0x31, 0x43, 0x48, 0x44])
    assert dithc.decode_frame_header(raw) == (2, 7, 64, 0)


def test_trainer_steps_and_first_loss():
    t = dithc.Trainer(model="toy", batch=4, seed=3)
    m = t.step()
    assert 0.8 < m["loss"] < 1.2
    assert m["flops"] == t.flops_per_step
    assert t.steps_done == 1


def test_trainer_deterministic():
    a = [dithc.Trainer(batch=2, seed=5).step()["loss"] for _ in range(2)]
    assert a[0] == a[1]


def test_errors_map_to_python():
    with pytest.raises(dithc.ConfigError):
        dithc.Trainer(model="huge")
    with pytest.raises(dithc.OutOfTier):
        dithc.Trainer(batch=8, fast_capacity=64 << 10).step()
    with pytest.raises(ValueError):
        dithc.matmul(np.ones((2, 3)), np.ones((2, 3)))
