import numpy as np
import pytest

from editfix.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from editfix.optim import AdamW, adamw_step, triangular_lr
from editfix.tensor import NumericError, Parameter


def test_triangular_schedule_shape():
    total, peak = 100, 1e-3
    warmup = 10
    assert triangular_lr(warmup, total, peak) == pytest.approx(peak)  # apex
    assert triangular_lr(1, total, peak) == pytest.approx(peak / warmup)
    assert triangular_lr(total, total, peak) == pytest.approx(0.0)
    # rising then falling
    rates = [triangular_lr(s, total, peak) for s in range(1, total + 1)]
    assert all(a <= b + 1e-15 for a, b in zip(rates[:warmup], rates[1:warmup]))
    assert all(a >= b - 1e-15 for a, b in zip(rates[warmup:], rates[warmup + 1 :]))


def test_lr_zero_leaves_parameters_unchanged():
    p = Parameter("p", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.5])
    opt = AdamW([p], lr=0.0, weight_decay=0.3)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_magnitude_is_lr():
    # g = 1, default betas, no decay: bias-corrected first update == lr
    p = Parameter("p", np.array([0.0]))
    p.grad = np.array([1.0])
    opt = AdamW([p], lr=1e-3, weight_decay=0.0)
    opt.step()
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adamw_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = Parameter("p", rng.normal(size=6))
    ref = p.data.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    opt = AdamW([p], lr=2e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    for t in range(1, 6):
        g = rng.normal(size=6)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9**t)
        vh = v / (1 - 0.999**t)
        ref = ref - 2e-3 * (mh / (np.sqrt(vh) + 1e-8) + 0.01 * ref)
        np.testing.assert_allclose(p.data, ref, rtol=1e-10)


def test_nan_gradient_aborts_with_parameter_name():
    p = Parameter("weights/w1", np.zeros(3))
    p.grad = np.array([0.0, np.nan, 0.0])
    opt = AdamW([p])
    with pytest.raises(NumericError, match="weights/w1"):
        opt.step()


def test_adamw_step_function_nan_check():
    with pytest.raises(NumericError):
        adamw_step(np.zeros(2), np.array([np.inf, 0.0]), np.zeros(2), np.zeros(2), 1, 1e-3)


def test_optimizer_state_roundtrip():
    p = Parameter("p", np.ones(4))
    opt = AdamW([p], lr=1e-3)
    for _ in range(3):
        p.grad = np.full(4, 0.1)
        opt.step()
    arrays = opt.state_arrays()
    p2 = Parameter("p", np.ones(4))
    opt2 = AdamW([p2], lr=1e-3)
    opt2.load_state_arrays(arrays)
    assert opt2.t == 3
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arrays = {
        "a/w": rng.normal(size=(3, 4)).astype(np.float32),
        "a/b": rng.normal(size=5).astype(np.float64),
        "counts": np.arange(7, dtype=np.int64),
        "scalarish": np.array(3.5, dtype=np.float32),
    }
    manifest = {"kind": "test", "config": {"q": 1}}
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, arrays, manifest)
    loaded, man = load_checkpoint(path)
    assert man == manifest
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].shape == arrays[k].shape
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].flags.writeable


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_save_is_deterministic(tmp_path):
    arrays = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "a.bin", arrays, {"k": 1})
    save_checkpoint(tmp_path / "b.bin", arrays, {"k": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
