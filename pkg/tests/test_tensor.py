"""Container invariants and elementwise fusion arithmetic."""

import numpy as np
import pytest

from emergencynet.tensor import (
    Shape,
    Tensor,
    channel_concat,
    channel_slice,
    elementwise_combine,
    tensor_new,
)


def rand_tensor(rng, shape=(2, 3, 4, 5), dtype=np.float32):
    return Tensor(rng.standard_normal(shape).astype(dtype))


def test_tensor_accepts_contiguous_floats():
    t = Tensor(np.zeros((1, 2, 3, 4), dtype=np.float32))
    assert t.shape == Shape(1, 2, 3, 4)
    assert t.shape.elements == 24
    assert t.dtype == np.float32


def test_tensor_rejects_bad_inputs():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 2, 3, 4), dtype=np.int32))
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 3, 4), dtype=np.float32))


def test_tensor_makes_noncontiguous_contiguous():
    base = np.zeros((1, 4, 4, 8), dtype=np.float32)
    t = Tensor(base[:, :, :, ::2])
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == Shape(1, 4, 4, 4)


def test_tensor_new_fill_and_dtype():
    t = tensor_new((2, 1, 3, 3), fill=7.5, dtype=np.float64)
    assert t.dtype == np.float64
    assert np.all(t.data == 7.5)
    with pytest.raises(ValueError):
        tensor_new((0, 1, 1, 1))


def test_copy_is_independent():
    t = tensor_new((1, 1, 2, 2), fill=1.0)
    c = t.copy()
    c.data[0, 0, 0, 0] = 9.0
    assert t.data[0, 0, 0, 0] == 1.0


@pytest.mark.parametrize("mode", ["add", "max", "average"])
def test_combine_matches_numpy(mode):
    rng = np.random.default_rng(11)
    ts = [rand_tensor(rng) for _ in range(4)]
    got = elementwise_combine(ts, mode).data
    stack = np.stack([t.data for t in ts])
    want = {"add": stack.sum(0), "max": stack.max(0), "average": stack.mean(0)}[mode]
    assert np.allclose(got, want, rtol=0, atol=1e-6)
    assert got.dtype == np.float32


def test_combine_add_exact_on_integer_values():
    # integer-valued floats add exactly, so order permutations must agree
    rng = np.random.default_rng(5)
    ts = [Tensor(rng.integers(-50, 50, (2, 3, 4, 4)).astype(np.float32)) for _ in range(5)]
    base = elementwise_combine(ts, "add").data
    for perm_seed in range(3):
        order = np.random.default_rng(perm_seed).permutation(len(ts))
        shuffled = [ts[i] for i in order]
        assert np.array_equal(elementwise_combine(shuffled, "add").data, base)


def test_combine_max_ties_and_dtype():
    a = tensor_new((1, 1, 2, 2), fill=3.0)
    b = tensor_new((1, 1, 2, 2), fill=3.0)
    out = elementwise_combine([a, b], "max")
    assert np.all(out.data == 3.0)


def test_combine_validation():
    a = tensor_new((1, 1, 2, 2))
    b = tensor_new((1, 2, 2, 2))
    with pytest.raises(ValueError):
        elementwise_combine([a], "add")
    with pytest.raises(ValueError):
        elementwise_combine([a, b], "add")
    with pytest.raises(ValueError):
        elementwise_combine([a, a.astype(np.float64)], "add")
    with pytest.raises(ValueError):
        elementwise_combine([a, a], "mean")


def test_combine_add_f64_accumulation_keeps_output_dtype():
    rng = np.random.default_rng(3)
    ts = [rand_tensor(rng) for _ in range(3)]
    out = elementwise_combine(ts, "add", accum_dtype=np.float64)
    assert out.dtype == np.float32
    want = sum(t.data.astype(np.float64) for t in ts).astype(np.float32)
    assert np.array_equal(out.data, want)


def test_concat_then_slice_roundtrip():
    rng = np.random.default_rng(7)
    parts = [rand_tensor(rng, (2, c, 3, 3)) for c in (1, 4, 2)]
    whole = channel_concat(parts)
    assert whole.shape == Shape(2, 7, 3, 3)
    start = 0
    for p in parts:
        stop = start + p.shape.c
        assert np.array_equal(channel_slice(whole, start, stop).data, p.data)
        start = stop


def test_concat_validation():
    a = tensor_new((1, 2, 3, 3))
    b = tensor_new((1, 2, 4, 3))
    with pytest.raises(ValueError):
        channel_concat([])
    with pytest.raises(ValueError):
        channel_concat([a, b])


def test_channel_slice_bounds():
    t = tensor_new((1, 4, 2, 2))
    with pytest.raises(ValueError):
        channel_slice(t, 2, 2)
    with pytest.raises(ValueError):
        channel_slice(t, 0, 5)
    sl = channel_slice(t, 1, 3)
    assert sl.shape.c == 2
