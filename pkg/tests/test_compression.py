import numpy as np
import pytest

from remfl import compression as comp
from remfl.nn import ParameterError

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# error feedback
# ---------------------------------------------------------------------------

def test_accumulate_zero_residual():
    d = RNG.normal(size=10)
    assert np.array_equal(comp.accumulate(d, np.zeros(10)), d)


def test_accumulate_zero_delta():
    r = RNG.normal(size=10)
    assert np.array_equal(comp.accumulate(np.zeros(10), r), r)


def test_accumulate_inverse():
    d, r = RNG.normal(size=10), RNG.normal(size=10)
    assert np.allclose(comp.accumulate(d, r) - r, d, atol=1e-12)


def test_accumulate_length_mismatch():
    with pytest.raises(ParameterError):
        comp.accumulate(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# top-k
# ---------------------------------------------------------------------------

def test_top_k_keeps_largest_magnitudes():
    u = np.array([3.0, -5.0, 1.0, 0.5])
    assert np.array_equal(comp.top_k(u, 2), [3.0, -5.0, 0.0, 0.0])


def test_top_k_full_is_identity():
    u = RNG.normal(size=16)
    assert np.array_equal(comp.top_k(u, 16), u)


def test_top_k_zero_keeps_nothing():
    u = RNG.normal(size=8)
    sparse = comp.top_k(u, 0)
    assert not np.any(sparse)
    assert np.array_equal(comp.residual_update(u, sparse), u)


def test_top_k_out_of_range():
    with pytest.raises(ParameterError):
        comp.top_k(np.zeros(4), 5)


def test_top_k_tie_break_lower_index():
    sparse = comp.top_k(np.array([1.0, -1.0, 1.0]), 2)
    assert np.array_equal(sparse, [1.0, -1.0, 0.0])


def test_top_k_drops_exact_zeros():
    sparse = comp.top_k(np.array([0.0, 2.0, 0.0]), 3)
    assert np.count_nonzero(sparse) == 1


def test_top_k_matches_sort_oracle():
    for _ in range(200):
        n = int(RNG.integers(1, 2000))
        # coarse values force magnitude ties
        u = np.round(RNG.normal(size=n), 1)
        k = int(RNG.integers(0, n + 1))
        kept = set(np.flatnonzero(comp.top_k(u, k)))
        order = sorted(range(n), key=lambda i: (-abs(u[i]), i))
        expect = {i for i in order[:k] if u[i] != 0}
        assert kept == expect
        # magnitude dominance
        if kept and len(kept) < np.count_nonzero(u):
            dropped = [abs(u[i]) for i in range(n)
                       if i not in kept and u[i] != 0]
            assert min(abs(u[i]) for i in kept) >= max(dropped)


def test_residual_identity_by_construction():
    u = RNG.normal(size=100)
    sparse = comp.top_k(u, 10)
    res = comp.residual_update(u, sparse)
    assert np.array_equal(sparse + res, u)
    assert np.all(res[np.flatnonzero(sparse)] == 0.0)


def test_residual_from_doc_example():
    u = np.array([3.0, -5.0, 1.0, 0.5])
    res = comp.residual_update(u, comp.top_k(u, 2))
    assert np.array_equal(res, [0.0, 0.0, 1.0, 0.5])


def test_full_k_zero_residual():
    u = RNG.normal(size=32)
    assert not np.any(comp.residual_update(u, comp.top_k(u, 32)))


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def test_quantize_known_values():
    q = comp.quantize(np.array([0.5, -1.0]))
    assert np.array_equal(q.indices, [0, 1])
    # round(63.5) = 64 under half-away-from-zero
    assert np.array_equal(q.qvalues, [64, -127])
    assert q.scale == pytest.approx(1.0 / 127, rel=1e-6)


def test_quantize_empty():
    q = comp.quantize(np.zeros(9))
    assert q.nnz == 0 and q.scale == 0.0 and q.length == 9
    assert np.array_equal(comp.dequantize(q), np.zeros(9))


def test_quantize_max_maps_to_127():
    for _ in range(20):
        v = np.zeros(50)
        idx = RNG.choice(50, 5, replace=False)
        v[idx] = RNG.normal(size=5)
        q = comp.quantize(v)
        assert np.max(np.abs(q.qvalues)) == 127


def test_quantize_odd_symmetry():
    v = np.zeros(20)
    v[[2, 5, 11]] = [0.3, -1.7, 0.9]
    q1, q2 = comp.quantize(v), comp.quantize(-v)
    assert np.array_equal(q1.qvalues, -q2.qvalues)
    assert q1.scale == q2.scale


def test_quantize_rejects_non_finite():
    with pytest.raises(comp.CodecError):
        comp.quantize(np.array([1.0, np.nan]))


def test_dequantize_bound_and_sign():
    for _ in range(100):
        v = np.zeros(64)
        idx = RNG.choice(64, 8, replace=False)
        v[idx] = RNG.normal(size=8)
        q = comp.quantize(v)
        back = comp.dequantize(q)
        assert np.max(np.abs(back - v)) <= q.scale / 2 + 1e-12
        # symmetric quantizer never flips a sign (tiny values may drop to 0)
        assert np.all(back[idx] * v[idx] >= 0.0)
        kept = back[idx] != 0
        assert np.all(np.sign(back[idx][kept]) == np.sign(v[idx][kept]))


def test_dequantize_index_out_of_range():
    q = comp.QuantizedUpdate(np.array([5], dtype=np.uint32),
                             np.array([1], dtype=np.int8), 1.0, 4, 0, 0)
    with pytest.raises(comp.CodecError):
        comp.dequantize(q)


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

def _random_update(rng):
    length = int(rng.integers(1, 500))
    nnz = int(rng.integers(0, min(length, 20) + 1))
    idx = np.sort(rng.choice(length, nnz, replace=False)).astype(np.uint32)
    qv = rng.integers(-127, 128, nnz).astype(np.int8)
    scale = float(np.float32(rng.random())) if nnz else 0.0
    return comp.QuantizedUpdate(idx, qv, scale, length,
                                int(rng.integers(0, 256)),
                                int(rng.integers(0, 1000)))


def _same(a, b):
    return (np.array_equal(a.indices, b.indices)
            and np.array_equal(a.qvalues, b.qvalues)
            and a.scale == b.scale and a.length == b.length
            and a.client_id == b.client_id and a.round == b.round)


def test_codec_roundtrip_field_exact():
    rng = np.random.default_rng(3)
    for _ in range(500):
        q = _random_update(rng)
        assert _same(comp.decode(comp.encode(q)), q)


def test_encoded_size_formula():
    rng = np.random.default_rng(4)
    for _ in range(50):
        q = _random_update(rng)
        buf = comp.encode(q)
        assert len(buf) == 21 + 5 * q.nnz
        assert comp.uplink_bytes(q) == len(buf)


def test_empty_payload_is_header_only():
    q = comp.quantize(np.zeros(100))
    assert len(comp.encode(q)) == 21


def test_uplink_bytes_example():
    q = comp.QuantizedUpdate(
        np.arange(1000, dtype=np.uint32),
        np.ones(1000, dtype=np.int8), 1.0, 2000, 0, 0)
    assert comp.uplink_bytes(q) == 5021


def test_dense_baseline_bytes():
    assert comp.dense_bytes(1000) == 4000


def test_compression_ratio_at_one_percent():
    length = 225792
    nnz = round(0.01 * length)
    ratio = (21 + 5 * nnz) / comp.dense_bytes(length)
    assert ratio == pytest.approx(0.0125, abs=0.001)


def test_decode_bad_magic():
    buf = b"XXXX" + b"\x00" * 17
    with pytest.raises(comp.CodecError):
        comp.decode(buf)


def test_decode_truncation():
    q = comp.quantize(np.array([1.0, 0.0, -2.0]))
    buf = comp.encode(q)
    with pytest.raises(comp.CodecError):
        comp.decode(buf[:-1])
    with pytest.raises(comp.CodecError):
        comp.decode(buf[:10])


def test_decode_rejects_unsorted_indices():
    q = comp.QuantizedUpdate(np.array([3, 1], dtype=np.uint32),
                             np.array([1, 1], dtype=np.int8), 1.0, 10, 0, 0)
    with pytest.raises(comp.CodecError):
        comp.decode(comp.encode(q))


def test_decode_rejects_index_beyond_length():
    q = comp.QuantizedUpdate(np.array([9], dtype=np.uint32),
                             np.array([1], dtype=np.int8), 1.0, 5, 0, 0)
    with pytest.raises(comp.CodecError):
        comp.decode(comp.encode(q))


def test_encode_rejects_wide_client_id():
    q = comp.quantize(np.zeros(4), client_id=300)
    with pytest.raises(comp.CodecError):
        comp.encode(q)


# ---------------------------------------------------------------------------
# telescoping identity across rounds
# ---------------------------------------------------------------------------

def _run_stream(rounds, length, k, quantized, seed=0):
    rng = np.random.default_rng(seed)
    residual = np.zeros(length)
    transmitted = np.zeros(length)
    raw = np.zeros(length)
    scale_sum = 0.0
    for t in range(rounds):
        delta = rng.normal(size=length)
        raw += delta
        u = comp.accumulate(delta, residual)
        sparse = comp.top_k(u, k)
        residual = comp.residual_update(u, sparse)
        if quantized:
            q = comp.quantize(sparse)
            transmitted += comp.dequantize(q)
            scale_sum += q.scale / 2
        else:
            transmitted += sparse
    return transmitted, residual, raw, scale_sum


def test_telescoping_exact_without_quantization():
    tx, res, raw, _ = _run_stream(100, 300, 30, quantized=False)
    assert np.max(np.abs(tx + res - raw)) < 1e-10


def test_telescoping_within_quantization_bound():
    tx, res, raw, bound = _run_stream(100, 300, 30, quantized=True)
    assert np.max(np.abs(tx + res - raw)) <= bound + 1e-9
