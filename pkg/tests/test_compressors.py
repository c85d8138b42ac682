import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eflanding import compressors as C


def test_identity_roundtrip_and_bytes():
    M = np.random.default_rng(0).standard_normal((4, 3))
    msg = C.compress(C.IDENTITY, M)
    assert np.array_equal(msg.logical, M)
    assert msg.bytes_on_wire == 8 * 12


def test_topk_counterexample():
    msg = C.compress(C.topk(1), np.array([[2.0], [1.0]]))
    np.testing.assert_array_equal(msg.logical, [[2.0], [0.0]])
    assert msg.bytes_on_wire == 12


def test_topk_tie_break_lowest_index():
    M = np.array([[1.0, -3.0], [3.0, -1.0], [3.0, 0.5]])
    out = C.compress(C.topk(2), M).logical
    np.testing.assert_array_equal(out, [[0.0, -3.0], [3.0, 0.0], [0.0, 0.0]])


@settings(max_examples=200)
@given(st.integers(1, 40), st.data())
def test_topk_matches_stable_sort_oracle(d, data):
    k = data.draw(st.integers(1, d))
    x = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=d, max_size=d)), dtype=float)
    order = np.argsort(-np.abs(x), kind="stable")[:k]
    expect = np.zeros(d)
    expect[order] = x[order]
    assert np.array_equal(C.compress(C.topk(k), x).logical, expect)


def test_randk_full_retention_and_bytes():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((3, 4))
    for policy in C.SeedPolicy:
        msg = C.compress(C.randk(12, policy), M, rng)
        assert np.array_equal(msg.logical, M)
    assert C.compress(C.randk(5, "shared_seed"), M, rng).bytes_on_wire == 40
    assert C.compress(C.randk(5, "transmit_indices"), M, rng).bytes_on_wire == 60


def test_randk_needs_rng():
    with pytest.raises(ValueError):
        C.compress(C.randk(1), np.ones(3))


def test_qsgd_zero_and_bytes():
    for spec in (C.qsgd(4), C.qsgd(4, scaled=True)):
        msg = C.compress(spec, np.zeros((5, 2)), np.random.default_rng(0))
        assert np.array_equal(msg.logical, np.zeros((5, 2)))
        # 3 level bits + 1 sign bit per entry, 10 entries -> 5 bytes, plus the norm
        assert msg.bytes_on_wire == 8 + 5
    assert C.message_bytes(C.qsgd(16), 100) == 8 + math.ceil(100 * 6 / 8)
    assert C.message_bytes(C.qsgd(1), 7) == 8 + 2


def test_qsgd_unbiased():
    rng = np.random.default_rng(2)
    M = rng.standard_normal(6)
    acc = np.zeros(6)
    T = 20_000
    outs = np.array([C.compress(C.qsgd(2), M, rng).logical for _ in range(T)])
    acc = outs.mean(axis=0)
    se = outs.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.all(np.abs(acc - M) <= 4 * se + 1e-12)


def test_message_bytes_formula():
    assert C.message_bytes(C.IDENTITY, 500) == 4000
    assert C.message_bytes(C.topk(50), 500) == 600
    assert C.message_bytes(C.randk(50, "shared_seed"), 500) == 400
    assert C.message_bytes(C.randk(50, "transmit_indices"), 500) == 600


@pytest.mark.parametrize(
    "spec",
    [C.IDENTITY, C.topk(3), C.randk(3, "transmit_indices"), C.randk(3, "shared_seed"), C.qsgd(3), C.qsgd(5, True)],
)
def test_payload_roundtrip_is_bitwise(spec):
    rng = np.random.default_rng(3)
    M = rng.standard_normal((4, 2))
    seed_rng = np.random.default_rng([9, 9])
    msg = C.compress(spec, M, seed_rng)
    assert msg.bytes_on_wire == C.message_bytes(spec, 8)
    if spec.kind is C.Kind.RANDK and spec.seed_policy is C.SeedPolicy.SHARED_SEED:
        out = C.decompress(spec, msg, rng=np.random.default_rng([9, 9]))
        with pytest.raises(ValueError):
            C.decompress(spec, msg)
    else:
        out = C.decompress(spec, msg)
    assert np.array_equal(out, msg.logical)


def test_contractive_factor_and_theta_beta():
    assert C.contractive_factor(C.IDENTITY, (3, 2)) == 1.0
    assert C.contractive_factor(C.topk(6), (3, 2)) == 1.0
    assert C.contractive_factor(C.randk(1), (2, 1)) == 0.5
    assert C.theta_beta(1.0) == (1.0, 0.0)
    assert C.theta_beta(0.75) == pytest.approx((0.5, 0.5), rel=1e-15)
    assert C.theta_beta(0.96) == pytest.approx((0.8, 0.05), rel=1e-12)
    with pytest.raises(ValueError):
        C.theta_beta(0.0)
    # raw QSGD: omega = min(d/s^2, sqrt(d)/s) = min(4/16, 2/4) = 0.25
    assert C.contractive_factor(C.qsgd(4), (4,)) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        C.contractive_factor(C.qsgd(1), (100,))
    assert C.contractive_factor(C.qsgd(16, True), (100,)) == pytest.approx(1 / (1 + min(100 / 256, 10 / 16)))


def test_randk_enumeration_d2():
    # both index choices are equally likely; the dropped entry is the error
    x = np.array([3.0, 4.0])
    errs = [x[1] ** 2, x[0] ** 2]
    assert np.mean(errs) / (x @ x) == 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        C.topk(0)
    with pytest.raises(ValueError):
        C.CompressorSpec(C.Kind.QSGD, s=0)
    with pytest.raises(ValueError):
        C.CompressorSpec(C.Kind.IDENTITY, alpha=0.5)
    with pytest.raises(ValueError):
        C.compress(C.topk(5), np.ones(3))
    assert C.k_from_ratio(0.1, 500_000) == 50_000
    assert C.k_from_ratio(0.01, 10) == 1


def test_estimate_contraction_examples():
    rng = np.random.default_rng(4)
    assert C.estimate_contraction(C.IDENTITY, (4, 3), 50, rng)[0] == 0.0
    assert C.estimate_contraction(C.topk(12), (4, 3), 50, rng)[0] == 0.0
    mean, se = C.estimate_contraction(C.randk(1), (10,), 100_000, rng)
    assert abs(mean - 0.9) <= 3 * se


def test_shared_seed_node_master_agree():
    from eflanding.engine import TAG_COMPRESS, stream

    spec = C.randk(4, "shared_seed")
    M = np.random.default_rng(5).standard_normal((5, 2))
    msg = C.compress(spec, M, stream(11, TAG_COMPRESS, 2, 7))
    master = C.decompress(spec, msg, rng=stream(11, TAG_COMPRESS, 2, 7))
    assert np.array_equal(master, msg.logical)
