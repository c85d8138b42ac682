import math
import struct

import numpy as np
import pytest

from eflanding import compressors as C
from eflanding.diagnostics import canonical_correlation_distance
from eflanding.engine import run_blockwise
from eflanding.manifold import random_safe_point
from eflanding.problems import (
    BlockToyProblem,
    NoisyOracle,
    PcaProblem,
    gen_block_toy,
    gen_pca_data,
    load_dataset,
    loss_gap,
    mean_in_order,
    noisy_gradient,
    partition_rows,
    pca_gradient,
    read_dataset_header,
    save_dataset,
)
from eflanding.schedules import ScheduleParams


@pytest.fixture(scope="module")
def pca():
    return gen_pca_data(20, 30, 3, 0.1, 4, seed=7)


def test_noiseless_data_recovers_planted_subspace():
    prob = gen_pca_data(10, 500, 2, 0.0, 1, seed=1)
    assert canonical_correlation_distance(prob.X_star, prob.U) <= 0.05


def test_partition_invariance(pca):
    one = pca.repartition(1)
    rng = np.random.default_rng(0)
    X = random_safe_point(20, 3, 0.5, rng)
    assert one.value(X) == pytest.approx(pca.value(X), rel=1e-12)
    np.testing.assert_allclose(one.gradient(X), pca.gradient(X), rtol=1e-11, atol=1e-13)
    assert np.array_equal(one.X_star, pca.X_star)
    assert one.f_star == pytest.approx(pca.f_star, rel=1e-12)


def test_generation_is_deterministic():
    a = gen_pca_data(8, 10, 2, 0.1, 2, seed=3)
    b = gen_pca_data(8, 10, 2, 0.1, 2, seed=3)
    c = gen_pca_data(8, 10, 2, 0.1, 2, seed=4)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_invalid_dims():
    with pytest.raises(ValueError):
        gen_pca_data(3, 10, 4, 0.1, 1, 0)
    with pytest.raises(ValueError):
        partition_rows(3, 4)
    assert partition_rows(10, 3) == [(0, 3), (3, 6), (6, 10)]


def test_isotropic_gradient():
    prob = PcaProblem(np.eye(6), 2, 1)
    X = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 2)))[0]
    np.testing.assert_allclose(pca_gradient(prob, 0, X), -X, atol=1e-15)
    from eflanding.manifold import relative_gradient

    np.testing.assert_allclose(relative_gradient(X, -X), 0, atol=1e-15)


def test_node_gradient_finite_differences(pca):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((20, 3))
    A = pca.blocks[1]

    def f1(Y):
        return -0.5 * float(np.sum((A @ Y) ** 2))

    h = 1e-5
    num = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        num[idx] = (f1(X + E) - f1(X - E)) / (2 * h)
    np.testing.assert_allclose(num, pca.node_gradient(1, X), rtol=1e-6, atol=1e-8)


def test_gradient_bound_holds_on_safe_region(pca):
    rng = np.random.default_rng(3)
    bound = pca.gradient_bound(0.5)
    for _ in range(1000):
        X = random_safe_point(20, 3, 0.5, rng)
        for i in range(pca.num_nodes):
            assert np.linalg.norm(pca.node_gradient(i, X)) <= bound


def test_global_gradient_is_ordered_mean(pca):
    X = np.random.default_rng(4).standard_normal((20, 3))
    assert np.array_equal(pca.gradient(X), mean_in_order([pca.node_gradient(i, X) for i in range(4)]))


def test_loss_gap_examples(pca):
    assert loss_gap(pca, pca.X_star) == pytest.approx(0.0, abs=1e-14)
    assert loss_gap(pca, pca.X_star[:, ::-1]) == pytest.approx(0.0, abs=1e-14)
    _, s, Vt = np.linalg.svd(pca.data, full_matrices=False)
    bottom = Vt[-3:].T
    expect = 0.5 * (np.sum(s[:3] ** 2) - np.sum(s[-3:] ** 2))
    assert loss_gap(pca, bottom) == pytest.approx(expect, rel=1e-10)


def test_loss_gap_rotation_invariance(pca):
    rng = np.random.default_rng(5)
    for _ in range(20):
        X = random_safe_point(20, 3, 0.5, rng)
        Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        assert abs(loss_gap(pca, X @ Q) - loss_gap(pca, X)) <= 1e-10


def test_noisy_oracle_sigma_zero_is_exact(pca):
    X = np.random.default_rng(6).standard_normal((20, 3))
    orc = NoisyOracle(pca, 0.0)
    assert np.array_equal(noisy_gradient(orc, 2, X, np.random.default_rng(0)), pca.node_gradient(2, X))


def test_noisy_oracle_moments():
    prob = gen_pca_data(4, 10, 2, 0.1, 1, seed=0)
    orc = NoisyOracle(prob, 0.7)
    X = np.random.default_rng(7).standard_normal((4, 2))
    exact = prob.node_gradient(0, X)
    rng = np.random.default_rng(8)
    T = 100_000
    draws = np.array([orc.sample(0, X, rng) for _ in range(T)])
    noise = draws - exact
    se = noise.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.all(np.abs(noise.mean(axis=0)) <= 3 * se)
    sq = np.sum(noise**2, axis=(1, 2))
    assert abs(sq.mean() - 0.49) <= 3 * sq.std(ddof=1) / math.sqrt(T)


def test_minibatch_oracle_unbiased():
    prob = gen_pca_data(4, 12, 2, 0.1, 2, seed=1)
    orc = NoisyOracle(prob, kind="minibatch", batch_size=3)
    X = np.random.default_rng(9).standard_normal((4, 2))
    rng = np.random.default_rng(10)
    T = 40_000
    draws = np.array([orc.sample(1, X, rng) for _ in range(T)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.all(np.abs(draws.mean(axis=0) - prob.node_gradient(1, X)) <= 4 * se)
    with pytest.raises(ValueError):
        NoisyOracle(prob, kind="minibatch")


def test_noisy_gradients_respect_bound():
    prob = gen_pca_data(10, 20, 3, 0.1, 2, seed=2)
    orc = NoisyOracle(prob, 1.0)
    bound = orc.gradient_bound(0.5)
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        X = random_safe_point(10, 3, 0.5, rng)
        assert np.linalg.norm(orc.sample(int(rng.integers(2)), X, rng)) <= bound


def test_dataset_roundtrip(tmp_path, pca):
    path = tmp_path / "d.bin"
    save_dataset(pca, path)
    raw = path.read_bytes()
    assert raw[:4] == b"EFLD"
    assert len(raw) == 32 + pca.data.size * 8
    hdr = read_dataset_header(path)
    assert hdr == {"n": 20, "l_total": 120, "N": 4, "p": 3, "seed": 7}
    back = load_dataset(path)
    assert np.array_equal(back.data, pca.data)
    assert np.array_equal(back.X_star, pca.X_star)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        load_dataset(bad)
    short = tmp_path / "short.bin"
    short.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_dataset(short)
    assert struct.calcsize("<4sIIIIIQ") == 32


def test_block_toy_single_block_is_pca_like():
    prob = gen_block_toy(1, [(6, 2)], seed=0)
    S = prob.S[0]
    w, V = np.linalg.eigh(S)
    top = V[:, -2:]
    assert canonical_correlation_distance(prob.block_optima[0], top) < 1e-10
    assert prob.f_star == pytest.approx(-0.5 * (w[-1] + w[-2]), rel=1e-12)


def test_block_toy_free_only():
    prob = gen_block_toy(0, [], seed=1, free_dim=4)
    from eflanding.blocks import BlockPoint

    assert prob.loss_gap(BlockPoint([], prob.x_target)) == 0.0
    g = prob.gradient(BlockPoint([], np.zeros(4)))
    np.testing.assert_array_equal(g.free, -prob.x_target)


def test_block_toy_converges_to_eigen_optima():
    prob = gen_block_toy(2, [(8, 2), (6, 3)], seed=2, free_dim=3, N=2)
    res = run_blockwise(prob, C.IDENTITY, ScheduleParams(0.05), 3000, 0, grad_bound=math.inf)
    for X, opt in zip(res.final.blocks, prob.block_optima):
        assert canonical_correlation_distance(X, opt) < 1e-8
    np.testing.assert_allclose(res.final.free, prob.x_target, atol=1e-10)
    assert isinstance(prob, BlockToyProblem)
