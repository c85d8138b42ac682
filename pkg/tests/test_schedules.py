import math

import numpy as np
import pytest

from eflanding.engine import NodeState
from eflanding.manifold import MeritParams, SafeRegionParams, merit_value, safe_step_size
from eflanding.schedules import (
    LyapunovSetup,
    ScheduleParams,
    alpha_from_theta,
    lyapunov_value,
    schedule_deterministic,
    schedule_stochastic,
    schedule_stochastic_two_pass,
    stochastic_constants,
    stochastic_gamma_terms,
    lyapunov_case,
)

SAFE = SafeRegionParams(0.5, 1.0, 1.0)
MERIT = MeritParams(10.0, 1.0, 1.0, 2.0)


def test_schedule_params_validation():
    with pytest.raises(ValueError):
        ScheduleParams(0.0)
    with pytest.raises(ValueError):
        ScheduleParams(0.1, eta=0.0)
    with pytest.raises(ValueError):
        ScheduleParams(0.1, eta=1.5)
    with pytest.raises(ValueError):
        ScheduleParams(0.1, c1=1.0, c2=1.0)
    with pytest.raises(ValueError):
        ScheduleParams(0.1, decay=((5, -1.0),))
    s = ScheduleParams(0.1, decay=((10, 0.01), (5, 0.05)))
    assert [s.gamma_at(k) for k in (0, 5, 9, 10, 99)] == [0.1, 0.05, 0.05, 0.01, 0.01]


def test_lyapunov_cases():
    assert lyapunov_case(0.3, 1.0, 0.0) == (1.0, 0.0)
    assert lyapunov_case(1.0, 1.0, 0.0) == (1.0, 0.0)
    assert lyapunov_case(1.0, 0.5, 1.0) == (0.0, 1.0)
    assert lyapunov_case(0.3, 0.5, 1.0) == (2.0, 2.0)


def test_deterministic_example():
    s = schedule_deterministic(SAFE, MERIT, 1.0, 0.0)
    assert s.gamma == pytest.approx(0.25 / 2.625, rel=1e-14)
    assert (s.eta, s.c1, s.c2) == (1.0, 1.0, 0.0)


def test_deterministic_exact_compression_simplifies():
    merit = MeritParams(3.0, 1.0, 1.0, 40.0)
    s = schedule_deterministic(SAFE, merit, 1.0, 0.0)
    simple = min(safe_step_size(SAFE), 1 / (2 * 40.0), 3.0 / (4 * 1.5 * 40.0))
    assert s.gamma == pytest.approx(simple, rel=1e-14)


def test_deterministic_large_Lm_shrinks_step():
    s = schedule_deterministic(SAFE, MeritParams(10.0, 1.0, 1.0, 1e12), 0.5, 0.5)
    assert s.gamma < 1e-12


def test_deterministic_with_compression_matches_formula():
    theta, beta = 0.5, 0.5
    a = 2 * beta * 1.0 / theta
    k = 1.5
    g1 = 1 / (2 * math.sqrt(a) + 2 * 2.0)
    g2 = 1 / (2 * math.sqrt(2 * k * a / 10.0) + 4 * k * 2.0 / 10.0)
    expect = min(0.25 / 2.625, g1, g2)
    assert schedule_deterministic(SAFE, MERIT, theta, beta).gamma == pytest.approx(expect, rel=1e-14)


def test_stochastic_gamma_is_min_of_seven_terms():
    theta, beta, eta, c1, c2 = 0.5, 0.5, 0.5, 2.0, 2.0
    k = 1.0 * 1.5
    terms = [
        0.25 / 2.625,
        (1 / 6) * math.sqrt(theta / (2 * c1 * beta)),
        eta / (6 * math.sqrt(2 * c2)),
        1 / 12,
        (1 / 12) * math.sqrt(10 * theta / (c1 * k * beta)),
        (eta / 12) * math.sqrt(10 / (c2 * k)),
        10 / (12 * k * 2),
    ]
    got = stochastic_gamma_terms(SAFE, MERIT, theta, beta, eta, c1, c2)
    np.testing.assert_allclose(got, terms, rtol=1e-14)
    s = schedule_stochastic(SAFE, MERIT, theta, beta, 4, 1000, 1.0, 1.0, eta=eta)
    assert s.gamma == pytest.approx(min(terms), rel=1e-14)
    assert (s.c1, s.c2, s.eta) == (2.0, 2.0, 0.5)


def test_stochastic_eta_rules():
    # tiny noise: every candidate exceeds one, so eta clamps to one
    s = schedule_stochastic(SAFE, MERIT, 0.5, 0.5, 4, 100, 1e-9, 1.0)
    assert s.eta == 1.0
    theta, beta = 0.5, 0.5
    consts = stochastic_constants(SAFE, MERIT, theta, beta)
    N, K, sigma, L0 = 4, 10_000, 3.0, 2.0
    alpha = alpha_from_theta(theta)
    C2 = consts.C2_gamma
    expect = min(
        math.sqrt(C2 * N * L0 / (2 * sigma**2 * K)),
        (theta * C2 * L0 / (2 * (1 - alpha) * sigma**2 * K)) ** (1 / 3),
        (theta * C2 * L0 / (4 * beta * sigma**2 * K)) ** 0.25,
        1.0,
    )
    s = schedule_stochastic(SAFE, MERIT, theta, beta, N, K, sigma, L0)
    assert s.eta == pytest.approx(expect, rel=1e-14)


def test_stochastic_constants():
    base = 1 / (0.25 / 2.625) + 6 * 2.0 + 12 * 1.5 * 2.0 / 10.0
    exact = stochastic_constants(SAFE, MERIT, 1.0, 0.0)
    assert (exact.c1, exact.c2) == (0.0, 1.0)
    assert exact.C1_gamma == pytest.approx(base, rel=1e-14)
    assert exact.C2_gamma == pytest.approx(6 * math.sqrt(2) + 12 * math.sqrt(1.5 / 10.0), rel=1e-14)
    comp = stochastic_constants(SAFE, MERIT, 0.5, 0.5)
    extra = 12 * math.sqrt(0.5 / 0.5) + 12 * math.sqrt(2 * 1.5 * 0.5 / (10.0 * 0.5))
    assert comp.C1_gamma == pytest.approx(base + extra, rel=1e-14)
    assert comp.C2_gamma == pytest.approx(12 + 12 * math.sqrt(2 * 1.5 / 10.0), rel=1e-14)


def test_stochastic_exact_compression_case():
    s = schedule_stochastic(SAFE, MERIT, 1.0, 0.0, 4, 10_000, 2.0, 1.0)
    consts = stochastic_constants(SAFE, MERIT, 1.0, 0.0)
    assert (s.c1, s.c2) == (0.0, 1.0)
    assert s.eta == pytest.approx(math.sqrt(consts.C2_gamma * 4 * 1.0 / (4.0 * 10_000)), rel=1e-14)


def test_stochastic_rejects_zero_noise():
    with pytest.raises(ValueError):
        schedule_stochastic(SAFE, MERIT, 0.5, 0.5, 4, 100, 0.0, 1.0)


def test_two_pass_adds_error_terms():
    s, L0 = schedule_stochastic_two_pass(SAFE, MERIT, 0.5, 0.5, 4, 1000, 1.0, 2.0, 3.0)
    assert L0 > 2.0
    again = schedule_stochastic(SAFE, MERIT, 0.5, 0.5, 4, 1000, 1.0, L0)
    assert s == again


def _states(vs, gs):
    out = []
    for i, (v, g) in enumerate(zip(vs, gs)):
        out.append(NodeState(i, None, v=v.copy(), g_local=g.copy()))
    return out


def test_lyapunov_reduces_to_merit_gap():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 2))
    grads = [rng.standard_normal((4, 2)) for _ in range(3)]
    gbar = (grads[0] + grads[1] + grads[2]) / 3
    setup = LyapunovSetup(MERIT, -1.0)
    sched = ScheduleParams(0.1, 0.5, c1=2, c2=2, theta=0.5, beta=0.5, mode="stochastic")
    val = lyapunov_value(_states(grads, grads), X, grads, setup, sched, f_at_X=0.3, grad_f_at_X=gbar)
    assert val == pytest.approx(merit_value(X, gbar, 0.3, 10.0) + 1.0, rel=1e-14)


def test_lyapunov_perturbation_of_one_mirror():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 2))
    grads = [rng.standard_normal((4, 2)) for _ in range(2)]
    gbar = (grads[0] + grads[1]) / 2
    setup = LyapunovSetup(MERIT, 0.0)
    sched = ScheduleParams(0.1, 1.0, c1=1, c2=0, theta=0.5, beta=0.5)
    base = lyapunov_value(_states(grads, grads), X, grads, setup, sched, f_at_X=0.0, grad_f_at_X=gbar)
    D = rng.standard_normal((4, 2))
    moved = lyapunov_value(_states(grads, [grads[0] + D, grads[1]]), X, grads, setup, sched,
                           f_at_X=0.0, grad_f_at_X=gbar)
    assert moved - base == pytest.approx(1.0 * 0.1 / 0.5 * float(np.sum(D * D)) / 2, rel=1e-10)
